//! Scores hand-made detections: suppression of duplicates and per-class
//! average precision against ground truth.

use bevkd::eval::{bev_iou, mean_average_precision, nms, Detection, SceneDetection};
use bevkd::scene::{BoxLabel, CLASS_LARGE, CLASS_SMALL};

fn det(cx: f64, cy: f64, w: f64, l: f64, class_id: usize, score: f64, origin: usize) -> Detection {
    Detection {
        cx,
        cy,
        w,
        l,
        class_id,
        score,
        origin,
    }
}

fn main() {
    let gts = vec![
        (
            0,
            BoxLabel {
                cx: 5.0,
                cy: 5.0,
                w: 4.0,
                l: 10.0,
                class_id: CLASS_LARGE,
            },
        ),
        (
            0,
            BoxLabel {
                cx: 20.0,
                cy: 20.0,
                w: 2.0,
                l: 2.0,
                class_id: CLASS_SMALL,
            },
        ),
        (
            1,
            BoxLabel {
                cx: 12.0,
                cy: 8.0,
                w: 2.0,
                l: 2.0,
                class_id: CLASS_SMALL,
            },
        ),
    ];
    let raw = vec![
        det(5.2, 5.1, 4.0, 10.0, CLASS_LARGE, 0.9, 0),
        det(5.6, 5.3, 4.0, 9.0, CLASS_LARGE, 0.7, 1),
        det(20.1, 19.8, 2.0, 2.0, CLASS_SMALL, 0.8, 2),
        det(25.0, 3.0, 2.0, 2.0, CLASS_SMALL, 0.6, 3),
    ];
    println!(
        "IoU of the two large boxes: {:.3}",
        bev_iou(&raw[0], &raw[1])
    );
    let kept = nms(&raw, 0.3);
    println!(
        "{} of {} detections survive suppression",
        kept.len(),
        raw.len()
    );
    let mut dets: Vec<SceneDetection> = kept
        .into_iter()
        .map(|det| SceneDetection { scene: 0, det })
        .collect();
    dets.push(SceneDetection {
        scene: 1,
        det: det(12.1, 8.0, 2.0, 2.0, CLASS_SMALL, 0.5, 0),
    });
    let m = mean_average_precision(&dets, &gts);
    for (class, ap) in &m.per_class {
        println!(
            "AP {class:<5} {}",
            ap.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    println!("mean {:.4}", m.mean);
}
