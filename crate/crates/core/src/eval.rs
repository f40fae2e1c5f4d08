//! Heatmap decoding, axis-aligned BEV IoU, greedy NMS and per-class average
//! precision ("toy-mAP").

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::Prediction;
use crate::error::{shape_err, Result};
use crate::scene::{BoxLabel, Scene, CLASS_NAMES, NUM_CLASSES};
use crate::tensor::Tensor;

/// IoU needed for a match, per class.
pub const MATCH_IOU: [f64; NUM_CLASSES] = [0.5, 0.25];
/// Log-extent predictions are clamped to this magnitude before `exp`.
const MAX_LOG_EXTENT: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub class_id: usize,
    pub score: f64,
    /// Flat index `(class · side + row) · side + col` of the source peak.
    pub origin: usize,
}

impl Detection {
    pub fn to_label(&self) -> BoxLabel {
        BoxLabel {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            l: self.l,
            class_id: self.class_id,
        }
    }
}

/// Anything with an axis-aligned footprint.
pub trait BevBox {
    /// `(x0, x1, y0, y1)`.
    fn bounds(&self) -> (f64, f64, f64, f64);
}

impl BevBox for Detection {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cx + self.w / 2.0,
            self.cy - self.l / 2.0,
            self.cy + self.l / 2.0,
        )
    }
}

impl BevBox for BoxLabel {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        (x0, x1, y0, y1)
    }
}

pub fn bev_iou(a: &impl BevBox, b: &impl BevBox) -> f64 {
    let (ax0, ax1, ay0, ay1) = a.bounds();
    let (bx0, bx1, by0, by1) = b.bounds();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn by_score(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.origin.cmp(&b.origin))
}

/// Strict 3×3 local maxima of a `[1, C, G, G]` heatmap with score at least
/// `score_thresh`, best `max_dets` first.
pub fn decode(
    p_cls: &Tensor,
    p_reg: &Tensor,
    voxel_out: f64,
    score_thresh: f64,
    max_dets: usize,
) -> Result<Vec<Detection>> {
    let (n, c, h, w) = p_cls.dims4()?;
    if n != 1 || h != w || p_reg.shape() != [1, 4, h, w] {
        return Err(shape_err(format!(
            "decode needs one [1, C, G, G] map and matching regression, got {:?} and {:?}",
            p_cls.shape(),
            p_reg.shape()
        )));
    }
    let side = h;
    let plane = side * side;
    let heat = p_cls.data();
    let reg = p_reg.data();
    let mut dets = Vec::new();
    for class_id in 0..c {
        let ch = &heat[class_id * plane..(class_id + 1) * plane];
        for row in 0..side {
            for col in 0..side {
                let v = ch[row * side + col];
                if v < score_thresh {
                    continue;
                }
                let mut is_max = true;
                'nb: for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (y, x) = (row as isize + dy, col as isize + dx);
                        if y < 0 || x < 0 || y >= side as isize || x >= side as isize {
                            continue;
                        }
                        if ch[y as usize * side + x as usize] >= v {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if !is_max {
                    continue;
                }
                let cell = row * side + col;
                let r = |k: usize| reg[k * plane + cell];
                dets.push(Detection {
                    cx: (col as f64 + 0.5 + r(0)) * voxel_out,
                    cy: (row as f64 + 0.5 + r(1)) * voxel_out,
                    w: r(2).clamp(-MAX_LOG_EXTENT, MAX_LOG_EXTENT).exp(),
                    l: r(3).clamp(-MAX_LOG_EXTENT, MAX_LOG_EXTENT).exp(),
                    class_id,
                    score: v,
                    origin: class_id * plane + cell,
                });
            }
        }
    }
    dets.sort_by(by_score);
    dets.truncate(max_dets);
    Ok(dets)
}

/// Greedy per-class suppression of boxes overlapping a better one by more
/// than `iou_thresh`. Output is sorted by descending score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(by_score);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || bev_iou(k, &d) <= iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

/// Detection tagged with the scene it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneDetection {
    pub scene: usize,
    pub det: Detection,
}

/// Average precision of one class over a pooled corpus, or `None` when the
/// class has no ground truth.
pub fn average_precision(
    dets: &[SceneDetection],
    gts: &[(usize, BoxLabel)],
    class_id: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let gts: Vec<&(usize, BoxLabel)> = gts.iter().filter(|(_, g)| g.class_id == class_id).collect();
    if gts.is_empty() {
        return None;
    }
    let mut dets: Vec<&SceneDetection> =
        dets.iter().filter(|d| d.det.class_id == class_id).collect();
    dets.sort_by(|a, b| by_score(&a.det, &b.det).then(a.scene.cmp(&b.scene)));
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(dets.len());
    for (k, d) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (scene, g)) in gts.iter().enumerate() {
            if *scene != d.scene || matched[gi] {
                continue;
            }
            let iou = bev_iou(&d.det, g);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    Some(interpolated_ap(&curve))
}

/// 101-point interpolated area under `(recall, precision)` points.
pub fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut best_from = vec![0.0f64; curve.len() + 1];
    for i in (0..curve.len()).rev() {
        best_from[i] = best_from[i + 1].max(curve[i].1);
    }
    let mut sum = 0.0;
    let mut i = 0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while i < curve.len() && curve[i].0 < r - 1e-12 {
            i += 1;
        }
        sum += best_from[i];
    }
    sum / 101.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// Class name to AP; `None` when the class has no ground truth.
    pub per_class: BTreeMap<String, Option<f64>>,
    /// Mean over classes with ground truth.
    pub mean: f64,
    pub notes: Vec<String>,
}

pub fn mean_average_precision(dets: &[SceneDetection], gts: &[(usize, BoxLabel)]) -> MapResult {
    let mut per_class = BTreeMap::new();
    let mut notes = Vec::new();
    let mut defined = Vec::new();
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let ap = average_precision(dets, gts, c, MATCH_IOU[c]);
        match ap {
            Some(v) => defined.push(v),
            None => notes.push(format!(
                "class {name} has no ground truth; excluded from mean"
            )),
        }
        per_class.insert(name.to_string(), ap);
    }
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    MapResult {
        per_class,
        mean,
        notes,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub max_dets: usize,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            max_dets: 100,
            nms_iou: 0.3,
        }
    }
}

/// Decodes, suppresses and scores per-scene predictions against their scenes.
pub fn evaluate(
    predictions: &[Prediction],
    scenes: &[Scene],
    voxel_out: f64,
    cfg: &EvalConfig,
) -> Result<MapResult> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, (p, s)) in predictions.iter().zip(scenes).enumerate() {
        let raw = decode(
            &p.p_cls,
            &p.p_reg,
            voxel_out,
            cfg.score_thresh,
            cfg.max_dets,
        )?;
        dets.extend(
            nms(&raw, cfg.nms_iou)
                .into_iter()
                .map(|det| SceneDetection { scene: i, det }),
        );
        gts.extend(s.boxes.iter().map(|b| (i, *b)));
    }
    Ok(mean_average_precision(&dets, &gts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{assign_targets, generate_scene, SceneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(cx: f64, cy: f64, w: f64, l: f64, score: f64, origin: usize) -> Detection {
        Detection {
            cx,
            cy,
            w,
            l,
            class_id: 0,
            score,
            origin,
        }
    }

    #[test]
    fn iou_closed_forms() {
        let a = det(0.5, 0.5, 1.0, 1.0, 1.0, 0);
        assert_eq!(bev_iou(&a, &a), 1.0);
        assert_eq!(bev_iou(&a, &det(5.0, 5.0, 1.0, 1.0, 1.0, 0)), 0.0);
        let b = det(1.0, 0.5, 1.0, 1.0, 1.0, 0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn flat_map_has_no_peaks() {
        let p = Tensor::full(&[1, 2, 6, 6], 0.5);
        let r = Tensor::zeros(&[1, 4, 6, 6]);
        assert!(decode(&p, &r, 1.0, 0.0, 100).unwrap().is_empty());
    }

    #[test]
    fn decode_inverts_assignment() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = generate_scene(seed, &cfg).unwrap();
            let t = assign_targets(&s.boxes, 15, 2.0).unwrap();
            // Same-class centres in touching cells form a plateau, which the
            // strict-maximum rule rejects; such scenes are skipped.
            let touching = t
                .entries
                .iter()
                .zip(&s.boxes)
                .enumerate()
                .any(|(i, (a, ba))| {
                    t.entries.iter().zip(&s.boxes).skip(i + 1).any(|(b, bb)| {
                        ba.class_id == bb.class_id
                            && (a.cell / 15).abs_diff(b.cell / 15) <= 1
                            && (a.cell % 15).abs_diff(b.cell % 15) <= 1
                    })
                });
            if touching {
                continue;
            }
            let dets = decode(&t.heatmap, &t.reg, 2.0, 0.99, 1000).unwrap();
            for d in &dets {
                let b = s
                    .boxes
                    .iter()
                    .find(|b| (b.cx - d.cx).abs() < 1e-9 && (b.cy - d.cy).abs() < 1e-9)
                    .expect("decoded peak matches a box");
                assert!((b.w - d.w).abs() < 1e-9 && (b.l - d.l).abs() < 1e-9);
                assert_eq!(b.class_id, d.class_id);
            }
            assert_eq!(dets.len(), s.boxes.len());
        }
    }

    #[test]
    fn decode_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let side = rng.gen_range(2..9);
            let p = Tensor::uniform(&[1, 2, side, side], 0.0, 1.0, &mut rng);
            let r = Tensor::uniform(&[1, 4, side, side], -0.5, 0.5, &mut rng);
            let thresh = rng.gen_range(0.0..0.9);
            let got = decode(&p, &r, 1.0, thresh, usize::MAX).unwrap();
            let mut want = Vec::new();
            for c in 0..2 {
                for y in 0..side {
                    for x in 0..side {
                        let v = p.at4(0, c, y, x);
                        let neighbours = (0..side).flat_map(|yy| (0..side).map(move |xx| (yy, xx)));
                        let ok = neighbours
                            .filter(|&(yy, xx)| {
                                (yy, xx) != (y, x) && yy.abs_diff(y) <= 1 && xx.abs_diff(x) <= 1
                            })
                            .all(|(yy, xx)| p.at4(0, c, yy, xx) < v);
                        if ok && v >= thresh {
                            want.push((c * side + y) * side + x);
                        }
                    }
                }
            }
            let mut got_o: Vec<usize> = got.iter().map(|d| d.origin).collect();
            got_o.sort();
            assert_eq!(got_o, want);
            assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }

    #[test]
    fn nms_basics() {
        let a = det(0.0, 0.0, 1.0, 1.0, 0.9, 1);
        assert_eq!(nms(&[a], 0.5), vec![a]);
        let b = Detection {
            score: 0.8,
            origin: 2,
            ..a
        };
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
        let other = Detection { class_id: 1, ..b };
        assert_eq!(nms(&[b, a, other], 0.5).len(), 2);
    }

    /// Reference greedy NMS: repeatedly take the best remaining box and drop
    /// everything overlapping it.
    fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut rest: Vec<Detection> = dets.to_vec();
        let mut out = Vec::new();
        while !rest.is_empty() {
            let mut bi = 0;
            for i in 1..rest.len() {
                let (a, b) = (&rest[i], &rest[bi]);
                if a.score > b.score || (a.score == b.score && a.origin < b.origin) {
                    bi = i;
                }
            }
            let best = rest.remove(bi);
            rest.retain(|d| d.class_id != best.class_id || bev_iou(d, &best) <= thr);
            out.push(best);
        }
        out
    }

    #[test]
    fn nms_matches_oracle_and_is_antichain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..=6);
            let dets: Vec<Detection> = (0..n)
                .map(|i| Detection {
                    cx: rng.gen_range(0.0..3.0),
                    cy: rng.gen_range(0.0..3.0),
                    w: rng.gen_range(0.5..2.0),
                    l: rng.gen_range(0.5..2.0),
                    class_id: rng.gen_range(0..2),
                    score: (rng.gen_range(0..5) as f64) / 5.0 + 0.1,
                    origin: i,
                })
                .collect();
            let thr = rng.gen_range(0.1..0.7);
            let kept = nms(&dets, thr);
            assert_eq!(kept, nms_oracle(&dets, thr));
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    assert!(a.class_id != b.class_id || bev_iou(a, b) <= thr);
                }
            }
        }
    }

    fn gt(cx: f64, cy: f64) -> BoxLabel {
        BoxLabel {
            cx,
            cy,
            w: 1.0,
            l: 1.0,
            class_id: 0,
        }
    }

    #[test]
    fn perfect_and_empty_ap() {
        let gts = vec![(0, gt(1.0, 1.0)), (1, gt(3.0, 3.0))];
        let dets: Vec<SceneDetection> = gts
            .iter()
            .enumerate()
            .map(|(i, (s, g))| SceneDetection {
                scene: *s,
                det: det(g.cx, g.cy, 1.0, 1.0, 0.9, i),
            })
            .collect();
        assert_eq!(average_precision(&dets, &gts, 0, 0.5), Some(1.0));
        assert_eq!(average_precision(&[], &gts, 0, 0.5), Some(0.0));
        assert_eq!(average_precision(&dets, &gts, 1, 0.5), None);
        let m = mean_average_precision(&dets, &gts);
        assert_eq!(m.mean, 1.0);
        assert_eq!(m.notes.len(), 1);
    }

    /// AP from the definition: each prefix of the ranked list is re-matched
    /// from scratch and the interpolated precision is a direct maximum.
    fn ap_oracle(dets: &[SceneDetection], gts: &[(usize, BoxLabel)], thr: f64) -> f64 {
        let mut ranked: Vec<&SceneDetection> = dets.iter().collect();
        ranked.sort_by(|a, b| by_score(&a.det, &b.det).then(a.scene.cmp(&b.scene)));
        let mut curve = Vec::new();
        for k in 1..=ranked.len() {
            let prefix = &ranked[..k];
            let mut used = vec![false; gts.len()];
            let mut tp = 0;
            for d in prefix {
                let cands: Vec<(usize, f64)> = gts
                    .iter()
                    .enumerate()
                    .filter(|(gi, (s, _))| *s == d.scene && !used[*gi])
                    .map(|(gi, (_, g))| (gi, bev_iou(&d.det, g)))
                    .filter(|&(_, iou)| iou >= thr)
                    .collect();
                if let Some(&(gi, _)) = cands.iter().reduce(|a, b| if b.1 > a.1 { b } else { a }) {
                    used[gi] = true;
                    tp += 1;
                }
            }
            curve.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
        }
        let mut sum = 0.0;
        for step in 0..=100 {
            let r = step as f64 / 100.0;
            let p = curve
                .iter()
                .filter(|(rc, _)| *rc >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            sum += p;
        }
        sum / 101.0
    }

    #[test]
    fn handcrafted_three_dets_two_gts() {
        let gts = vec![(0, gt(1.0, 1.0)), (0, gt(4.0, 1.0))];
        let dets = vec![
            SceneDetection {
                scene: 0,
                det: det(1.1, 1.0, 1.0, 1.0, 0.9, 0),
            },
            SceneDetection {
                scene: 0,
                det: det(8.0, 8.0, 1.0, 1.0, 0.8, 1),
            },
            SceneDetection {
                scene: 0,
                det: det(4.0, 1.2, 1.0, 1.0, 0.7, 2),
            },
        ];
        let ap = average_precision(&dets, &gts, 0, 0.5).unwrap();
        // Precision 1 up to recall 0.5, then 2/3 at recall 1.
        let want = (51.0 * 1.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((ap - want).abs() < 1e-12);
        assert!((ap - ap_oracle(&dets, &gts, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_prefix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..150 {
            let ng = rng.gen_range(1..5);
            let nd = rng.gen_range(0..7);
            let gts: Vec<(usize, BoxLabel)> = (0..ng)
                .map(|_| {
                    (
                        rng.gen_range(0..2),
                        gt(rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)),
                    )
                })
                .collect();
            let dets: Vec<SceneDetection> = (0..nd)
                .map(|i| SceneDetection {
                    scene: rng.gen_range(0..2),
                    det: det(
                        rng.gen_range(0.0..4.0),
                        rng.gen_range(0.0..4.0),
                        rng.gen_range(0.6..1.5),
                        rng.gen_range(0.6..1.5),
                        rng.gen_range(0.0..1.0),
                        i,
                    ),
                })
                .collect();
            let thr = [0.25, 0.5][rng.gen_range(0..2)];
            let got = average_precision(&dets, &gts, 0, thr).unwrap();
            assert!((got - ap_oracle(&dets, &gts, thr)).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got));
            // A duplicate of the top detection never raises AP.
            if let Some(top) = dets.iter().copied().reduce(|a, b| {
                if by_score(&b.det, &a.det).is_lt() {
                    b
                } else {
                    a
                }
            }) {
                let mut dup = dets.clone();
                dup.push(SceneDetection {
                    det: Detection {
                        origin: 1000,
                        ..top.det
                    },
                    ..top
                });
                assert!(average_precision(&dup, &gts, 0, thr).unwrap() <= got + 1e-12);
            }
        }
    }
}
