//! Brute-force reference implementations, each run over random small
//! instances against the library.

use bevkd::eval::{average_precision, nms, Detection, SceneDetection};
use bevkd::kd::label::label_kd_merge;
use bevkd::kd::mask::make_mask;
use bevkd::kd::{LabelKdMode, MaskKind};
use bevkd::scene::BoxLabel;
use bevkd::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 150;

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    /// Largest absolute deviation; mismatched discrete outputs count as 1.
    pub max_err: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.instances >= 100 && self.max_err <= self.tolerance
    }
}

/// Direct six-fold loop over output pixels, channels and taps.
pub fn conv_reference(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (cout, k) = (ws[0], ws[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc +=
                                    x.at4(bi, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    out.set4(bi, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

pub fn conv_oracle() -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut max_err = 0.0f64;
    for _ in 0..INSTANCES {
        let (n, cin, cout) = (
            rng.gen_range(1..3),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..=k / 2);
        let side = rng.gen_range(k..9);
        let x = Tensor::uniform(&[n, cin, side, side], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[cout, cin, k, k], -1.0, 1.0, &mut rng);
        let b = rng
            .gen_bool(0.5)
            .then(|| Tensor::uniform(&[cout], -1.0, 1.0, &mut rng));
        let mut g = Graph::no_grad();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let bv = b.clone().map(|b| g.constant(b));
        let y = g.conv2d(xv, wv, bv, stride, pad).expect("valid conv");
        let want = conv_reference(&x, &w, b.as_ref(), stride, pad);
        assert_eq!(g.value(y).shape(), want.shape());
        max_err = max_err.max(g.value(y).max_abs_diff(&want));
    }
    OracleReport {
        name: "conv2d vs nested loops",
        instances: INSTANCES,
        max_err,
        tolerance: 1e-12,
    }
}

fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    // (cx, cy, w, l)
    let lo = |c: f64, s: f64| c - s / 2.0;
    let hi = |c: f64, s: f64| c + s / 2.0;
    let ix = (hi(a.0, a.2).min(hi(b.0, b.2)) - lo(a.0, a.2).max(lo(b.0, b.2))).max(0.0);
    let iy = (hi(a.1, a.3).min(hi(b.1, b.3)) - lo(a.1, a.3).max(lo(b.1, b.3))).max(0.0);
    let inter = ix * iy;
    inter / (a.2 * a.3 + b.2 * b.3 - inter)
}

fn dims(d: &Detection) -> (f64, f64, f64, f64) {
    (d.cx, d.cy, d.w, d.l)
}

fn ranks_before(a: &Detection, b: &Detection) -> bool {
    a.score > b.score || (a.score == b.score && a.origin < b.origin)
}

/// The kept set is characterized without a sweep: a box survives iff no
/// surviving box of its class ranked above it overlaps it by more than
/// the threshold. Resolved by recursion over rank.
fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
    fn survives(i: usize, dets: &[Detection], thr: f64, memo: &mut Vec<Option<bool>>) -> bool {
        if let Some(v) = memo[i] {
            return v;
        }
        let d = dets[i];
        let v = !(0..dets.len()).any(|j| {
            j != i
                && dets[j].class_id == d.class_id
                && ranks_before(&dets[j], &d)
                && iou(dims(&dets[j]), dims(&d)) > thr
                && survives(j, dets, thr, memo)
        });
        memo[i] = Some(v);
        v
    }
    let mut memo = vec![None; dets.len()];
    let mut kept: Vec<Detection> = (0..dets.len())
        .filter(|&i| survives(i, dets, thr, &mut memo))
        .map(|i| dets[i])
        .collect();
    kept.sort_by(|a, b| {
        if ranks_before(a, b) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    kept
}

fn random_det(rng: &mut ChaCha8Rng, origin: usize) -> Detection {
    Detection {
        cx: rng.gen_range(0.0..4.0),
        cy: rng.gen_range(0.0..4.0),
        w: rng.gen_range(0.5..2.0),
        l: rng.gen_range(0.5..2.0),
        class_id: rng.gen_range(0..2),
        // Coarse scores make ties common.
        score: rng.gen_range(1..6) as f64 / 6.0,
        origin,
    }
}

pub fn nms_oracle() -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut mismatches = 0.0f64;
    for _ in 0..INSTANCES {
        let dets: Vec<Detection> = (0..rng.gen_range(1..9))
            .map(|i| random_det(&mut rng, i))
            .collect();
        let thr = rng.gen_range(0.05..0.8);
        if nms(&dets, thr) != nms_reference(&dets, thr) {
            mismatches = 1.0;
        }
    }
    OracleReport {
        name: "nms vs recursive survival",
        instances: INSTANCES,
        max_err: mismatches,
        tolerance: 0.0,
    }
}

/// AP straight from the definition: for every cutoff of the ranked list
/// the matching is redone from scratch, then each of the 101 recall levels
/// takes the best precision reached at or beyond it.
fn ap_reference(
    dets: &[SceneDetection],
    gts: &[(usize, BoxLabel)],
    class_id: usize,
    thr: f64,
) -> Option<f64> {
    let gts: Vec<&(usize, BoxLabel)> = gts.iter().filter(|(_, g)| g.class_id == class_id).collect();
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<&SceneDetection> =
        dets.iter().filter(|d| d.det.class_id == class_id).collect();
    ranked.sort_by(|a, b| {
        b.det
            .score
            .total_cmp(&a.det.score)
            .then(a.det.origin.cmp(&b.det.origin))
            .then(a.scene.cmp(&b.scene))
    });
    let mut points = Vec::new();
    for cut in 1..=ranked.len() {
        let mut taken = vec![false; gts.len()];
        let mut tp = 0usize;
        for d in &ranked[..cut] {
            let mut best: Option<(usize, f64)> = None;
            for (gi, (s, g)) in gts.iter().enumerate() {
                if *s != d.scene || taken[gi] {
                    continue;
                }
                let v = iou(dims(&d.det), (g.cx, g.cy, g.w, g.l));
                if v >= thr && best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / cut as f64));
    }
    let total: f64 = (0..=100)
        .map(|step| {
            let r = step as f64 / 100.0;
            points
                .iter()
                .filter(|p| p.0 >= r - 1e-12)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / 101.0)
}

pub fn ap_oracle() -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut max_err = 0.0f64;
    for _ in 0..INSTANCES {
        let gts: Vec<(usize, BoxLabel)> = (0..rng.gen_range(1..6))
            .map(|_| {
                let d = random_det(&mut rng, 0);
                (
                    rng.gen_range(0..2),
                    BoxLabel {
                        cx: d.cx,
                        cy: d.cy,
                        w: d.w,
                        l: d.l,
                        class_id: d.class_id,
                    },
                )
            })
            .collect();
        let dets: Vec<SceneDetection> = (0..rng.gen_range(0..9))
            .map(|i| SceneDetection {
                scene: rng.gen_range(0..2),
                det: random_det(&mut rng, i),
            })
            .collect();
        let thr = [0.25, 0.5, 0.7][rng.gen_range(0..3)];
        for c in 0..2 {
            let got = average_precision(&dets, &gts, c, thr);
            let want = ap_reference(&dets, &gts, c, thr);
            max_err = max_err.max(match (got, want) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => 1.0,
            });
        }
    }
    OracleReport {
        name: "average precision vs per-cutoff rematching",
        instances: INSTANCES,
        max_err,
        tolerance: 1e-12,
    }
}

pub fn rank_mask_oracle() -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut mismatches = 0.0f64;
    for _ in 0..INSTANCES {
        let c = rng.gen_range(1..3);
        let s = rng.gen_range(1..6);
        let data: Vec<f64> = (0..c * s * s)
            .map(|_| rng.gen_range(0..5) as f64 / 5.0)
            .collect();
        let k = rng.gen_range(1..=c * s * s + 2);
        let p = Tensor::new(vec![1, c, s, s], data.clone()).unwrap();
        let got = make_mask(MaskKind::PpRank { k }, &p, &p).unwrap();
        // Selection by repeated arg-max, lowest flat index first among ties.
        let mut want = vec![0.0; data.len()];
        for _ in 0..k.min(data.len()) {
            let mut best: Option<usize> = None;
            for i in 0..data.len() {
                if want[i] == 0.0 && best.map_or(true, |b| data[i] > data[b]) {
                    best = Some(i);
                }
            }
            want[best.unwrap()] = 1.0;
        }
        if got.data() != want.as_slice() {
            mismatches = 1.0;
        }
    }
    OracleReport {
        name: "pp_rank mask vs repeated arg-max",
        instances: INSTANCES,
        max_err: mismatches,
        tolerance: 0.0,
    }
}

pub fn label_dedup_oracle() -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let (side, voxel, tau) = (6usize, 2.0, 0.6);
    let cell = |x: f64, y: f64| -> Option<(i64, i64)> {
        let (cx, cy) = ((x / voxel).floor() as i64, (y / voxel).floor() as i64);
        (cx >= 0 && cy >= 0 && cx < side as i64 && cy < side as i64).then_some((cx, cy))
    };
    let mut mismatches = 0.0f64;
    for _ in 0..INSTANCES {
        let gts: Vec<BoxLabel> = (0..rng.gen_range(0..4))
            .map(|_| BoxLabel {
                cx: rng.gen_range(0.0..12.0),
                cy: rng.gen_range(0.0..12.0),
                w: 1.0,
                l: 1.0,
                class_id: 0,
            })
            .collect();
        let mut pool: Vec<usize> = (0..40).collect();
        let teacher: Vec<Detection> = (0..rng.gen_range(0..9))
            .map(|_| Detection {
                cx: rng.gen_range(-1.0..13.0),
                cy: rng.gen_range(-1.0..13.0),
                w: 1.0,
                l: 1.0,
                class_id: 0,
                score: rng.gen_range(0.0..1.0),
                origin: pool.swap_remove(rng.gen_range(0..pool.len())),
            })
            .collect();
        let got =
            label_kd_merge(&gts, &teacher, LabelKdMode::NonDuplicate, tau, side, voxel).unwrap();
        // Claims in origin order: a teacher box keeps its regression target
        // iff its cell is free of ground truth and of every confident teacher
        // box with a smaller origin that kept its own.
        let mut confident: Vec<&Detection> = teacher.iter().filter(|d| d.score >= tau).collect();
        confident.sort_by_key(|d| d.origin);
        let mut claimed: Vec<(i64, i64)> = gts.iter().filter_map(|g| cell(g.cx, g.cy)).collect();
        let mut want = Vec::new();
        for d in &confident {
            let reg = match cell(d.cx, d.cy) {
                None => true,
                Some(c) if claimed.contains(&c) => false,
                Some(c) => {
                    claimed.push(c);
                    true
                }
            };
            want.push(reg);
        }
        let flags: Vec<bool> = got[gts.len()..].iter().map(|a| a.use_for_reg).collect();
        let boxes_ok = got[gts.len()..]
            .iter()
            .zip(&confident)
            .all(|(a, d)| a.label.cx == d.cx && a.use_for_cls);
        if flags != want || !boxes_ok || got.len() != gts.len() + confident.len() {
            mismatches = 1.0;
        }
    }
    OracleReport {
        name: "label KD non-duplicate vs cell claims",
        instances: INSTANCES,
        max_err: mismatches,
        tolerance: 0.0,
    }
}

pub fn all_oracles() -> Vec<OracleReport> {
    vec![
        conv_oracle(),
        nms_oracle(),
        ap_oracle(),
        rank_mask_oracle(),
        label_dedup_oracle(),
    ]
}
