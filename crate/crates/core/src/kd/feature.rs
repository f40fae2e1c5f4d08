//! Feature imitation on the last backbone map: full-map, foreground-masked,
//! box-pooled, and box-pooled with a pairwise relation term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::BN_EPS;
use crate::error::{shape_err, Result};
use crate::scene::BoxLabel;
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, RoiBox, Tensor, Var};

use super::logit::MASK_EPS;

/// Pooled RoI side.
pub const ROI_POOLED: usize = 7;
/// Bilinear taps per bin along each axis.
pub const ROI_SAMPLES: usize = 2;

/// 1×1 convolution, batch norm and ReLU mapping student channels onto the
/// teacher's channel count. Parameters are named `adapter.*`.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub store: ParamStore,
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl Adapter {
    pub fn new(cin: usize, cout: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / cin as f64).sqrt();
        let mut store = ParamStore::new();
        let weight = store.add(
            "adapter.weight",
            Tensor::uniform(&[cout, cin, 1, 1], -bound, bound, &mut rng),
            ParamKind::Trainable,
        )?;
        let gamma = store.add(
            "adapter.bn.gamma",
            Tensor::full(&[cout], 1.0),
            ParamKind::Trainable,
        )?;
        let beta = store.add(
            "adapter.bn.beta",
            Tensor::zeros(&[cout]),
            ParamKind::Trainable,
        )?;
        let running_mean = store.add(
            "adapter.bn.running_mean",
            Tensor::zeros(&[cout]),
            ParamKind::Buffer,
        )?;
        let running_var = store.add(
            "adapter.bn.running_var",
            Tensor::full(&[cout], 1.0),
            ParamKind::Buffer,
        )?;
        Ok(Self {
            store,
            weight,
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    pub fn forward_train(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.store, self.weight);
        let y = g.conv2d(x, w, None, 1, 0)?;
        let gamma = g.param(&self.store, self.gamma);
        let beta = g.param(&self.store, self.beta);
        let (y, stats) = g.batch_norm_train(y, gamma, beta, BN_EPS)?;
        let keep = crate::detector::BN_MOMENTUM;
        for (id, batch) in [
            (self.running_mean, &stats.mean),
            (self.running_var, &stats.var),
        ] {
            for (r, b) in self.store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = keep * *r + (1.0 - keep) * b;
            }
        }
        Ok(g.relu(y))
    }
}

fn check_same(g: &Graph, s: Var, t: &Tensor) -> Result<()> {
    if g.value(s).shape() != t.shape() {
        return Err(shape_err(format!(
            "student feature {:?} against teacher feature {:?}",
            g.value(s).shape(),
            t.shape()
        )));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn fitnet_loss(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    check_same(g, student, teacher)?;
    let t = g.constant(teacher.clone());
    let d = g.sub(student, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Squared error restricted to a `[N, 1, G, G]` foreground mask broadcast
/// over channels, normalized by the broadcast mask sum.
pub fn foreground_loss(g: &mut Graph, student: Var, teacher: &Tensor, fg: &Tensor) -> Result<Var> {
    check_same(g, student, teacher)?;
    let (n, c, h, w) = teacher.dims4()?;
    if fg.shape() != [n, 1, h, w] {
        return Err(shape_err(format!(
            "foreground mask {:?} for features {:?}",
            fg.shape(),
            teacher.shape()
        )));
    }
    let m = fg.broadcast_channels(c)?;
    let denom = m.sum() + MASK_EPS;
    let m = g.constant(m);
    let t = g.constant(teacher.clone());
    let d = g.sub(student, t)?;
    let sq = g.square(d);
    let weighted = g.mul(sq, m)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, 1.0 / denom))
}

/// Box footprints in cell units of a map with cell edge `voxel`.
pub fn rois_for(boxes: &[Vec<BoxLabel>], voxel: f64) -> Vec<RoiBox> {
    boxes
        .iter()
        .enumerate()
        .flat_map(|(batch, bs)| {
            bs.iter().map(move |b| {
                let (x0, x1) = b.x_range();
                let (y0, y1) = b.y_range();
                RoiBox {
                    batch,
                    x1: x0 / voxel,
                    y1: y0 / voxel,
                    x2: x1 / voxel,
                    y2: y1 / voxel,
                }
            })
        })
        .collect()
}

/// Pooled features of both networks, each sampled in its own cell units.
#[derive(Clone, Copy, Debug)]
pub struct PooledPair {
    pub student: Var,
    pub teacher: Var,
}

/// RoI-pools `boxes` (one list per batch element) from both maps.
/// Returns `None` when there are no boxes at all.
pub fn pool_boxes(
    g: &mut Graph,
    student: Var,
    student_voxel: f64,
    teacher: &Tensor,
    teacher_voxel: f64,
    boxes: &[Vec<BoxLabel>],
) -> Result<Option<PooledPair>> {
    let s_rois = rois_for(boxes, student_voxel);
    if s_rois.is_empty() {
        return Ok(None);
    }
    let t_rois = rois_for(boxes, teacher_voxel);
    let sc = g.value(student).dims4()?.1;
    if sc != teacher.dims4()?.1 {
        return Err(shape_err(format!(
            "student has {sc} feature channels, teacher {}",
            teacher.shape()[1]
        )));
    }
    let sp = g.roi_align(student, &s_rois, ROI_POOLED, ROI_SAMPLES)?;
    let tv = g.constant(teacher.clone());
    let tp = g.roi_align(tv, &t_rois, ROI_POOLED, ROI_SAMPLES)?;
    Ok(Some(PooledPair {
        student: sp,
        teacher: tp,
    }))
}

/// Mean squared error between pooled features.
pub fn pooled_mse(g: &mut Graph, pair: PooledPair) -> Result<Var> {
    let d = g.sub(pair.student, pair.teacher)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Mean absolute difference of the pairwise distance matrices of the
/// flattened pooled features.
pub fn relation_loss(g: &mut Graph, pair: PooledPair) -> Result<Var> {
    let ds = g.pairwise_distance(pair.student)?;
    let dt = g.pairwise_distance(pair.teacher)?;
    let d = g.sub(ds, dt)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lbl(cx: f64, cy: f64, w: f64, l: f64) -> BoxLabel {
        BoxLabel {
            cx,
            cy,
            w,
            l,
            class_id: 0,
        }
    }

    #[test]
    fn fitnet_is_plain_mse() {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let l = fitnet_loss(&mut g, s, &Tensor::zeros(&[1, 1, 1, 2])).unwrap();
        assert_eq!(g.value(l).item(), 5.0);
        assert!(fitnet_loss(&mut g, s, &Tensor::zeros(&[1, 2, 1, 2])).is_err());
    }

    #[test]
    fn foreground_normalizes_by_broadcast_mask() {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::full(&[1, 3, 2, 2], 1.0));
        let fg = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let l = foreground_loss(&mut g, s, &Tensor::zeros(&[1, 3, 2, 2]), &fg).unwrap();
        assert!((g.value(l).item() - 3.0 / (3.0 + MASK_EPS)).abs() < 1e-15);
        let empty = Tensor::zeros(&[1, 1, 2, 2]);
        let l = foreground_loss(&mut g, s, &Tensor::zeros(&[1, 3, 2, 2]), &empty).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn rois_use_each_map_cell_units() {
        let r = rois_for(&[vec![], vec![lbl(4.0, 6.0, 2.0, 4.0)]], 2.0);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].batch, 1);
        assert_eq!((r[0].x1, r[0].y1, r[0].x2, r[0].y2), (1.5, 2.0, 2.5, 4.0));
    }

    #[test]
    fn no_boxes_yield_nothing() {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let got = pool_boxes(
            &mut g,
            s,
            1.0,
            &Tensor::zeros(&[1, 2, 4, 4]),
            1.0,
            &[vec![]],
        )
        .unwrap();
        assert!(got.is_none());
    }

    #[test]
    fn identical_maps_give_zero_loss_and_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let s = g.leaf(f.clone());
        let boxes = vec![vec![lbl(2.0, 2.0, 2.0, 2.0), lbl(5.0, 5.0, 3.0, 2.0)]];
        let pair = pool_boxes(&mut g, s, 1.0, &f, 1.0, &boxes)
            .unwrap()
            .unwrap();
        let mse = pooled_mse(&mut g, pair).unwrap();
        let rel = relation_loss(&mut g, pair).unwrap();
        assert_eq!(g.value(mse).item(), 0.0);
        assert!(g.value(rel).item() < 1e-12);
    }

    #[test]
    fn constant_fields_pool_to_constants() {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::full(&[1, 2, 10, 10], 1.5));
        let boxes = vec![vec![lbl(5.0, 5.0, 4.0, 3.0), lbl(3.0, 6.0, 2.0, 2.0)]];
        let t = Tensor::full(&[1, 2, 5, 5], -0.5);
        let pair = pool_boxes(&mut g, s, 1.0, &t, 2.0, &boxes)
            .unwrap()
            .unwrap();
        assert!(g
            .value(pair.teacher)
            .data()
            .iter()
            .all(|v| (v + 0.5).abs() < 1e-12));
        let mse = pooled_mse(&mut g, pair).unwrap();
        assert!((g.value(mse).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn adapter_maps_channels_and_names_params() {
        let mut a = Adapter::new(3, 5, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 4], 0.25));
        let y = a.forward_train(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5, 4, 4]);
        assert!(a.store.iter().all(|(_, e)| e.name.starts_with("adapter.")));
    }

    proptest! {
        #[test]
        fn relation_is_translation_invariant(shift in -3.0f64..3.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::uniform(&[3, 2, 7, 7], -1.0, 1.0, &mut rng);
            let mut g = Graph::new();
            let s = g.leaf(f.map(|v| v + shift));
            let t = g.constant(f);
            let l = relation_loss(&mut g, PooledPair { student: s, teacher: t }).unwrap();
            prop_assert!(g.value(l).item() < 1e-9);
        }
    }
}
