//! Spatial masks on the teacher's output grid selecting where the student
//! imitates the teacher's classification response.

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskKind {
    /// Every position.
    Vanilla,
    /// Positions inside any assigned Gaussian.
    GidL,
    /// Teacher probability at least `tau_pp`.
    PpConfidence { tau_pp: f64 },
    /// The `k` largest teacher probabilities over all classes jointly.
    PpRank { k: usize },
    /// The assigned Gaussian heatmap itself, as soft weights.
    PpGaussian,
}

/// Default rank budget: 500 positions on a 468-cell map, scaled by area.
pub fn default_rank_k(teacher_side: usize) -> usize {
    let ratio = teacher_side as f64 / 468.0;
    ((500.0 * ratio * ratio).round() as usize).max(1)
}

/// Builds a `[1, C, G, G]` mask from one scene's teacher response and
/// assigned heatmap, both on the teacher grid.
pub fn make_mask(
    kind: MaskKind,
    teacher_p_cls: &Tensor,
    target_heatmap: &Tensor,
) -> Result<Tensor> {
    if teacher_p_cls.shape() != target_heatmap.shape() {
        return Err(shape_err(format!(
            "teacher response {:?} and target heatmap {:?} differ",
            teacher_p_cls.shape(),
            target_heatmap.shape()
        )));
    }
    Ok(match kind {
        MaskKind::Vanilla => teacher_p_cls.map(|_| 1.0),
        MaskKind::GidL => target_heatmap.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        MaskKind::PpGaussian => target_heatmap.clone(),
        MaskKind::PpConfidence { tau_pp } => {
            if !(tau_pp > 0.0 && tau_pp < 1.0) {
                return Err(config_err(format!(
                    "tau_pp must lie in (0, 1), got {tau_pp}"
                )));
            }
            teacher_p_cls.map(|v| if v >= tau_pp { 1.0 } else { 0.0 })
        }
        MaskKind::PpRank { k } => {
            if k == 0 {
                return Err(config_err("rank budget K must be positive"));
            }
            let data = teacher_p_cls.data();
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
            let mut mask = Tensor::zeros(teacher_p_cls.shape());
            for &i in order.iter().take(k) {
                mask.data_mut()[i] = 1.0;
            }
            mask
        }
    })
}
