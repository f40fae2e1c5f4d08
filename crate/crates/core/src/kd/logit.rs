//! Response imitation: masked squared error on classification probabilities
//! and masked L1 on regression maps.

use crate::error::{config_err, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Normalizer offset of masked means.
pub const MASK_EPS: f64 = 1e-6;

/// Where the regression imitation applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegSupport {
    Everywhere,
    /// Cells where any class channel of the mask is positive.
    Masked,
}

#[derive(Clone, Copy, Debug)]
pub struct LogitKdLoss {
    pub cls: Var,
    /// `None` when regression imitation is disabled.
    pub reg: Option<Var>,
}

/// `student_p_cls` is resized to the teacher grid when the sides differ.
/// Regression imitation runs only when `with_reg` is set, which requires
/// equal sides.
#[allow(clippy::too_many_arguments)]
pub fn logit_kd_loss(
    g: &mut Graph,
    student_p_cls: Var,
    student_p_reg: Var,
    teacher_p_cls: &Tensor,
    teacher_p_reg: &Tensor,
    mask: &Tensor,
    support: RegSupport,
    with_reg: bool,
) -> Result<LogitKdLoss> {
    let (n, c, th, tw) = teacher_p_cls.dims4()?;
    if mask.shape() != teacher_p_cls.shape() {
        return Err(config_err(format!(
            "mask {:?} does not match teacher response {:?}",
            mask.shape(),
            teacher_p_cls.shape()
        )));
    }
    let (sn, sc, sh, sw) = g.value(student_p_cls).dims4()?;
    if (sn, sc) != (n, c) {
        return Err(config_err(format!(
            "student response [{sn}, {sc}, ..] against teacher [{n}, {c}, ..]"
        )));
    }
    let same_side = (sh, sw) == (th, tw);
    let ps = if same_side {
        student_p_cls
    } else {
        g.resize_bilinear(student_p_cls, th, tw)?
    };
    let pt = g.constant(teacher_p_cls.clone());
    let m = g.constant(mask.clone());
    let d = g.sub(ps, pt)?;
    let sq = g.square(d);
    let weighted = g.mul(sq, m)?;
    let s = g.sum(weighted);
    let cls = g.scale(s, 1.0 / (mask.sum() + MASK_EPS));
    if !with_reg {
        return Ok(LogitKdLoss { cls, reg: None });
    }
    if !same_side {
        return Err(config_err(
            "regression imitation needs equal student and teacher output sides",
        ));
    }
    let plane = th * tw;
    let md = mask.data();
    let mut cells = vec![0.0; n * plane];
    for b in 0..n {
        for i in 0..plane {
            let on = match support {
                RegSupport::Everywhere => true,
                RegSupport::Masked => (0..c).any(|ch| md[(b * c + ch) * plane + i] > 0.0),
            };
            if on {
                cells[b * plane + i] = 1.0;
            }
        }
    }
    let count: f64 = cells.iter().sum();
    let cells = Tensor::new(vec![n, 1, th, tw], cells)?;
    let reg_channels = teacher_p_reg.shape()[1];
    let m4 = g.constant(cells.broadcast_channels(reg_channels)?);
    let rt = g.constant(teacher_p_reg.clone());
    let d = g.sub(student_p_reg, rt)?;
    let a = g.abs(d);
    let weighted = g.mul(a, m4)?;
    let s = g.sum(weighted);
    let reg = g.scale(s, 1.0 / (count + MASK_EPS));
    Ok(LogitKdLoss {
        cls,
        reg: Some(reg),
    })
}
