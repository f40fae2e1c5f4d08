//! Merging confident teacher detections into the student's training labels.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::eval::{bev_iou, Detection};
use crate::scene::{center_cell, AssignBox, BoxLabel};

/// IoU above which a ground truth counts as covered by a teacher box.
pub const OVERLAP_IOU: f64 = 0.7;

/// How teacher boxes join the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKdMode {
    /// Ground truth only.
    Off,
    /// Teacher boxes shape the heatmap but carry no regression target.
    ClsOnly,
    /// Ground truths overlapping a teacher box drop their regression target.
    NonOverlap,
    /// Teacher boxes whose centre cell is already claimed drop their
    /// regression target.
    NonDuplicate,
    /// Teacher boxes join as full labels.
    Full,
}

fn full(label: BoxLabel) -> AssignBox {
    AssignBox {
        label,
        use_for_cls: true,
        use_for_reg: true,
    }
}

/// Builds flagged labels from ground truths and raw teacher detections.
/// Teacher detections below `tau` are discarded; the rest are visited in
/// ascending `origin` order. `student_side` and `student_voxel` describe
/// the student's output grid.
pub fn label_kd_merge(
    gts: &[BoxLabel],
    teacher: &[Detection],
    mode: LabelKdMode,
    tau: f64,
    student_side: usize,
    student_voxel: f64,
) -> Result<Vec<AssignBox>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(config_err(format!(
            "label threshold must lie in (0, 1), got {tau}"
        )));
    }
    let mut kept: Vec<&Detection> = teacher.iter().filter(|d| d.score >= tau).collect();
    kept.sort_by_key(|d| d.origin);
    let mut out: Vec<AssignBox> = gts.iter().map(|&b| full(b)).collect();
    match mode {
        LabelKdMode::Off => return Ok(out),
        LabelKdMode::ClsOnly => out.extend(kept.iter().map(|d| AssignBox {
            label: d.to_label(),
            use_for_cls: true,
            use_for_reg: false,
        })),
        LabelKdMode::NonOverlap => {
            for a in out.iter_mut() {
                if kept.iter().any(|d| bev_iou(&a.label, *d) > OVERLAP_IOU) {
                    a.use_for_reg = false;
                }
            }
            out.extend(kept.iter().map(|d| full(d.to_label())));
        }
        LabelKdMode::NonDuplicate => {
            let mut occupied: BTreeSet<(usize, usize)> = gts
                .iter()
                .filter_map(|b| center_cell(b, student_side, student_voxel))
                .collect();
            for d in kept {
                let label = d.to_label();
                let fresh = match center_cell(&label, student_side, student_voxel) {
                    Some(cell) => occupied.insert(cell),
                    None => true,
                };
                out.push(AssignBox {
                    label,
                    use_for_cls: true,
                    use_for_reg: fresh,
                });
            }
        }
        LabelKdMode::Full => out.extend(kept.iter().map(|d| full(d.to_label()))),
    }
    Ok(out)
}
