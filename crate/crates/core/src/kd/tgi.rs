//! Teacher-guided initialization: slicing a trained teacher's weights into a
//! narrower student with the same layer structure.
//!
//! Channels are chosen per channel group, so layers joined by a residual or
//! sum keep a consistent indexing. A layer's input selection is the output
//! selection of the group feeding it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, LayerSpec};
use crate::error::{config_err, Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemapKind {
    /// The first channels.
    Fna,
    /// Channels with the largest summed L1 weight norm.
    Ofa,
    /// Channels with the largest summed batch-norm scale magnitude.
    Slim,
}

/// Output channels picked per group, in student channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct RemapReport {
    pub kind: RemapKind,
    pub groups: BTreeMap<String, Vec<usize>>,
    pub layers_copied: usize,
}

fn topology_issues(teacher: &Detector, student: &Detector) -> Vec<String> {
    let (tl, sl) = (teacher.layers(), student.layers());
    let mut issues = Vec::new();
    let names = |ls: &[LayerSpec]| ls.iter().map(|l| l.name.clone()).collect::<Vec<_>>();
    let (tn, sn) = (names(tl), names(sl));
    for n in &sn {
        if !tn.contains(n) {
            issues.push(format!("{n}: absent in teacher"));
        }
    }
    for n in &tn {
        if !sn.contains(n) {
            issues.push(format!("{n}: absent in student"));
        }
    }
    for s in sl {
        if let Some(t) = teacher.layer(&s.name) {
            if (s.kernel, s.stride) != (t.kernel, t.stride) {
                issues.push(format!(
                    "{}: kernel/stride {}x{} vs teacher {}x{}",
                    s.name, s.kernel, s.stride, t.kernel, t.stride
                ));
            }
            if s.in_group != t.in_group
                || s.out_group != t.out_group
                || s.bn.is_some() != t.bn.is_some()
            {
                issues.push(format!("{}: wiring differs from teacher", s.name));
            }
        }
    }
    issues
}

/// Per-channel importance of a group: summed over every layer writing it.
fn importance(teacher: &Detector, group: &str, kind: RemapKind) -> Result<Vec<f64>> {
    let writers: Vec<&LayerSpec> = teacher
        .layers()
        .iter()
        .filter(|l| l.out_group == group)
        .collect();
    let r = writers[0].cout;
    let mut score = vec![0.0; r];
    for l in writers {
        match kind {
            RemapKind::Fna => {}
            RemapKind::Ofa => {
                let w = teacher.store.value(l.weight).data();
                let per = w.len() / r;
                for (o, s) in score.iter_mut().enumerate() {
                    *s += w[o * per..(o + 1) * per]
                        .iter()
                        .map(|v| v.abs())
                        .sum::<f64>();
                }
            }
            RemapKind::Slim => {
                let Some(bn) = &l.bn else {
                    return Err(config_err(format!(
                        "slim remap of {group} needs batch-norm scales on {}",
                        l.name
                    )));
                };
                for (s, gma) in score.iter_mut().zip(teacher.store.value(bn.gamma).data()) {
                    *s += gma.abs();
                }
            }
        }
    }
    Ok(score)
}

/// Indices of the `v` largest scores, best first, ties to the lower index.
pub fn top_channels(score: &[f64], v: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    order.truncate(v);
    order
}

fn select(values: &Tensor, rows: &[usize], cols: Option<&[usize]>) -> Result<Tensor> {
    let shape = values.shape();
    let r = shape[0];
    let per_row = values.numel() / r;
    let (cin, inner) = if shape.len() > 1 {
        (shape[1], per_row / shape[1])
    } else {
        (1, 1)
    };
    let all_cols: Vec<usize> = (0..cin).collect();
    let cols = cols.unwrap_or(&all_cols);
    let src = values.data();
    let mut out = Vec::with_capacity(rows.len() * cols.len() * inner);
    for &o in rows {
        for &i in cols {
            let start = o * per_row + i * inner;
            out.extend_from_slice(&src[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = rows.len();
    if shape.len() > 1 {
        new_shape[1] = cols.len();
    }
    Tensor::new(new_shape, out)
}

/// Initializes `student` from `teacher`. Fails with [`Error::Topology`]
/// when the layer structure differs beyond channel counts, and with a
/// configuration error when the student is wider than the teacher.
pub fn tgi_remap(
    teacher: &Detector,
    student: &mut Detector,
    kind: RemapKind,
) -> Result<RemapReport> {
    let issues = topology_issues(teacher, student);
    if !issues.is_empty() {
        return Err(Error::Topology(issues));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for s in student.layers() {
        if groups.contains_key(&s.out_group) {
            continue;
        }
        let t = teacher.layer(&s.name).expect("checked above");
        let (v, r) = (s.cout, t.cout);
        if v > r {
            return Err(config_err(format!(
                "{}: student has {v} channels, teacher only {r}",
                s.out_group
            )));
        }
        let sel = if v == r || kind == RemapKind::Fna {
            (0..v).collect()
        } else {
            top_channels(&importance(teacher, &s.out_group, kind)?, v)
        };
        groups.insert(s.out_group.clone(), sel);
    }
    let mut copies: Vec<(String, Tensor)> = Vec::new();
    for s in student.layers() {
        let t = teacher.layer(&s.name).expect("checked above");
        let rows = &groups[&s.out_group];
        let cols = match &s.in_group {
            Some(gname) => Some(groups[gname].as_slice()),
            None => None,
        };
        if s.cin != cols.map_or(t.cin, <[usize]>::len) {
            return Err(config_err(format!(
                "{}: student input {} does not fit teacher input {}",
                s.name, s.cin, t.cin
            )));
        }
        let ts = &teacher.store;
        let name = |id| ts.entry(id).name.clone();
        copies.push((name(t.weight), select(ts.value(t.weight), rows, cols)?));
        if let Some(b) = t.bias {
            copies.push((name(b), select(ts.value(b), rows, None)?));
        }
        if let Some(bn) = &t.bn {
            for id in [bn.gamma, bn.beta, bn.running_mean, bn.running_var] {
                copies.push((name(id), select(ts.value(id), rows, None)?));
            }
        }
    }
    apply(&mut student.store, copies)?;
    Ok(RemapReport {
        kind,
        groups,
        layers_copied: student.layers().len(),
    })
}

fn apply(store: &mut ParamStore, copies: Vec<(String, Tensor)>) -> Result<()> {
    for (name, value) in copies {
        store.set(&name, value)?;
    }
    Ok(())
}
