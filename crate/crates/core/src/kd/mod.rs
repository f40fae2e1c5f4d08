//! Distillation from a frozen teacher into a compressed student: response
//! imitation under several position masks, feature imitation, teacher
//! labels merged into the ground truth, and teacher-guided initialization.
//!
//! Teacher outputs never enter a student graph as anything but constants.
//! [`prepare_scene`] precomputes everything a scene contributes (teacher
//! maps, masks, merged targets) once; [`Distiller::loss`] assembles the
//! objective for a batch of prepared scenes.

pub mod feature;
pub mod label;
pub mod logit;
pub mod mask;
pub mod norms;
pub mod tgi;

use serde::{Deserialize, Serialize};

use crate::detector::{detection_loss, Detector, DetectorConfig, DetectorVars, Prediction};
use crate::error::{config_err, Error, Result};
use crate::eval::{decode, nms};
use crate::scene::{assign_targets, assign_targets_flagged, BoxLabel, Scene, TargetMaps};
use crate::tensor::{Graph, Tensor, Var};

pub use feature::Adapter;
pub use label::LabelKdMode;
pub use mask::MaskKind;
pub use tgi::{tgi_remap, RemapKind, RemapReport};

/// Response imitation variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitKind {
    #[default]
    None,
    Vanilla,
    GidL,
    PpConfidence,
    PpRank,
    PpGaussian,
}

/// Feature imitation variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    #[default]
    None,
    Fitnet,
    Mimic,
    Fg,
    GidF,
}

/// Loss weights. `alpha_feat = None` picks 100 for students with a
/// different input grid and 200 otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdWeights {
    pub lambda: f64,
    pub alpha_cls: f64,
    pub alpha_reg: f64,
    pub alpha_feat: Option<f64>,
    pub relation: f64,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            alpha_cls: 15.0,
            alpha_reg: 0.2,
            alpha_feat: None,
            relation: 0.1,
        }
    }
}

/// Which distillation techniques are active, with their parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdRecipe {
    pub logit: LogitKind,
    pub tau_pp: f64,
    /// Rank budget; `None` scales 500 positions on a 468-cell map by area.
    pub rank_k: Option<usize>,
    pub feature: FeatureKind,
    /// Minimum teacher score of boxes pooled for relation-guided imitation.
    pub feature_box_score: f64,
    pub label: LabelKdMode,
    pub label_tau: f64,
    pub tgi: Option<RemapKind>,
    pub weights: KdWeights,
}

impl Default for KdRecipe {
    fn default() -> Self {
        Self {
            logit: LogitKind::None,
            tau_pp: 0.3,
            rank_k: None,
            feature: FeatureKind::None,
            feature_box_score: 0.3,
            label: LabelKdMode::Off,
            label_tau: 0.6,
            tgi: None,
            weights: KdWeights::default(),
        }
    }
}

impl KdRecipe {
    /// True when any technique needs teacher outputs or weights.
    pub fn needs_teacher(&self) -> bool {
        self.logit != LogitKind::None
            || self.feature != FeatureKind::None
            || self.label != LabelKdMode::Off
            || self.tgi.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.tau_pp) || !unit(self.label_tau) || !unit(self.feature_box_score) {
            return Err(config_err(
                "tau_pp, label_tau and feature_box_score must lie in (0, 1)",
            ));
        }
        if self.rank_k == Some(0) {
            return Err(config_err("rank_k must be positive"));
        }
        let w = &self.weights;
        let all = [
            w.lambda,
            w.alpha_cls,
            w.alpha_reg,
            w.alpha_feat.unwrap_or(0.0),
            w.relation,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(config_err("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Mask for the active response imitation on a teacher grid of `side`.
    pub fn mask_kind(&self, teacher_side: usize) -> Option<MaskKind> {
        Some(match self.logit {
            LogitKind::None => return None,
            LogitKind::Vanilla => MaskKind::Vanilla,
            LogitKind::GidL => MaskKind::GidL,
            LogitKind::PpConfidence => MaskKind::PpConfidence {
                tau_pp: self.tau_pp,
            },
            LogitKind::PpRank => MaskKind::PpRank {
                k: self
                    .rank_k
                    .unwrap_or_else(|| mask::default_rank_k(teacher_side)),
            },
            LogitKind::PpGaussian => MaskKind::PpGaussian,
        })
    }
}

/// Weights after adapting to a concrete teacher and student.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedWeights {
    pub lambda: f64,
    pub alpha_cls: f64,
    pub alpha_reg: f64,
    pub alpha_feat: f64,
    pub relation: f64,
}

pub fn resolve_weights(
    w: &KdWeights,
    teacher: &DetectorConfig,
    student: &DetectorConfig,
) -> Result<ResolvedWeights> {
    let input_compressed = teacher.input_side()? != student.input_side()?;
    let sides_differ = teacher.output_side()? != student.output_side()?;
    Ok(ResolvedWeights {
        lambda: w.lambda,
        alpha_cls: w.alpha_cls,
        alpha_reg: if sides_differ { 0.0 } else { w.alpha_reg },
        alpha_feat: w
            .alpha_feat
            .unwrap_or(if input_compressed { 100.0 } else { 200.0 }),
        relation: w.relation,
    })
}

/// Graph handles of the objective's parts; inactive parts are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub det_cls: Var,
    pub det_reg: Var,
    pub kd_cls: Option<Var>,
    pub kd_reg: Option<Var>,
    pub feat: Option<Var>,
}

/// Unweighted values of the parts, 0 when inactive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub det_cls: f64,
    pub det_reg: f64,
    pub kd_cls: f64,
    pub kd_reg: f64,
    pub feat: f64,
}

/// `det_cls + λ det_reg + α₁ kd_cls + α₂ kd_reg + α₃ feat`. Fails naming
/// the first non-finite part.
pub fn total_loss(
    g: &mut Graph,
    terms: &LossTerms,
    w: &ResolvedWeights,
) -> Result<(Var, LossBreakdown)> {
    let parts = [
        ("det_cls", Some(terms.det_cls), 1.0),
        ("det_reg", Some(terms.det_reg), w.lambda),
        ("kd_cls", terms.kd_cls, w.alpha_cls),
        ("kd_reg", terms.kd_reg, w.alpha_reg),
        ("feat", terms.feat, w.alpha_feat),
    ];
    let mut values = [0.0; 5];
    let mut total: Option<Var> = None;
    for (i, (name, var, weight)) in parts.into_iter().enumerate() {
        let Some(var) = var else { continue };
        let v = g.value(var).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} is {v}")));
        }
        values[i] = v;
        if weight == 0.0 && i > 0 {
            continue;
        }
        let scaled = g.scale(var, weight);
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    let total = total.expect("detection terms are always present");
    let b = LossBreakdown {
        total: g.value(total).item(),
        det_cls: values[0],
        det_reg: values[1],
        kd_cls: values[2],
        kd_reg: values[3],
        feat: values[4],
    };
    Ok((total, b))
}

/// Frozen teacher outputs for one scene, plus the masks derived from them.
#[derive(Clone, Debug)]
pub struct TeacherView {
    pub pred: Prediction,
    pub mask: Option<Tensor>,
    /// `[1, 1, Gt, Gt]` foreground of the ground truth on the teacher grid.
    pub foreground: Option<Tensor>,
    /// Boxes pooled for box-level feature imitation.
    pub roi_boxes: Vec<BoxLabel>,
}

/// Everything one training scene contributes to a student step.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub grid: Tensor,
    pub targets: TargetMaps,
    pub teacher: Option<TeacherView>,
    /// Teacher boxes merged into the labels.
    pub teacher_labels: usize,
}

/// Teacher decoding limit for label merging.
const TEACHER_MAX_DETS: usize = 100;
/// Suppression threshold for teacher boxes used in feature imitation.
const TEACHER_NMS_IOU: f64 = 0.3;

pub fn prepare_scene(
    scene: &Scene,
    recipe: &KdRecipe,
    student: &DetectorConfig,
    teacher: Option<&Detector>,
) -> Result<PreparedScene> {
    let grid = crate::scene::rasterize(scene, student.voxel_size)?.grid;
    let s_side = student.output_side()?;
    let s_voxel = student.output_voxel();
    let needs = recipe.logit != LogitKind::None
        || recipe.feature != FeatureKind::None
        || recipe.label != LabelKdMode::Off;
    let t = match (needs, teacher) {
        (false, _) => None,
        (true, Some(t)) => Some(t),
        (true, None) => return Err(config_err("recipe needs a teacher")),
    };
    let Some(t) = t else {
        return Ok(PreparedScene {
            grid,
            targets: assign_targets(&scene.boxes, s_side, s_voxel)?,
            teacher: None,
            teacher_labels: 0,
        });
    };
    let t_side = t.output_side();
    let t_voxel = t.config.output_voxel();
    let t_grid = crate::scene::rasterize(scene, t.config.voxel_size)?.grid;
    let pred = t.predict(&t_grid)?;
    let (targets, teacher_labels) = if recipe.label == LabelKdMode::Off {
        (assign_targets(&scene.boxes, s_side, s_voxel)?, 0)
    } else {
        let raw = decode(
            &pred.p_cls,
            &pred.p_reg,
            t_voxel,
            recipe.label_tau,
            TEACHER_MAX_DETS,
        )?;
        let merged = label::label_kd_merge(
            &scene.boxes,
            &raw,
            recipe.label,
            recipe.label_tau,
            s_side,
            s_voxel,
        )?;
        let n = merged.len() - scene.boxes.len();
        (assign_targets_flagged(&merged, s_side, s_voxel)?, n)
    };
    let t_targets = assign_targets(&scene.boxes, t_side, t_voxel)?;
    let mask = match recipe.mask_kind(t_side) {
        Some(kind) => Some(mask::make_mask(kind, &pred.p_cls, &t_targets.heatmap)?),
        None => None,
    };
    let foreground = (recipe.feature == FeatureKind::Fg).then(|| {
        t_targets
            .class_max()
            .map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    });
    let roi_boxes = match recipe.feature {
        FeatureKind::Mimic => scene.boxes.clone(),
        FeatureKind::GidF => {
            let raw = decode(
                &pred.p_cls,
                &pred.p_reg,
                t_voxel,
                recipe.feature_box_score,
                TEACHER_MAX_DETS,
            )?;
            nms(&raw, TEACHER_NMS_IOU)
                .iter()
                .map(|d| d.to_label())
                .collect()
        }
        _ => Vec::new(),
    };
    Ok(PreparedScene {
        grid,
        targets,
        teacher: Some(TeacherView {
            pred,
            mask,
            foreground,
            roi_boxes,
        }),
        teacher_labels,
    })
}

/// Assembles the objective for a student against precomputed teacher views.
#[derive(Debug)]
pub struct Distiller {
    pub recipe: KdRecipe,
    pub weights: ResolvedWeights,
    /// Channel adapter, present for feature imitation across widths.
    pub adapter: Option<Adapter>,
    teacher_side: usize,
    teacher_voxel: f64,
    student_voxel: f64,
    /// Batches where box-level feature imitation had no boxes.
    pub empty_box_batches: usize,
}

impl Distiller {
    pub fn new(
        recipe: KdRecipe,
        student: &DetectorConfig,
        teacher: Option<&DetectorConfig>,
        seed: u64,
    ) -> Result<Self> {
        recipe.validate()?;
        let (weights, adapter, teacher_side, teacher_voxel) = match teacher {
            Some(t) => {
                let w = resolve_weights(&recipe.weights, t, student)?;
                let (sc, tc) = (student.bfe_channels(), t.bfe_channels());
                let adapter = (recipe.feature != FeatureKind::None && sc != tc)
                    .then(|| Adapter::new(sc, tc, seed))
                    .transpose()?;
                (w, adapter, t.output_side()?, t.output_voxel())
            }
            None => {
                if recipe.needs_teacher() {
                    return Err(config_err("recipe needs a teacher"));
                }
                let w = &recipe.weights;
                let r = ResolvedWeights {
                    lambda: w.lambda,
                    alpha_cls: w.alpha_cls,
                    alpha_reg: w.alpha_reg,
                    alpha_feat: w.alpha_feat.unwrap_or(0.0),
                    relation: w.relation,
                };
                (r, None, student.output_side()?, student.output_voxel())
            }
        };
        Ok(Self {
            recipe,
            weights,
            adapter,
            teacher_side,
            teacher_voxel,
            student_voxel: student.output_voxel(),
            empty_box_batches: 0,
        })
    }

    /// Objective for one forward pass of the student over `batch`.
    pub fn loss(
        &mut self,
        g: &mut Graph,
        out: &DetectorVars,
        batch: &[&PreparedScene],
    ) -> Result<(Var, LossBreakdown)> {
        let targets: Vec<TargetMaps> = batch.iter().map(|s| s.targets.clone()).collect();
        let det = detection_loss(g, out, &targets, self.weights.lambda)?;
        let mut terms = LossTerms {
            det_cls: det.cls,
            det_reg: det.reg,
            kd_cls: None,
            kd_reg: None,
            feat: None,
        };
        let views: Vec<&TeacherView> = batch.iter().filter_map(|s| s.teacher.as_ref()).collect();
        if views.is_empty() {
            return total_loss(g, &terms, &self.weights);
        }
        if views.len() != batch.len() {
            return Err(config_err(
                "batch mixes scenes with and without teacher views",
            ));
        }
        let stack = |f: &dyn Fn(&TeacherView) -> &Tensor| -> Result<Tensor> {
            Tensor::stack_batch(&views.iter().map(|v| f(v)).collect::<Vec<_>>())
        };
        if self.recipe.logit != LogitKind::None {
            let masks: Vec<&Tensor> = views
                .iter()
                .map(|v| {
                    v.mask
                        .as_ref()
                        .ok_or_else(|| config_err("prepared scene lacks a mask"))
                })
                .collect::<Result<_>>()?;
            let mask = Tensor::stack_batch(&masks)?;
            let support = if self.recipe.logit == LogitKind::Vanilla {
                logit::RegSupport::Everywhere
            } else {
                logit::RegSupport::Masked
            };
            let l = logit::logit_kd_loss(
                g,
                out.p_cls,
                out.p_reg,
                &stack(&|v| &v.pred.p_cls)?,
                &stack(&|v| &v.pred.p_reg)?,
                &mask,
                support,
                self.weights.alpha_reg > 0.0,
            )?;
            terms.kd_cls = Some(l.cls);
            terms.kd_reg = l.reg;
        }
        if self.recipe.feature != FeatureKind::None {
            terms.feat = Some(self.feature_term(g, out.feature, &views)?);
        }
        total_loss(g, &terms, &self.weights)
    }

    fn feature_term(&mut self, g: &mut Graph, student: Var, views: &[&TeacherView]) -> Result<Var> {
        let teacher =
            Tensor::stack_batch(&views.iter().map(|v| &v.pred.feature).collect::<Vec<_>>())?;
        let kind = self.recipe.feature;
        let mut s = student;
        if matches!(kind, FeatureKind::Fitnet | FeatureKind::Fg) {
            let (_, _, h, _) = g.value(s).dims4()?;
            if h != self.teacher_side {
                s = g.resize_bilinear(s, self.teacher_side, self.teacher_side)?;
            }
        }
        if let Some(a) = self.adapter.as_mut() {
            s = a.forward_train(g, s)?;
        }
        match kind {
            FeatureKind::None => unreachable!("checked by caller"),
            FeatureKind::Fitnet => feature::fitnet_loss(g, s, &teacher),
            FeatureKind::Fg => {
                let fg: Vec<&Tensor> = views
                    .iter()
                    .map(|v| {
                        v.foreground
                            .as_ref()
                            .ok_or_else(|| config_err("prepared scene lacks a foreground mask"))
                    })
                    .collect::<Result<_>>()?;
                feature::foreground_loss(g, s, &teacher, &Tensor::stack_batch(&fg)?)
            }
            FeatureKind::Mimic | FeatureKind::GidF => {
                let boxes: Vec<Vec<BoxLabel>> = views.iter().map(|v| v.roi_boxes.clone()).collect();
                let pair = feature::pool_boxes(
                    g,
                    s,
                    self.student_voxel,
                    &teacher,
                    self.teacher_voxel,
                    &boxes,
                )?;
                let Some(pair) = pair else {
                    self.empty_box_batches += 1;
                    return Ok(g.constant(Tensor::scalar(0.0)));
                };
                let mse = feature::pooled_mse(g, pair)?;
                if kind == FeatureKind::Mimic || self.weights.relation == 0.0 {
                    return Ok(mse);
                }
                let rel = feature::relation_loss(g, pair)?;
                let rel = g.scale(rel, self.weights.relation);
                g.add(mse, rel)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_corpus, rasterize, SceneConfig};

    fn scenes(n: usize) -> Vec<Scene> {
        generate_corpus(21, n, &SceneConfig::default()).unwrap()
    }

    fn student_vars(
        g: &mut Graph,
        det: &mut Detector,
        prepared: &[&PreparedScene],
    ) -> DetectorVars {
        let grids: Vec<&Tensor> = prepared.iter().map(|p| &p.grid).collect();
        let x = g.constant(Tensor::stack_batch(&grids).unwrap());
        det.forward_train(g, x).unwrap()
    }

    #[test]
    fn weight_resolution() {
        let t = DetectorConfig::pillar_teacher();
        let w = KdWeights::default();
        let same = resolve_weights(&w, &t, &t.clone().with_widths(0.5, 0.5, 0.5)).unwrap();
        assert_eq!(
            (same.alpha_cls, same.alpha_reg, same.alpha_feat),
            (15.0, 0.2, 200.0)
        );
        let input = resolve_weights(&w, &t, &t.clone().with_voxel(1.5)).unwrap();
        assert_eq!((input.alpha_reg, input.alpha_feat), (0.0, 100.0));
    }

    #[test]
    fn recipe_round_trips_through_toml() {
        let r = KdRecipe {
            logit: LogitKind::PpRank,
            rank_k: Some(3),
            feature: FeatureKind::GidF,
            label: LabelKdMode::NonDuplicate,
            tgi: Some(RemapKind::Ofa),
            ..KdRecipe::default()
        };
        let text = toml::to_string(&r).unwrap();
        assert_eq!(toml::from_str::<KdRecipe>(&text).unwrap(), r);
        assert!(toml::from_str::<KdRecipe>("bogus = 1").is_err());
        let bad = KdRecipe {
            rank_k: Some(0),
            ..KdRecipe::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kd_off_reduces_to_detection_loss() {
        let cfg = DetectorConfig::pillar_teacher().with_widths(0.5, 0.5, 0.5);
        let sc = scenes(2);
        let prep: Vec<PreparedScene> = sc
            .iter()
            .map(|s| prepare_scene(s, &KdRecipe::default(), &cfg, None).unwrap())
            .collect();
        let refs: Vec<&PreparedScene> = prep.iter().collect();
        let mut det = Detector::build(&cfg, 0).unwrap();
        let mut d = Distiller::new(KdRecipe::default(), &cfg, None, 0).unwrap();
        let mut g = Graph::new();
        let out = student_vars(&mut g, &mut det, &refs);
        let (total, b) = d.loss(&mut g, &out, &refs).unwrap();
        let targets: Vec<TargetMaps> = prep.iter().map(|p| p.targets.clone()).collect();
        let plain = detection_loss(&mut g, &out, &targets, 2.0).unwrap();
        assert_eq!(g.value(total).item(), g.value(plain.total).item());
        assert_eq!((b.kd_cls, b.kd_reg, b.feat), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_term_decomposes() {
        let t_cfg = DetectorConfig::pillar_teacher();
        let teacher = Detector::build(&t_cfg, 1).unwrap();
        let s_cfg = t_cfg.clone().with_widths(0.5, 0.5, 0.5);
        let sc = scenes(2);
        for recipe in [
            KdRecipe {
                logit: LogitKind::PpGaussian,
                ..KdRecipe::default()
            },
            KdRecipe {
                feature: FeatureKind::Fitnet,
                ..KdRecipe::default()
            },
            KdRecipe {
                feature: FeatureKind::Mimic,
                ..KdRecipe::default()
            },
        ] {
            let prep: Vec<PreparedScene> = sc
                .iter()
                .map(|s| prepare_scene(s, &recipe, &s_cfg, Some(&teacher)).unwrap())
                .collect();
            let refs: Vec<&PreparedScene> = prep.iter().collect();
            let mut det = Detector::build(&s_cfg, 0).unwrap();
            let mut d = Distiller::new(recipe, &s_cfg, Some(&t_cfg), 0).unwrap();
            let mut g = Graph::new();
            let out = student_vars(&mut g, &mut det, &refs);
            let (total, b) = d.loss(&mut g, &out, &refs).unwrap();
            let w = d.weights;
            let want = b.det_cls
                + w.lambda * b.det_reg
                + w.alpha_cls * b.kd_cls
                + w.alpha_reg * b.kd_reg
                + w.alpha_feat * b.feat;
            assert!((g.value(total).item() - want).abs() <= 1e-12 * want.abs().max(1.0));
            assert!(b.kd_cls > 0.0 || b.feat > 0.0);
        }
    }

    #[test]
    fn non_finite_term_is_named() {
        let mut g = Graph::new();
        let ok = g.constant(Tensor::scalar(1.0));
        let bad = g.constant(Tensor::scalar(f64::NAN));
        let terms = LossTerms {
            det_cls: ok,
            det_reg: ok,
            kd_cls: None,
            kd_reg: None,
            feat: Some(bad),
        };
        let w = resolve_weights(
            &KdWeights::default(),
            &DetectorConfig::pillar_teacher(),
            &DetectorConfig::pillar_teacher(),
        )
        .unwrap();
        match total_loss(&mut g, &terms, &w) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("feat")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn self_distillation_losses_vanish() {
        let cfg = DetectorConfig::pillar_teacher();
        let teacher = Detector::build(&cfg, 3).unwrap();
        let sc = scenes(2);
        for (logit, feature) in [
            (LogitKind::Vanilla, FeatureKind::Fitnet),
            (LogitKind::PpConfidence, FeatureKind::Fg),
            (LogitKind::GidL, FeatureKind::Mimic),
            (LogitKind::PpRank, FeatureKind::GidF),
        ] {
            let recipe = KdRecipe {
                logit,
                feature,
                feature_box_score: 0.05,
                ..KdRecipe::default()
            };
            let prep: Vec<PreparedScene> = sc
                .iter()
                .map(|s| prepare_scene(s, &recipe, &cfg, Some(&teacher)).unwrap())
                .collect();
            let refs: Vec<&PreparedScene> = prep.iter().collect();
            let mut d = Distiller::new(recipe, &cfg, Some(&cfg), 0).unwrap();
            assert!(d.adapter.is_none());
            let mut g = Graph::new();
            let grids: Vec<&Tensor> = refs.iter().map(|p| &p.grid).collect();
            let x = g.constant(Tensor::stack_batch(&grids).unwrap());
            let out = teacher.forward(&mut g, x).unwrap();
            let (_, b) = d.loss(&mut g, &out, &refs).unwrap();
            assert_eq!(
                (b.kd_cls, b.kd_reg, b.feat),
                (0.0, 0.0, 0.0),
                "{logit:?} {feature:?}"
            );
        }
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let t_cfg = DetectorConfig::pillar_teacher();
        let mut teacher = Detector::build(&t_cfg, 4).unwrap();
        teacher.store.freeze();
        let s_cfg = t_cfg.clone().with_widths(0.5, 0.5, 0.5);
        let recipe = KdRecipe {
            logit: LogitKind::Vanilla,
            feature: FeatureKind::Fitnet,
            ..KdRecipe::default()
        };
        let sc = scenes(2);
        let prep: Vec<PreparedScene> = sc
            .iter()
            .map(|s| prepare_scene(s, &recipe, &s_cfg, Some(&teacher)).unwrap())
            .collect();
        let refs: Vec<&PreparedScene> = prep.iter().collect();
        let mut student = Detector::build(&s_cfg, 5).unwrap();
        let mut d = Distiller::new(recipe, &s_cfg, Some(&t_cfg), 0).unwrap();
        let mut g = Graph::new();
        let out = student_vars(&mut g, &mut student, &refs);
        let grid = rasterize(&sc[0], 1.0).unwrap().grid;
        let tx = g.constant(Tensor::stack_batch(&[&grid, &grid]).unwrap());
        let tv = teacher.forward(&mut g, tx).unwrap();
        let (loss, _) = d.loss(&mut g, &out, &refs).unwrap();
        let tsum = g.sum(tv.p_cls);
        let both = g.add(loss, tsum).unwrap();
        let grads = g.backward(both).unwrap();
        teacher.store.accumulate(&g, &grads);
        student.store.accumulate(&g, &grads);
        assert_eq!(teacher.store.max_abs_grad(), 0.0);
        assert!(student.store.max_abs_grad() > 0.0);
        let a = d.adapter.as_mut().unwrap();
        a.store.accumulate(&g, &grads);
        assert!(a.store.max_abs_grad() > 0.0);
    }

    #[test]
    fn label_kd_adds_teacher_boxes() {
        let cfg = DetectorConfig::pillar_teacher();
        let teacher = Detector::build(&cfg, 0).unwrap();
        let recipe = KdRecipe {
            label: LabelKdMode::Full,
            label_tau: 0.05,
            ..KdRecipe::default()
        };
        let p = prepare_scene(&scenes(1)[0], &recipe, &cfg, Some(&teacher)).unwrap();
        assert!(p.teacher_labels > 0);
        assert!(prepare_scene(&scenes(1)[0], &recipe, &cfg, None).is_err());
    }
}
