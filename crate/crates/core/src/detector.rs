//! Micro centre-heatmap detector with pillar/BEV encoder, 2D backbone and
//! two-branch head, plus the heatmap focal + L1 detection loss.
//!
//! Every conv layer is described by a [`LayerSpec`]. Layers whose outputs are
//! summed share a channel group, which is what channel remapping keys on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::scene::{grid_side, TargetMaps, NUM_CLASSES, NUM_FEATURES};
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Logit bias of the classification output, a prior probability of 0.1.
pub const CLS_PRIOR_BIAS: f64 = -2.19;
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const PROB_CLAMP: f64 = 1e-4;
pub const REG_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Per-pillar pointwise encoder, output at input resolution.
    PillarLike,
    /// Strided encoder, output at a quarter of the input resolution.
    VoxelLike,
}

impl Family {
    pub fn downsample(self) -> usize {
        match self {
            Family::PillarLike => 1,
            Family::VoxelLike => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub family: Family,
    pub width_pfe: f64,
    pub width_bfe: f64,
    pub width_head: f64,
    pub depth_pfe: f64,
    pub depth_bfe: f64,
    pub voxel_size: f64,
    pub extent: f64,
    pub base_channels: usize,
    /// Residual blocks in the full-depth backbone.
    pub base_depth: usize,
}

impl DetectorConfig {
    pub fn pillar_teacher() -> Self {
        Self {
            family: Family::PillarLike,
            width_pfe: 1.0,
            width_bfe: 1.0,
            width_head: 1.0,
            depth_pfe: 1.0,
            depth_bfe: 1.0,
            voxel_size: 1.0,
            extent: 30.0,
            base_channels: 16,
            base_depth: 6,
        }
    }

    pub fn voxel_teacher() -> Self {
        Self {
            family: Family::VoxelLike,
            voxel_size: 0.5,
            ..Self::pillar_teacher()
        }
    }

    pub fn with_widths(mut self, pfe: f64, bfe: f64, head: f64) -> Self {
        self.width_pfe = pfe;
        self.width_bfe = bfe;
        self.width_head = head;
        self
    }

    pub fn with_depths(mut self, pfe: f64, bfe: f64) -> Self {
        self.depth_pfe = pfe;
        self.depth_bfe = bfe;
        self
    }

    pub fn with_voxel(mut self, voxel_size: f64) -> Self {
        self.voxel_size = voxel_size;
        self
    }

    pub fn input_side(&self) -> Result<usize> {
        grid_side(self.extent, self.voxel_size)
    }

    pub fn output_side(&self) -> Result<usize> {
        Ok(self.input_side()? / self.family.downsample())
    }

    /// Edge of one output cell in metres.
    pub fn output_voxel(&self) -> f64 {
        self.voxel_size * self.family.downsample() as f64
    }

    pub fn pfe_channels(&self) -> usize {
        scaled(self.base_channels, self.width_pfe)
    }

    pub fn bfe_channels(&self) -> usize {
        scaled(self.base_channels, self.width_bfe)
    }

    pub fn head_channels(&self) -> usize {
        scaled(self.base_channels, self.width_head)
    }

    pub fn bfe_blocks(&self) -> usize {
        (self.base_depth as f64 * self.depth_bfe).round() as usize
    }

    /// Pointwise layers (pillar-like) or extra stride-1 convs (voxel-like).
    pub fn pfe_layers(&self) -> usize {
        match self.family {
            Family::PillarLike => ((2.0 * self.depth_pfe).round() as usize).max(1),
            Family::VoxelLike => (4.0 * self.depth_pfe).round() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("width_pfe", self.width_pfe),
            ("width_bfe", self.width_bfe),
            ("width_head", self.width_head),
            ("depth_pfe", self.depth_pfe),
            ("depth_bfe", self.depth_bfe),
        ] {
            if !(m > 0.0 && m <= 1.0) {
                return Err(config_err(format!("{name} must lie in (0, 1], got {m}")));
            }
        }
        if self.base_channels == 0 {
            return Err(config_err("base_channels must be positive"));
        }
        let g = self.input_side()?;
        let d = self.family.downsample();
        if g % d != 0 {
            return Err(config_err(format!(
                "grid side {g} is not divisible by the encoder downsample factor {d}"
            )));
        }
        if g / d < 2 {
            return Err(config_err("output grid must be at least 2 cells wide"));
        }
        Ok(())
    }
}

fn scaled(base: usize, mult: f64) -> usize {
    ((base as f64 * mult).round() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Pfe,
    Bfe,
    Head,
}

#[derive(Clone, Debug)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// One convolution, followed by batch norm and ReLU when `bn` is present,
/// otherwise carrying a bias.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub module: Module,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Channel group of the input; `None` for raw pillar features.
    pub in_group: Option<String>,
    pub out_group: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<BnIds>,
}

impl LayerSpec {
    pub fn out_side(&self, in_side: usize) -> usize {
        (in_side + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Indices into [`Detector::layers`] describing the forward wiring.
#[derive(Clone, Debug)]
struct Wiring {
    pfe: Vec<usize>,
    bfe_down: usize,
    bfe_blocks: Vec<usize>,
    bfe_up: usize,
    bfe_lateral: usize,
    cls_hidden: usize,
    cls_out: usize,
    reg_hidden: usize,
    reg_out: usize,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    layers: Vec<LayerSpec>,
    wiring: Wiring,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DetectorVars {
    pub cls_logits: Var,
    pub p_cls: Var,
    pub p_reg: Var,
    /// Last backbone feature map.
    pub feature: Var,
}

/// Output values detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p_cls: Tensor,
    pub p_reg: Tensor,
    pub feature: Tensor,
}

impl Prediction {
    pub fn batch_item(&self, n: usize) -> Result<Prediction> {
        Ok(Prediction {
            p_cls: self.p_cls.batch_item(n)?,
            p_reg: self.p_reg.batch_item(n)?,
            feature: self.feature.batch_item(n)?,
        })
    }
}

struct Builder<'a> {
    store: ParamStore,
    layers: Vec<LayerSpec>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        module: Module,
        (cin, cout): (usize, usize),
        (kernel, stride): (usize, usize),
        bn: bool,
        in_group: Option<&str>,
        out_group: &str,
    ) -> Result<usize> {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor::uniform(&[cout, cin, kernel, kernel], -bound, bound, self.rng);
        let weight = self
            .store
            .add(&format!("{name}.weight"), w, ParamKind::Trainable)?;
        let (bias, bn) = if bn {
            let mut add = |suffix: &str, v: f64, kind| {
                self.store.add(
                    &format!("{name}.bn.{suffix}"),
                    Tensor::full(&[cout], v),
                    kind,
                )
            };
            let ids = BnIds {
                gamma: add("gamma", 1.0, ParamKind::Trainable)?,
                beta: add("beta", 0.0, ParamKind::Trainable)?,
                running_mean: add("running_mean", 0.0, ParamKind::Buffer)?,
                running_var: add("running_var", 1.0, ParamKind::Buffer)?,
            };
            (None, Some(ids))
        } else {
            let b = self.store.add(
                &format!("{name}.bias"),
                Tensor::zeros(&[cout]),
                ParamKind::Trainable,
            )?;
            (Some(b), None)
        };
        self.layers.push(LayerSpec {
            name: name.to_string(),
            module,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            in_group: in_group.map(str::to_string),
            out_group: out_group.to_string(),
            weight,
            bias,
            bn,
        });
        Ok(self.layers.len() - 1)
    }
}

impl Detector {
    /// Builds a freshly initialized network, seeded for reproducibility.
    pub fn build(config: &DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            layers: Vec::new(),
            rng: &mut rng,
        };
        let (cp, cb, ch) = (
            config.pfe_channels(),
            config.bfe_channels(),
            config.head_channels(),
        );
        let mut pfe = Vec::new();
        let mut group: Option<String> = None;
        let mut cin = NUM_FEATURES;
        let mut push_pfe = |b: &mut Builder, name: String, k: usize, s: usize| -> Result<()> {
            let out = format!("{name}.out");
            pfe.push(b.conv(
                &name,
                Module::Pfe,
                (cin, cp),
                (k, s),
                true,
                group.as_deref(),
                &out,
            )?);
            group = Some(out);
            cin = cp;
            Ok(())
        };
        match config.family {
            Family::PillarLike => {
                for i in 0..config.pfe_layers() {
                    push_pfe(&mut b, format!("pfe.conv{i}"), 1, 1)?;
                }
            }
            Family::VoxelLike => {
                let extra = config.pfe_layers();
                let per_stage = [extra / 2, extra - extra / 2];
                for (s, &n) in per_stage.iter().enumerate() {
                    push_pfe(&mut b, format!("pfe.down{s}"), 3, 2)?;
                    for j in 0..n {
                        push_pfe(&mut b, format!("pfe.stage{s}.conv{j}"), 3, 1)?;
                    }
                }
            }
        }
        let pfe_group = group.expect("encoder has at least one layer");
        let trunk = "bfe.trunk";
        let out = "bfe.out";
        let bfe_down = b.conv(
            "bfe.down",
            Module::Bfe,
            (cp, cb),
            (3, 2),
            true,
            Some(&pfe_group),
            trunk,
        )?;
        let bfe_blocks = (0..config.bfe_blocks())
            .map(|i| {
                let name = format!("bfe.block{i}");
                b.conv(
                    &name,
                    Module::Bfe,
                    (cb, cb),
                    (3, 1),
                    true,
                    Some(trunk),
                    trunk,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let bfe_up = b.conv(
            "bfe.up",
            Module::Bfe,
            (cb, cb),
            (3, 1),
            true,
            Some(trunk),
            out,
        )?;
        let bfe_lateral = b.conv(
            "bfe.lateral",
            Module::Bfe,
            (cp, cb),
            (1, 1),
            true,
            Some(&pfe_group),
            out,
        )?;
        let cls_hidden = b.conv(
            "head.cls_hidden",
            Module::Head,
            (cb, ch),
            (3, 1),
            true,
            Some(out),
            "head.cls",
        )?;
        let cls_out = b.conv(
            "head.cls_out",
            Module::Head,
            (ch, NUM_CLASSES),
            (1, 1),
            false,
            Some("head.cls"),
            "head.cls_out",
        )?;
        let reg_hidden = b.conv(
            "head.reg_hidden",
            Module::Head,
            (cb, ch),
            (3, 1),
            true,
            Some(out),
            "head.reg",
        )?;
        let reg_out = b.conv(
            "head.reg_out",
            Module::Head,
            (ch, REG_CHANNELS),
            (1, 1),
            false,
            Some("head.reg"),
            "head.reg_out",
        )?;
        let mut store = b.store;
        let cls_bias = store.id("head.cls_out.bias").expect("just added");
        store.value_mut(cls_bias).data_mut().fill(CLS_PRIOR_BIAS);
        Ok(Self {
            config: config.clone(),
            store,
            layers: b.layers,
            wiring: Wiring {
                pfe,
                bfe_down,
                bfe_blocks,
                bfe_up,
                bfe_lateral,
                cls_hidden,
                cls_out,
                reg_hidden,
                reg_out,
            },
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// `(input side, output side)` of every layer for an input grid side.
    pub fn layer_sides(&self, input_side: usize) -> Vec<(usize, usize)> {
        let mut sides = vec![(0, 0); self.layers.len()];
        let w = &self.wiring;
        let mut s = input_side;
        for &i in &w.pfe {
            let o = self.layers[i].out_side(s);
            sides[i] = (s, o);
            s = o;
        }
        let feat = s;
        let down = self.layers[w.bfe_down].out_side(feat);
        sides[w.bfe_down] = (feat, down);
        for &i in &w.bfe_blocks {
            sides[i] = (down, down);
        }
        for i in [
            w.bfe_up,
            w.bfe_lateral,
            w.cls_hidden,
            w.cls_out,
            w.reg_hidden,
            w.reg_out,
        ] {
            sides[i] = (feat, feat);
        }
        sides
    }

    pub fn input_side(&self) -> usize {
        self.config.input_side().expect("validated at build")
    }

    pub fn output_side(&self) -> usize {
        self.config.output_side().expect("validated at build")
    }

    fn layer_forward(
        &self,
        g: &mut Graph,
        x: Var,
        li: usize,
        stats: Option<&mut Vec<(usize, crate::tensor::BatchStats)>>,
    ) -> Result<Var> {
        let l = &self.layers[li];
        let w = g.param(&self.store, l.weight);
        let b = l.bias.map(|id| g.param(&self.store, id));
        let y = g.conv2d(x, w, b, l.stride, l.pad)?;
        let Some(bn) = &l.bn else {
            return Ok(y);
        };
        let gamma = g.param(&self.store, bn.gamma);
        let beta = g.param(&self.store, bn.beta);
        let y = match stats {
            Some(stats) => {
                let (y, s) = g.batch_norm_train(y, gamma, beta, BN_EPS)?;
                stats.push((li, s));
                y
            }
            None => g.batch_norm_eval(
                y,
                gamma,
                beta,
                self.store.value(bn.running_mean).data(),
                self.store.value(bn.running_var).data(),
                BN_EPS,
            )?,
        };
        Ok(g.relu(y))
    }

    fn forward_impl(
        &self,
        g: &mut Graph,
        input: Var,
        mut stats: Option<&mut Vec<(usize, crate::tensor::BatchStats)>>,
    ) -> Result<DetectorVars> {
        let (_, c, h, w) = g.value(input).dims4()?;
        let side = self.input_side();
        if c != NUM_FEATURES || h != side || w != side {
            return Err(Error::Shape(format!(
                "detector expects [N, {NUM_FEATURES}, {side}, {side}], got [_, {c}, {h}, {w}]"
            )));
        }
        let wr = &self.wiring;
        let mut x = input;
        for &i in &wr.pfe {
            x = self.layer_forward(g, x, i, stats.as_deref_mut())?;
        }
        let pfe_out = x;
        let (_, _, fh, fw) = g.value(pfe_out).dims4()?;
        let mut t = self.layer_forward(g, pfe_out, wr.bfe_down, stats.as_deref_mut())?;
        for &i in &wr.bfe_blocks {
            let y = self.layer_forward(g, t, i, stats.as_deref_mut())?;
            t = g.add(t, y)?;
        }
        let up = g.resize_bilinear(t, fh, fw)?;
        let up = self.layer_forward(g, up, wr.bfe_up, stats.as_deref_mut())?;
        let lateral = self.layer_forward(g, pfe_out, wr.bfe_lateral, stats.as_deref_mut())?;
        let feature = g.add(up, lateral)?;
        let hc = self.layer_forward(g, feature, wr.cls_hidden, stats.as_deref_mut())?;
        let cls_logits = self.layer_forward(g, hc, wr.cls_out, stats.as_deref_mut())?;
        let hr = self.layer_forward(g, feature, wr.reg_hidden, stats.as_deref_mut())?;
        let p_reg = self.layer_forward(g, hr, wr.reg_out, stats.as_deref_mut())?;
        let p_cls = g.sigmoid(cls_logits);
        Ok(DetectorVars {
            cls_logits,
            p_cls,
            p_reg,
            feature,
        })
    }

    /// Inference-mode forward using running batch-norm statistics.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<DetectorVars> {
        self.forward_impl(g, input, None)
    }

    /// Training-mode forward: batch statistics normalize the batch and are
    /// folded into the running estimates.
    pub fn forward_train(&mut self, g: &mut Graph, input: Var) -> Result<DetectorVars> {
        let mut stats = Vec::new();
        let vars = self.forward_impl(g, input, Some(&mut stats))?;
        for (li, s) in stats {
            let bn = self.layers[li]
                .bn
                .clone()
                .expect("stats only from bn layers");
            let keep = BN_MOMENTUM;
            for (ids, batch) in [(bn.running_mean, &s.mean), (bn.running_var, &s.var)] {
                for (r, b) in self.store.value_mut(ids).data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + (1.0 - keep) * b;
                }
            }
        }
        Ok(vars)
    }

    /// Inference on a `[N, F, G, G]` grid batch without recording gradients.
    pub fn predict(&self, grid: &Tensor) -> Result<Prediction> {
        let mut g = Graph::no_grad();
        let x = g.constant(grid.clone());
        let v = self.forward(&mut g, x)?;
        Ok(Prediction {
            p_cls: g.value(v.p_cls).clone(),
            p_reg: g.value(v.p_reg).clone(),
            feature: g.value(v.feature).clone(),
        })
    }
}

/// Scalar parts of the detection objective.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// Penalty-reduced focal loss on the heatmap plus L1 on regression at the
/// assigned centres. `targets` holds one entry per batch element.
pub fn detection_loss(
    g: &mut Graph,
    out: &DetectorVars,
    targets: &[TargetMaps],
    lambda: f64,
) -> Result<DetectionLoss> {
    let (n, c, h, w) = g.value(out.p_cls).dims4()?;
    if targets.len() != n || targets.iter().any(|t| t.side != h || t.side != w) || c != NUM_CLASSES
    {
        return Err(Error::Shape(format!(
            "{} target maps for predictions of shape {:?}",
            targets.len(),
            g.value(out.p_cls).shape()
        )));
    }
    let heat: Vec<&Tensor> = targets.iter().map(|t| &t.heatmap).collect();
    let heat = Tensor::stack_batch(&heat)?;
    let num_peaks: usize = targets.iter().map(|t| t.num_peaks()).sum();
    let pos = heat.map(|v| if v == 1.0 { 1.0 } else { 0.0 });
    let neg = heat.map(|v| {
        if v == 1.0 {
            0.0
        } else {
            (1.0 - v).powi(FOCAL_BETA)
        }
    });
    let p = g.clamp(out.p_cls, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = g.one_minus(p);
    let log_p = g.log(p);
    let log_q = g.log(q);
    let pos_term = {
        let wq = g.square(q);
        let t = g.mul(wq, log_p)?;
        let m = g.constant(pos);
        let t = g.mul(t, m)?;
        g.sum(t)
    };
    let neg_term = {
        let wp = g.square(p);
        let t = g.mul(wp, log_q)?;
        let m = g.constant(neg);
        let t = g.mul(t, m)?;
        g.sum(t)
    };
    let cls = g.add(pos_term, neg_term)?;
    let cls = g.scale(cls, -1.0 / num_peaks.max(1) as f64);

    let mut positions = Vec::new();
    let mut wanted = Vec::new();
    for (b, t) in targets.iter().enumerate() {
        for e in &t.entries {
            positions.push((b, e.cell));
            wanted.extend_from_slice(&e.target);
        }
    }
    let reg = if positions.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let k = positions.len();
        let picked = g.gather_cells(out.p_reg, &positions)?;
        let want = g.constant(Tensor::new(vec![k, REG_CHANNELS], wanted)?);
        let d = g.sub(picked, want)?;
        let d = g.abs(d);
        let s = g.sum(d);
        g.scale(s, 1.0 / k as f64)
    };
    let weighted = g.scale(reg, lambda);
    let total = g.add(cls, weighted)?;
    Ok(DetectionLoss { total, cls, reg })
}
