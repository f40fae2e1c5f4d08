use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Region for [`Graph::roi_align`], in feature-map cell units: cell `i`
/// spans `[i, i + 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub batch: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

enum Op {
    Leaf {
        param: Option<(u64, ParamId)>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics feed back into the normalisation in train mode.
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Resize {
        x: Var,
        from: (usize, usize),
        planes: usize,
    },
    RoiAlign {
        x: Var,
        /// For each output bin: range into `taps`, plus the source batch.
        bins: Vec<(usize, usize, usize)>,
        taps: Vec<(usize, f64)>,
    },
    Gather {
        x: Var,
        positions: Vec<(usize, usize)>,
    },
    PairwiseDistance(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in execution order, so
/// the tape is topologically sorted by construction.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    macs: u64,
    conv_outputs: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape"));
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            macs: 0,
            conv_outputs: 0,
        }
    }

    /// A graph that never records backward context; every value is a constant.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by convolutions on this graph.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Output elements produced by convolutions on this graph.
    pub fn conv_output_elements(&self) -> u64 {
        self.conv_outputs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad {
            op
        } else {
            Op::Leaf { param: None }
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// A differentiable leaf that is not backed by a parameter store.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, true)
    }

    /// Records a parameter as a leaf. Frozen stores and buffers enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        let rg = store.is_trainable(id) && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf {
                param: Some((store.uid(), id)),
            },
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn param_leaves(&self, store_uid: u64) -> Vec<(Var, ParamId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf {
                    param: Some((uid, id)),
                } if uid == store_uid => Some((Var(i), id)),
                _ => None,
            })
            .collect()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if cin != wcin {
            return Err(Error::Config(format!(
                "conv2d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::Config(format!(
                "conv2d: {kh}x{kw} kernel does not fit {h}x{wd} input with padding {padding}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(shape_err(format!(
                    "conv2d bias {:?} for {cout} outputs",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.grad_enabled && self.rg(&inputs);
        let keep_cols = rg && self.requires_grad(w);
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            keep_cols,
        );
        self.macs += geom.macs();
        self.conv_outputs += (n * cout * geom.p()) as u64;
        let value = Tensor::new(vec![n, cout, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    fn check_channel_vec(&self, v: Var, c: usize, what: &str) -> Result<()> {
        if self.value(v).shape() != [c] {
            return Err(shape_err(format!(
                "{what} has shape {:?}, expected [{c}]",
                self.value(v).shape()
            )));
        }
        Ok(())
    }

    /// Batch norm over `(N, H, W)` using the statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.check_channel_vec(gamma, c, "batch_norm gamma")?;
        self.check_channel_vec(beta, c, "batch_norm beta")?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let s = &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for ch in 0..c {
                let s = &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var
                .iter()
                .map(|v| {
                    if count > 1.0 {
                        v * count / (count - 1.0)
                    } else {
                        *v
                    }
                })
                .collect(),
        };
        let out = self.normalize(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((out, stats))
    }

    /// Batch norm with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        self.check_channel_vec(gamma, c, "batch_norm gamma")?;
        self.check_channel_vec(beta, c, "batch_norm beta")?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, &inv_std, false)
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
    ) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        let plane = h * w;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xt.numel()];
        let mut out = vec![0.0; xt.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xt.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let at = self.value(a);
        let data = at
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Bilinear resize of the two trailing axes, align-corners-false.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("resize to a zero-size target".into()));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let planes = n * c;
        let out = kernels::resize_forward(planes, (h, w), (out_h, out_w), self.value(x).data());
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Resize {
                x,
                from: (h, w),
                planes,
            },
            rg,
        ))
    }

    /// RoI Align with a `pooled × pooled` output and `samples × samples`
    /// bilinear taps per bin. Output shape `[R, C, pooled, pooled]`.
    pub fn roi_align(
        &mut self,
        x: Var,
        rois: &[RoiBox],
        pooled: usize,
        samples: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if rois.is_empty() || pooled == 0 || samples == 0 {
            return Err(Error::Config(
                "roi_align needs rois, pooled > 0, samples > 0".into(),
            ));
        }
        let mut bins = Vec::with_capacity(rois.len() * pooled * pooled);
        let mut taps = Vec::new();
        let mut scratch = Vec::with_capacity(4);
        for roi in rois {
            if roi.batch >= n {
                return Err(shape_err(format!("roi batch {} out of {n}", roi.batch)));
            }
            let bin_w = (roi.x2 - roi.x1).max(1e-9) / pooled as f64;
            let bin_h = (roi.y2 - roi.y1).max(1e-9) / pooled as f64;
            let norm = 1.0 / (samples * samples) as f64;
            for py in 0..pooled {
                for px in 0..pooled {
                    let start = taps.len();
                    for sy in 0..samples {
                        let y = roi.y1 + bin_h * (py as f64 + (sy as f64 + 0.5) / samples as f64);
                        for sx in 0..samples {
                            let xx =
                                roi.x1 + bin_w * (px as f64 + (sx as f64 + 0.5) / samples as f64);
                            scratch.clear();
                            kernels::bilinear_taps(y - 0.5, xx - 0.5, h, w, &mut scratch);
                            taps.extend(scratch.iter().map(|&(i, wt)| (i, wt * norm)));
                        }
                    }
                    bins.push((start, taps.len(), roi.batch));
                }
            }
        }
        let xd = self.value(x).data();
        let plane = h * w;
        let bins_per_roi = pooled * pooled;
        let mut out = vec![0.0; rois.len() * c * bins_per_roi];
        for (r, chunk) in bins.chunks(bins_per_roi).enumerate() {
            for ch in 0..c {
                for (bi, &(s, e, batch)) in chunk.iter().enumerate() {
                    let src = &xd[(batch * c + ch) * plane..(batch * c + ch + 1) * plane];
                    out[(r * c + ch) * bins_per_roi + bi] =
                        taps[s..e].iter().map(|&(i, wt)| src[i] * wt).sum();
                }
            }
        }
        let value = Tensor::new(vec![rois.len(), c, pooled, pooled], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::RoiAlign { x, bins, taps }, rg))
    }

    /// Picks `x[n, :, cell]` for each `(n, cell)` with `cell = y * W + x`.
    /// Output shape `[K, C]`.
    pub fn gather_cells(&mut self, x: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if positions.is_empty() {
            return Err(Error::Config("gather_cells with no positions".into()));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(positions.len() * c);
        for &(b, cell) in positions {
            if b >= n || cell >= plane {
                return Err(shape_err(format!(
                    "gather position ({b}, {cell}) out of range"
                )));
            }
            for ch in 0..c {
                out.push(xd[(b * c + ch) * plane + cell]);
            }
        }
        let value = Tensor::new(vec![positions.len(), c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    /// Euclidean distances between the rows of `x` (first axis = items,
    /// remaining axes flattened). Output `[R, R]`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let r = xt.shape()[0];
        let d = xt.numel() / r;
        let xd = xt.data();
        let mut out = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..r {
                let s: f64 = (0..d)
                    .map(|k| (xd[i * d + k] - xd[j * d + k]).powi(2))
                    .sum();
                out[i * r + j] = (s + PAIRWISE_EPS).sqrt();
            }
        }
        let value = Tensor::new(vec![r, r], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::PairwiseDistance(x), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let r = kernels::conv2d_backward(
                    geom,
                    val(*x),
                    cols,
                    val(*w),
                    gd,
                    needs(*x),
                    needs(*w),
                    b.map_or(false, needs),
                );
                if let Some(dx) = r.dx {
                    accumulate(&mut grads[x.0], &shape_of(*x), dx);
                }
                if let Some(dw) = r.dw {
                    accumulate(&mut grads[w.0], &shape_of(*w), dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    accumulate(&mut grads[b.0], &shape_of(*b), db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = shape_of(*x);
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let plane = h * w;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if needs(*x) {
                    let gam = val(*gamma);
                    let count = (n * plane) as f64;
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] = if *batch_stats {
                                    gam[ch] * inv_std[ch] / count
                                        * (count * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * gd[i]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &shape, dx);
                }
                if needs(*gamma) {
                    accumulate(&mut grads[gamma.0], &[c], dgamma);
                }
                if needs(*beta) {
                    accumulate(&mut grads[beta.0], &[c], dbeta);
                }
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], g.shape(), d);
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                accumulate(&mut grads[x.0], g.shape(), d);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.shape(), gd.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.shape(), gd.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.shape(), gd.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.shape(), gd.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = val(*b).iter().zip(gd).map(|(y, g)| y * g).collect();
                    accumulate(&mut grads[a.0], g.shape(), d);
                }
                if needs(*b) {
                    let d = val(*a).iter().zip(gd).map(|(x, g)| x * g).collect();
                    accumulate(&mut grads[b.0], g.shape(), d);
                }
            }
            Op::Scale(x, f) => {
                accumulate(
                    &mut grads[x.0],
                    g.shape(),
                    gd.iter().map(|v| v * f).collect(),
                );
            }
            Op::AddScalar(x) => {
                accumulate(&mut grads[x.0], g.shape(), gd.to_vec());
            }
            Op::Square(x) => {
                let d = val(*x).iter().zip(gd).map(|(v, g)| 2.0 * v * g).collect();
                accumulate(&mut grads[x.0], g.shape(), d);
            }
            Op::Log(x) => {
                let d = val(*x).iter().zip(gd).map(|(v, g)| g / v).collect();
                accumulate(&mut grads[x.0], g.shape(), d);
            }
            Op::Exp(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(e, g)| e * g)
                    .collect();
                accumulate(&mut grads[x.0], g.shape(), d);
            }
            Op::Abs(x) => {
                let d = val(*x)
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(&mut grads[x.0], g.shape(), d);
            }
            Op::Clamp(x, lo, hi) => {
                let d = val(*x)
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v >= *lo && v <= *hi { g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], g.shape(), d);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                accumulate(&mut grads[x.0], &shape_of(*x), vec![gd[0]; n]);
            }
            Op::Resize { x, from, planes } => {
                let shape = node.value.shape();
                let d = kernels::resize_backward(*planes, *from, (shape[2], shape[3]), gd);
                accumulate(&mut grads[x.0], &shape_of(*x), d);
            }
            Op::RoiAlign { x, bins, taps } => {
                let xs = shape_of(*x);
                let (c, plane) = (xs[1], xs[2] * xs[3]);
                let os = node.value.shape();
                let bins_per_roi = os[2] * os[3];
                let mut dx = vec![0.0; xs.iter().product()];
                for (r, chunk) in bins.chunks(bins_per_roi).enumerate() {
                    for ch in 0..c {
                        for (bi, &(s, e, batch)) in chunk.iter().enumerate() {
                            let go = gd[(r * c + ch) * bins_per_roi + bi];
                            let dst =
                                &mut dx[(batch * c + ch) * plane..(batch * c + ch + 1) * plane];
                            for &(i, wt) in &taps[s..e] {
                                dst[i] += go * wt;
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], &xs, dx);
            }
            Op::Gather { x, positions } => {
                let xs = shape_of(*x);
                let (c, plane) = (xs[1], xs[2] * xs[3]);
                let mut dx = vec![0.0; xs.iter().product()];
                for (k, &(b, cell)) in positions.iter().enumerate() {
                    for ch in 0..c {
                        dx[(b * c + ch) * plane + cell] += gd[k * c + ch];
                    }
                }
                accumulate(&mut grads[x.0], &xs, dx);
            }
            Op::PairwiseDistance(x) => {
                let xs = shape_of(*x);
                let xd = val(*x);
                let r = xs[0];
                let d = xd.len() / r;
                let dist = node.value.data();
                let mut dx = vec![0.0; xd.len()];
                for i in 0..r {
                    for j in 0..r {
                        if i == j {
                            continue;
                        }
                        let coef = gd[i * r + j] / dist[i * r + j];
                        for k in 0..d {
                            let diff = xd[i * d + k] - xd[j * d + k];
                            dx[i * d + k] += coef * diff;
                            dx[j * d + k] -= coef * diff;
                        }
                    }
                }
                accumulate(&mut grads[x.0], &xs, dx);
            }
        }
    }
}

/// Keeps the distance differentiable on the diagonal.
const PAIRWISE_EPS: f64 = 1e-12;

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_multiply_add_conv() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let w = g.constant(t(&[1, 1, 1, 1], &[3.0]));
        let b = g.constant(t(&[1], &[1.0]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
    }

    #[test]
    fn identity_kernel_returns_input() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.25 - 1.0).collect();
        let x = g.constant(t(&[1, 2, 3, 3], &data));
        let w = g.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_channel_mismatch_is_config_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(Error::Config(_))));
        let w = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn constant_field_survives_resize() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 5], 1.75));
        for (h, w) in [(1, 1), (6, 10), (7, 2)] {
            let y = g.resize_bilinear(x, h, w).unwrap();
            assert!(g.value(y).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
        }
        assert!(matches!(g.resize_bilinear(x, 0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn backward_on_sum_of_weighted_input() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let w = g.leaf(t(&[3], &[0.7, 0.1, -4.0]));
        let unused = g.leaf(Tensor::scalar(3.0));
        let wx = g.mul(w, x).unwrap();
        let loss = g.sum(wx);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -2.0, 0.5]);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn no_grad_graph_records_no_context() {
        let mut g = Graph::no_grad();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.square(x);
        assert!(!g.requires_grad(y));
        let grads = g.backward(y).unwrap();
        assert!(grads.get(x).is_none());
    }
}
