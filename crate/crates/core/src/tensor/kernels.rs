//! Raw forward/backward kernels on slices. Shape validation happens in
//! [`super::Graph`]; everything here assumes consistent inputs.

use super::gemm::gemm;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.k() * self.p()) as u64
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and, when `keep_cols`, the per-batch column matrices.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    keep_cols: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![0.0; g.n * out_len];
    let pointwise = g.is_pointwise();
    let mut cols = if keep_cols && !pointwise {
        vec![0.0; g.n * k * p]
    } else {
        Vec::new()
    };
    let mut scratch = if pointwise {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for b in 0..g.n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let col: &[f64] = if pointwise {
            xb
        } else {
            let dst = if keep_cols {
                &mut cols[b * k * p..(b + 1) * k * p]
            } else {
                &mut scratch[..]
            };
            im2col(g, xb, dst);
            dst
        };
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (o, row) in ob.chunks_mut(p).enumerate() {
                row.fill(bias[o]);
            }
            gemm(g.cout, k, p, weight, false, col, false, ob, 1.0);
        } else {
            gemm(g.cout, k, p, weight, false, col, false, ob, 0.0);
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    cols: &[f64],
    weight: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let pointwise = g.is_pointwise();
    let mut dx = need_dx.then(|| vec![0.0; g.n * in_len]);
    let mut dw = need_dw.then(|| vec![0.0; g.cout * k]);
    let mut db = need_db.then(|| vec![0.0; g.cout]);
    let mut dcol = if need_dx && !pointwise {
        vec![0.0; k * p]
    } else {
        Vec::new()
    };
    for b in 0..g.n {
        let dob = &dout[b * out_len..(b + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (o, row) in dob.chunks(p).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let col = if pointwise {
                &x[b * in_len..(b + 1) * in_len]
            } else {
                &cols[b * k * p..(b + 1) * k * p]
            };
            gemm(g.cout, p, k, dob, false, col, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm(k, g.cout, p, weight, true, dob, false, dxb, 0.0);
            } else {
                gemm(k, g.cout, p, weight, true, dob, false, &mut dcol, 0.0);
                col2im(g, &dcol, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Source index pair and weight of one output coordinate under
/// align-corners-false bilinear sampling.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lerp {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
}

pub(crate) fn resize_table(input: usize, output: usize) -> Vec<Lerp> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            Lerp { i0, i1, t }
        })
        .collect()
}

pub(crate) fn resize_forward(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    x: &[f64],
) -> Vec<f64> {
    let ty = resize_table(h, oh);
    let tx = resize_table(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, ly) in ty.iter().enumerate() {
            let r0 = &src[ly.i0 * w..(ly.i0 + 1) * w];
            let r1 = &src[ly.i1 * w..(ly.i1 + 1) * w];
            for (ox, lx) in tx.iter().enumerate() {
                let top = r0[lx.i0] * (1.0 - lx.t) + r0[lx.i1] * lx.t;
                let bot = r1[lx.i0] * (1.0 - lx.t) + r1[lx.i1] * lx.t;
                dst[oy * ow + ox] = top * (1.0 - ly.t) + bot * ly.t;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dout: &[f64],
) -> Vec<f64> {
    let ty = resize_table(h, oh);
    let tx = resize_table(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let src = &dout[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for (oy, ly) in ty.iter().enumerate() {
            for (ox, lx) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[ly.i0 * w + lx.i0] += g * (1.0 - ly.t) * (1.0 - lx.t);
                dst[ly.i0 * w + lx.i1] += g * (1.0 - ly.t) * lx.t;
                dst[ly.i1 * w + lx.i0] += g * ly.t * (1.0 - lx.t);
                dst[ly.i1 * w + lx.i1] += g * ly.t * lx.t;
            }
        }
    }
    dx
}

/// Bilinear sample taps at continuous index-space coordinate `(y, x)` where
/// cell `i` is centred on `i`. Samples outside `(-1, size)` contribute nothing.
pub(crate) fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1);
    let (mut ly, mut lx) = (y - y0 as f64, x - x0 as f64);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((y0 * w + x0, hy * hx));
    out.push((y0 * w + x1, hy * lx));
    out.push((y1 * w + x0, ly * hx));
    out.push((y1 * w + x1, ly * lx));
}
