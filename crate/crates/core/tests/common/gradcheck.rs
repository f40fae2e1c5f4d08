//! Central finite-difference checks for every differentiable graph op.

use bevkd::tensor::{Graph, RoiBox, Tensor, Var};
use bevkd::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const INSTANCES: usize = 20;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One random instance of an op: its inputs and the function under test.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    /// Largest `|analytic - numeric| / (|numeric| + 1e-8)` over coordinates.
    pub max_coord_err: f64,
}

fn probe(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// `sum(f(inputs) * r)` for a fixed random `r`, so every output element
/// contributes with its own weight.
fn analytic_grads(case: &Case, inputs: &[Tensor], seed: u64) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let r = g.constant(probe(g.value(out).shape(), seed));
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

fn value_only(case: &Case, inputs: &[Tensor], seed: u64) -> Result<f64> {
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let r = g.constant(probe(g.value(out).shape(), seed));
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod);
    Ok(g.value(loss).item())
}

/// Norm-wise relative error between analytic and central-difference
/// gradients over all inputs of one instance, and the worst per-coordinate
/// relative error.
pub fn check_case(case: &Case, seed: u64) -> Result<(f64, f64)> {
    let analytic = analytic_grads(case, &case.inputs, seed)?;
    let (mut diff, mut na, mut nn, mut coord) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (k, input) in case.inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = case.inputs.clone();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = case.inputs.clone();
            minus[k].data_mut()[i] -= FD_EPS;
            let numeric =
                (value_only(case, &plus, seed)? - value_only(case, &minus, seed)?) / (2.0 * FD_EPS);
            let a = analytic[k].data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
            coord = coord.max((a - numeric).abs() / (numeric.abs() + 1e-8));
        }
    }
    Ok((diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8), coord))
}

/// Values whose magnitude is at least `gap`, so kinks at zero are avoided.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.gen_range(1..3),
        rng.gen_range(1..3),
        rng.gen_range(2..5),
        rng.gen_range(2..5),
    ]
}

fn unary(x: Tensor, f: fn(&mut Graph, Var) -> Var) -> Case {
    Case {
        inputs: vec![x],
        build: Box::new(move |g, v| Ok(f(g, v[0]))),
    }
}

fn binary(a: Tensor, b: Tensor, f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    Case {
        inputs: vec![a, b],
        build: Box::new(move |g, v| f(g, v[0], v[1])),
    }
}

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let u = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape, -1.0, 1.0, rng);
    match op {
        "conv2d" => {
            let (n, cin, cout) = (
                rng.gen_range(1..3),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let k = [1, 3][rng.gen_range(0..2)];
            let stride = rng.gen_range(1..3);
            let pad = if rng.gen_bool(0.7) { k / 2 } else { 0 };
            let side = rng.gen_range(k.max(2)..6);
            let bias = rng.gen_bool(0.5);
            let mut inputs = vec![u(&[n, cin, side, side], rng), u(&[cout, cin, k, k], rng)];
            if bias {
                inputs.push(u(&[cout], rng));
            }
            Case {
                inputs,
                build: Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)),
            }
        }
        "batch_norm_train" => {
            let s = vec![
                rng.gen_range(2..4),
                rng.gen_range(1..4),
                rng.gen_range(2..4),
                rng.gen_range(2..4),
            ];
            let c = s[1];
            Case {
                inputs: vec![
                    u(&s, rng),
                    Tensor::uniform(&[c], 0.5, 1.5, rng),
                    u(&[c], rng),
                ],
                build: Box::new(|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
            }
        }
        "batch_norm_eval" => {
            let s = rand_shape(rng);
            let c = s[1];
            let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
            Case {
                inputs: vec![u(&s, rng), u(&[c], rng), u(&[c], rng)],
                build: Box::new(move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
            }
        }
        "relu" => unary(away_from_zero(&rand_shape(rng), 0.05, rng), Graph::relu),
        "sigmoid" => unary(
            Tensor::uniform(&rand_shape(rng), -3.0, 3.0, rng),
            Graph::sigmoid,
        ),
        "square" => unary(u(&rand_shape(rng), rng), Graph::square),
        "log" => unary(Tensor::uniform(&rand_shape(rng), 0.3, 3.0, rng), Graph::log),
        "exp" => unary(u(&rand_shape(rng), rng), Graph::exp),
        "abs" => unary(away_from_zero(&rand_shape(rng), 0.05, rng), Graph::abs),
        "one_minus" => unary(u(&rand_shape(rng), rng), Graph::one_minus),
        "sum" => unary(u(&rand_shape(rng), rng), Graph::sum),
        "mean" => unary(u(&rand_shape(rng), rng), Graph::mean),
        "scale" => {
            let f = rng.gen_range(-3.0..3.0);
            Case {
                inputs: vec![u(&rand_shape(rng), rng)],
                build: Box::new(move |g, v| Ok(g.scale(v[0], f))),
            }
        }
        "add_scalar" => {
            let c = rng.gen_range(-3.0..3.0);
            Case {
                inputs: vec![u(&rand_shape(rng), rng)],
                build: Box::new(move |g, v| Ok(g.add_scalar(v[0], c))),
            }
        }
        "clamp" => {
            // Keep every entry at least 0.05 away from both bounds.
            let s = rand_shape(rng);
            let n: usize = s.iter().product();
            let data = (0..n)
                .map(|_| match rng.gen_range(0..3) {
                    0 => rng.gen_range(-1.0..-0.55),
                    1 => rng.gen_range(-0.45..0.45),
                    _ => rng.gen_range(0.55..1.0),
                })
                .collect();
            Case {
                inputs: vec![Tensor::new(s, data).unwrap()],
                build: Box::new(|g, v| Ok(g.clamp(v[0], -0.5, 0.5))),
            }
        }
        "add" | "sub" | "mul" => {
            let s = rand_shape(rng);
            let f: fn(&mut Graph, Var, Var) -> Result<Var> = match op {
                "add" => Graph::add,
                "sub" => Graph::sub,
                _ => Graph::mul,
            };
            binary(u(&s, rng), u(&s, rng), f)
        }
        "resize_bilinear" => {
            let s = rand_shape(rng);
            let (oh, ow) = (rng.gen_range(1..8), rng.gen_range(1..8));
            Case {
                inputs: vec![u(&s, rng)],
                build: Box::new(move |g, v| g.resize_bilinear(v[0], oh, ow)),
            }
        }
        "roi_align" => {
            let (n, c, side) = (
                rng.gen_range(1..3),
                rng.gen_range(1..3),
                rng.gen_range(3..7),
            );
            let rois: Vec<RoiBox> = (0..rng.gen_range(1..4))
                .map(|_| {
                    let (x1, y1) = (
                        rng.gen_range(0.0..side as f64 - 1.0),
                        rng.gen_range(0.0..side as f64 - 1.0),
                    );
                    RoiBox {
                        batch: rng.gen_range(0..n),
                        x1,
                        y1,
                        x2: rng.gen_range(x1 + 0.3..side as f64),
                        y2: rng.gen_range(y1 + 0.3..side as f64),
                    }
                })
                .collect();
            let pooled = rng.gen_range(1..4);
            Case {
                inputs: vec![u(&[n, c, side, side], rng)],
                build: Box::new(move |g, v| g.roi_align(v[0], &rois, pooled, 2)),
            }
        }
        "gather_cells" => {
            let s = rand_shape(rng);
            let plane = s[2] * s[3];
            let positions: Vec<(usize, usize)> = (0..rng.gen_range(1..6))
                .map(|_| (rng.gen_range(0..s[0]), rng.gen_range(0..plane)))
                .collect();
            Case {
                inputs: vec![u(&s, rng)],
                build: Box::new(move |g, v| g.gather_cells(v[0], &positions)),
            }
        }
        "pairwise_distance" => {
            let r = rng.gen_range(2..5);
            let shape = [
                r,
                rng.gen_range(1..3),
                rng.gen_range(1..3),
                rng.gen_range(1..3),
            ];
            Case {
                inputs: vec![u(&shape, rng)],
                build: Box::new(|g, v| g.pairwise_distance(v[0])),
            }
        }
        other => panic!("no generator for {other}"),
    }
}

pub const OPS: [&str; 22] = [
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "sigmoid",
    "square",
    "log",
    "exp",
    "abs",
    "scale",
    "add_scalar",
    "one_minus",
    "clamp",
    "add",
    "sub",
    "mul",
    "sum",
    "mean",
    "resize_bilinear",
    "roi_align",
    "gather_cells",
    "pairwise_distance",
];

pub fn gradient_suite() -> Vec<OpReport> {
    OPS.iter()
        .enumerate()
        .map(|(k, &op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
            let (max_rel_err, max_coord_err) = (0..INSTANCES)
                .map(|i| {
                    let case = make_case(op, &mut rng);
                    check_case(&case, i as u64).unwrap_or_else(|e| panic!("{op}: {e}"))
                })
                .fold((0.0, 0.0), |(r, c), (a, b)| {
                    (f64::max(r, a), f64::max(c, b))
                });
            OpReport {
                op,
                instances: INSTANCES,
                max_rel_err,
                max_coord_err,
            }
        })
        .collect()
}
