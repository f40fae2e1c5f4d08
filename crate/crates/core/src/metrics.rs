//! Analytical parameter, multiply-accumulate and activation counts, the
//! cost-performance ratio, and reference wall-clock latency.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, Module};
use crate::error::{config_err, Error, Result};
use crate::scene::NUM_FEATURES;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub params: u64,
    /// Multiply-accumulates.
    pub macs: u64,
    /// Conv output elements.
    pub acts: u64,
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            params: self.params + o.params,
            macs: self.macs + o.macs,
            acts: self.acts + o.acts,
        }
    }
}

/// Cost of one square conv layer on a single input. Batch norm adds two
/// parameters per output channel.
pub fn conv_cost(
    cin: usize,
    cout: usize,
    kernel: usize,
    bias: bool,
    bn: bool,
    out_side: usize,
) -> Counts {
    let weights = (cout * cin * kernel * kernel) as u64;
    let plane = (out_side * out_side) as u64;
    let extra = if bias { cout as u64 } else { 0 } + if bn { 2 * cout as u64 } else { 0 };
    Counts {
        params: weights + extra,
        macs: weights * plane,
        acts: cout as u64 * plane,
    }
}

fn check_side(det: &Detector, input_side: usize) -> Result<()> {
    let d = det.config.family.downsample();
    if input_side == 0 || input_side % d != 0 || input_side / d < 2 {
        return Err(Error::Unsupported(format!(
            "input side {input_side} does not give a static output grid (downsample {d})"
        )));
    }
    Ok(())
}

/// Per-module counts for an input grid of `input_side`.
pub fn module_counts(det: &Detector, input_side: usize) -> Result<BTreeMap<String, Counts>> {
    check_side(det, input_side)?;
    let mut out = BTreeMap::new();
    for m in ["pfe", "bfe", "head"] {
        out.insert(m.to_string(), Counts::default());
    }
    for (l, &(_, o)) in det.layers().iter().zip(&det.layer_sides(input_side)) {
        let key = match l.module {
            Module::Pfe => "pfe",
            Module::Bfe => "bfe",
            Module::Head => "head",
        };
        let c = conv_cost(l.cin, l.cout, l.kernel, l.bias.is_some(), l.bn.is_some(), o);
        let slot = out.get_mut(key).expect("inserted above");
        *slot = *slot + c;
    }
    Ok(out)
}

pub fn total_counts(det: &Detector, input_side: usize) -> Result<Counts> {
    Ok(module_counts(det, input_side)?
        .into_values()
        .fold(Counts::default(), |a, b| a + b))
}

pub fn count_params(det: &Detector) -> u64 {
    total_counts(det, det.input_side())
        .expect("built detectors have a valid side")
        .params
}

pub fn count_flops(det: &Detector, input_side: usize) -> Result<u64> {
    Ok(total_counts(det, input_side)?.macs)
}

pub fn count_acts(det: &Detector, input_side: usize) -> Result<u64> {
    Ok(total_counts(det, input_side)?.acts)
}

/// Peak bytes of live f64 buffers under sequential inference, assuming batch
/// norm and ReLU run in place.
pub fn peak_memory_bytes(det: &Detector, input_side: usize) -> Result<u64> {
    check_side(det, input_side)?;
    let sides = det.layer_sides(input_side);
    let elems = |name: &str| -> u64 {
        let (i, l) = det
            .layers()
            .iter()
            .enumerate()
            .find(|(_, l)| l.name == name)
            .expect("layer exists");
        (l.cout * sides[i].1 * sides[i].1) as u64
    };
    let mut peak = 0u64;
    let mut prev = (NUM_FEATURES * input_side * input_side) as u64;
    let pfe: Vec<&str> = det
        .layers()
        .iter()
        .filter(|l| l.module == Module::Pfe)
        .map(|l| l.name.as_str())
        .collect();
    for name in &pfe {
        let out = elems(name);
        peak = peak.max(prev + out);
        prev = out;
    }
    let pfe_out = prev;
    let trunk = elems("bfe.down");
    peak = peak.max(pfe_out + trunk);
    let blocks = det.layers().iter().any(|l| l.name.starts_with("bfe.block"));
    if blocks {
        // Block input, block output and the residual sum.
        peak = peak.max(pfe_out + 3 * trunk);
    }
    let up = elems("bfe.up");
    peak = peak.max(pfe_out + trunk + up);
    peak = peak.max(pfe_out + 2 * up);
    let lateral = elems("bfe.lateral");
    peak = peak.max(up + lateral + up);
    let feature = up;
    for (hidden, out) in [
        ("head.cls_hidden", "head.cls_out"),
        ("head.reg_hidden", "head.reg_out"),
    ] {
        peak = peak.max(feature + elems("head.cls_out") + elems(hidden) + elems(out));
    }
    Ok(peak * std::mem::size_of::<f64>() as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub repeats: usize,
}

/// Mean wall-clock of `repeats` inference passes after `warmup` discarded
/// ones. A reference measurement only; it depends on the machine and load.
pub fn measure_latency(det: &Detector, repeats: usize, warmup: usize) -> Result<LatencyStats> {
    if repeats == 0 {
        return Err(Error::Usage("latency needs at least one repeat".into()));
    }
    let s = det.input_side();
    let x = Tensor::zeros(&[1, NUM_FEATURES, s, s]);
    for _ in 0..warmup {
        det.predict(&x)?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        det.predict(&x)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples.iter().sum::<f64>() / repeats as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / repeats as f64;
    Ok(LatencyStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        repeats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub params: u64,
    /// Multiply-accumulate count; see [`EfficiencyReport::flops`].
    pub macs: u64,
    pub acts: u64,
    pub per_module: BTreeMap<String, Counts>,
    pub latency: Option<LatencyStats>,
    pub peak_mem_bytes: Option<u64>,
    pub notes: Vec<String>,
}

impl EfficiencyReport {
    /// Flop count, either as MACs or doubled (one multiply plus one add).
    pub fn flops(&self, doubled: bool) -> u64 {
        if doubled {
            2 * self.macs
        } else {
            self.macs
        }
    }
}

pub fn efficiency_report(
    det: &Detector,
    latency: Option<(usize, usize)>,
) -> Result<EfficiencyReport> {
    let side = det.input_side();
    let per_module = module_counts(det, side)?;
    let total = per_module.values().fold(Counts::default(), |a, &b| a + b);
    let mut notes = vec![
        "flops are multiply-accumulates".to_string(),
        "acts count every conv output element, head included".to_string(),
    ];
    let latency = match latency {
        Some((repeats, warmup)) => {
            notes.push(
                "latency is reference-only wall clock; measure without concurrent load".into(),
            );
            Some(measure_latency(det, repeats, warmup)?)
        }
        None => None,
    };
    Ok(EfficiencyReport {
        params: total.params,
        macs: total.macs,
        acts: total.acts,
        per_module,
        latency,
        peak_mem_bytes: Some(peak_memory_bytes(det, side)?),
        notes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CprInput {
    pub acts_s: f64,
    pub acts_t: f64,
    pub maph_s: f64,
    pub maph_t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CprScore {
    pub value: f64,
    /// Set when the score leaves `[0, 1]`; the value itself is not clamped.
    pub warning: Option<String>,
}

/// Cost-performance ratio: half the relative activation saving plus half
/// the cubed relative accuracy.
pub fn cpr(input: CprInput) -> Result<CprScore> {
    if !(input.acts_t > 0.0) || !(input.maph_t > 0.0) {
        return Err(config_err("teacher acts and accuracy must be positive"));
    }
    if input.acts_s < 0.0 || input.maph_s < 0.0 {
        return Err(config_err("student acts and accuracy must be non-negative"));
    }
    let value =
        0.5 * (1.0 - input.acts_s / input.acts_t) + 0.5 * (input.maph_s / input.maph_t).powi(3);
    let warning = if input.acts_s > input.acts_t {
        Some("student has more activations than teacher".to_string())
    } else if !(0.0..=1.0).contains(&value) {
        Some(format!("score {value} outside [0, 1]"))
    } else {
        None
    };
    Ok(CprScore { value, warning })
}

/// Fixed-width text table of efficiency and accuracy rows.
pub fn format_table(rows: &[(String, EfficiencyReport, Option<f64>, Option<f64>)]) -> String {
    let mut s = format!(
        "{:<28} {:>10} {:>12} {:>10} {:>10} {:>8}\n",
        "model", "params", "macs", "acts", "toy-mAP", "CPR"
    );
    for (name, r, map, score) in rows {
        let opt = |v: &Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
        s.push_str(&format!(
            "{:<28} {:>10} {:>12} {:>10} {:>10} {:>8}\n",
            name,
            r.params,
            r.macs,
            r.acts,
            opt(map, 2),
            opt(score, 3)
        ));
    }
    s
}
