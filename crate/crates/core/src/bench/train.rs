//! Single-threaded minibatch training of a detector under a distillation
//! recipe.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainSpec;
use crate::detector::Detector;
use crate::error::Result;
use crate::kd::{Distiller, LossBreakdown, PreparedScene};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};

/// Progress record, filled while training so a failed run still reports
/// what happened before the failure.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss parts per epoch.
    pub epochs: Vec<LossBreakdown>,
    pub steps: usize,
}

fn cosine_lr(spec: &TrainSpec, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return spec.lr;
    }
    let t = step as f64 / (total - 1) as f64;
    let lo = spec.lr * spec.final_lr_fraction;
    lo + 0.5 * (spec.lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
}

fn add(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.total += w * b.total;
    acc.det_cls += w * b.det_cls;
    acc.det_reg += w * b.det_reg;
    acc.kd_cls += w * b.kd_cls;
    acc.kd_reg += w * b.kd_reg;
    acc.feat += w * b.feat;
}

pub fn train(
    student: &mut Detector,
    distiller: &mut Distiller,
    scenes: &[PreparedScene],
    spec: &TrainSpec,
    log: &mut TrainLog,
) -> Result<()> {
    spec.validate()?;
    if scenes.is_empty() || spec.epochs == 0 {
        return Ok(());
    }
    let adam_cfg = AdamConfig {
        lr: spec.lr,
        weight_decay: spec.weight_decay,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(adam_cfg, &student.store);
    let mut adapter_opt = distiller
        .adapter
        .as_ref()
        .map(|a| Adam::new(adam_cfg, &a.store));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9));
    let per_epoch = scenes.len().div_ceil(spec.batch_size);
    let total = per_epoch * spec.epochs;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut epoch = LossBreakdown::default();
        for chunk in order.chunks(spec.batch_size) {
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let grids: Vec<&Tensor> = batch.iter().map(|p| &p.grid).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::stack_batch(&grids)?);
            let out = student.forward_train(&mut g, x)?;
            let (loss, parts) = distiller.loss(&mut g, &out, &batch)?;
            let grads = g.backward(loss)?;
            let lr = cosine_lr(spec, log.steps, total);
            student.store.zero_grad();
            student.store.accumulate(&g, &grads);
            opt.config.lr = lr;
            opt.step(&mut student.store)?;
            if let (Some(a), Some(o)) = (distiller.adapter.as_mut(), adapter_opt.as_mut()) {
                a.store.zero_grad();
                a.store.accumulate(&g, &grads);
                o.config.lr = lr;
                o.step(&mut a.store)?;
            }
            add(&mut epoch, &parts, 1.0 / per_epoch as f64);
            log.steps += 1;
        }
        log.epochs.push(epoch);
    }
    Ok(())
}
