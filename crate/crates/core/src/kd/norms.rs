//! Per-channel L1 norms of the backbone feature, averaged over a corpus.

use std::fmt::Write as _;
use std::path::Path;

use crate::detector::Detector;
use crate::error::Result;
use crate::scene::{rasterize, Scene};
use crate::tensor::Tensor;

/// Mean absolute activation of each channel of a `[1, C, H, W]` map.
pub fn channel_l1(feature: &Tensor) -> Result<Vec<f64>> {
    let (_, c, h, w) = feature.dims4()?;
    let plane = h * w;
    Ok(feature
        .data()
        .chunks(plane)
        .take(c)
        .map(|ch| ch.iter().map(|v| v.abs()).sum::<f64>() / plane as f64)
        .collect())
}

/// Corpus mean of [`channel_l1`] of `det`'s backbone feature. Per-scene
/// values are summed in sorted order, so the result does not depend on the
/// order of `scenes`.
pub fn channel_norms(det: &Detector, scenes: &[Scene]) -> Result<Vec<f64>> {
    let mut per_channel: Vec<Vec<f64>> = Vec::new();
    for s in scenes {
        let grid = rasterize(s, det.config.voxel_size)?;
        let norms = channel_l1(&det.predict(&grid.grid)?.feature)?;
        per_channel.resize(norms.len(), Vec::new());
        for (acc, v) in per_channel.iter_mut().zip(norms) {
            acc.push(v);
        }
    }
    Ok(per_channel
        .into_iter()
        .map(|mut vals| {
            vals.sort_by(f64::total_cmp);
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect())
}

/// CSV with header `channel,l1_norm`.
pub fn norms_csv(norms: &[f64]) -> String {
    let mut out = String::from("channel,l1_norm\n");
    for (i, v) in norms.iter().enumerate() {
        writeln!(out, "{i},{v}").expect("writing to a string");
    }
    out
}

pub fn channel_norm_export(det: &Detector, scenes: &[Scene], path: &Path) -> Result<Vec<f64>> {
    let norms = channel_norms(det, scenes)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, norms_csv(&norms))?;
    Ok(norms)
}
