//! Plot-ready data from finished runs: an accuracy-versus-flops scatter and
//! per-channel feature norms of teachers and students.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{build_corpus, csv_err, read_result, student_checkpoint, RunResult, RESULT_FILE};
use crate::detector::Detector;
use crate::error::Result;
use crate::kd::norms::channel_norm_export;
use crate::tensor::load_checkpoint;

pub const SCATTER_CSV: &str = "scatter.csv";
pub const SCATTER_JSON: &str = "scatter.json";
pub const NORMS_DIR: &str = "channel_norms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub run: String,
    pub config_hash: String,
    pub family: String,
    pub voxel_size: f64,
    pub recipe: String,
    pub seed: u64,
    /// Multiply-accumulates per scene.
    pub flops: u64,
    pub params: u64,
    pub acts: u64,
    pub map: f64,
    pub cpr: Option<f64>,
}

const SCATTER_HEADER: [&str; 11] = [
    "run",
    "config_hash",
    "family",
    "voxel_size",
    "recipe",
    "seed",
    "flops",
    "params",
    "acts",
    "map",
    "cpr",
];

/// Finished run directories under `root`, sorted by path.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = BTreeSet::new();
    if !root.exists() {
        return Ok(Vec::new());
    }
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| std::io::Error::other(e.to_string()))?;
        if entry.file_type().is_file() && entry.file_name() == RESULT_FILE {
            if let Some(parent) = entry.path().parent() {
                dirs.insert(parent.to_path_buf());
            }
        }
    }
    Ok(dirs.into_iter().collect())
}

fn recipe_label(r: &RunResult) -> String {
    let row = r.row();
    [row.logit, row.feature, row.label, row.tgi]
        .into_iter()
        .filter(|s| s != "none" && s != "off")
        .collect::<Vec<_>>()
        .join("+")
}

pub fn scatter_point(run: &str, r: &RunResult) -> ScatterPoint {
    let label = recipe_label(r);
    ScatterPoint {
        run: run.to_string(),
        config_hash: r.config_hash.clone(),
        family: super::run::enum_name(&r.config.student.family),
        voxel_size: r.config.student.voxel_size,
        recipe: if label.is_empty() {
            "none".into()
        } else {
            label
        },
        seed: r.seed,
        flops: r.efficiency.macs,
        params: r.efficiency.params,
        acts: r.efficiency.acts,
        map: r.map.mean,
        cpr: r.cpr.as_ref().map(|c| c.value),
    }
}

fn relative_name(root: &Path, dir: &Path) -> String {
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let s = rel.to_string_lossy().replace(['/', '\\'], "__");
    if s.is_empty() {
        ".".into()
    } else {
        s
    }
}

/// Scatter points of every run under `root`.
pub fn scatter_points(root: &Path) -> Result<Vec<ScatterPoint>> {
    find_runs(root)?
        .iter()
        .map(|d| Ok(scatter_point(&relative_name(root, d), &read_result(d)?)))
        .collect()
}

pub fn scatter_csv(points: &[ScatterPoint]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(SCATTER_HEADER).map_err(csv_err)?;
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotSummary {
    pub points: usize,
    pub norm_files: Vec<PathBuf>,
}

/// Writes `scatter.csv`, `scatter.json` and, when `norms` is set, one
/// `channel,l1_norm` CSV per stored network under `channel_norms/`.
/// An empty results tree yields header-only files.
pub fn emit_plot_data(results: &Path, out: &Path, norms: bool) -> Result<PlotSummary> {
    std::fs::create_dir_all(out)?;
    let points = scatter_points(results)?;
    std::fs::write(out.join(SCATTER_CSV), scatter_csv(&points)?)?;
    std::fs::write(
        out.join(SCATTER_JSON),
        serde_json::to_string_pretty(&points)?,
    )?;
    let mut summary = PlotSummary {
        points: points.len(),
        norm_files: Vec::new(),
    };
    if !norms {
        return Ok(summary);
    }
    let norm_dir = out.join(NORMS_DIR);
    std::fs::create_dir_all(&norm_dir)?;
    let mut teachers_done = BTreeSet::new();
    for dir in find_runs(results)? {
        let r = read_result(&dir)?;
        let corpus = build_corpus(&r.config.corpus)?;
        if let (Some(spec), Some(t)) = (&r.config.teacher, &r.teacher) {
            if spec.checkpoint.exists() && teachers_done.insert(t.hash.clone()) {
                let mut det = Detector::build(&spec.detector, 0)?;
                load_checkpoint(&spec.checkpoint)?.load_into(&mut det.store)?;
                let path = norm_dir.join(format!("teacher_{}.csv", &t.hash[..12]));
                channel_norm_export(&det, &corpus.eval, &path)?;
                summary.norm_files.push(path);
            }
        }
        let ckpt = student_checkpoint(&dir);
        if ckpt.exists() {
            let mut det = Detector::build(&r.config.student, 0)?;
            load_checkpoint(&ckpt)?.load_into(&mut det.store)?;
            let path = norm_dir.join(format!("{}.csv", relative_name(results, &dir)));
            channel_norm_export(&det, &corpus.eval, &path)?;
            summary.norm_files.push(path);
        }
    }
    Ok(summary)
}
