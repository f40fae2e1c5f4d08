//! One experiment: corpus, optional frozen teacher, student training,
//! evaluation and efficiency accounting, written as JSON and CSV.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{teacher_hash, CorpusSpec, ExperimentConfig, TeacherSpec, CODE_VERSION};
use super::train::{train, TrainLog};
use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, MapResult};
use crate::kd::{prepare_scene, tgi_remap, Distiller, KdRecipe, PreparedScene};
use crate::metrics::{cpr, efficiency_report, total_counts, CprInput, CprScore, EfficiencyReport};
use crate::scene::{generate_corpus, rasterize, Scene};
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint};

pub const RESULT_VERSION: u32 = 1;
pub const RESULT_FILE: &str = "result.json";
pub const RESULT_CSV: &str = "result.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

pub fn build_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    Ok(Corpus {
        train: generate_corpus(spec.seed, spec.train_scenes, &spec.scene)?,
        eval: generate_corpus(spec.eval_seed(), spec.eval_scenes, &spec.scene)?,
    })
}

pub fn evaluate_detector(det: &Detector, scenes: &[Scene], cfg: &EvalConfig) -> Result<MapResult> {
    let preds = scenes
        .iter()
        .map(|s| det.predict(&rasterize(s, det.config.voxel_size)?.grid))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&preds, scenes, det.config.output_voxel(), cfg)
}

/// A trained teacher with the accuracy and cost it was stored with.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub detector: Detector,
    pub summary: TeacherSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub hash: String,
    pub map: MapResult,
    pub acts: u64,
    pub macs: u64,
    pub params: u64,
}

#[derive(Serialize, Deserialize)]
struct TeacherMeta {
    kind: String,
    code_version: String,
    detector: DetectorConfig,
    summary: TeacherSummary,
    train: TrainLog,
}

/// Trains a teacher on `corpus` and writes its checkpoint. An existing
/// checkpoint from a different specification is kept unless `force`.
pub fn train_teacher(
    spec: &TeacherSpec,
    corpus: &CorpusSpec,
    eval: &EvalConfig,
    force: bool,
) -> Result<Teacher> {
    let hash = teacher_hash(spec, corpus);
    if let Some(existing) = stored_teacher_hash(&spec.checkpoint)? {
        if existing != hash && !force {
            return Err(Error::Provenance {
                path: spec.checkpoint.clone(),
                existing,
                requested: hash,
            });
        }
    }
    let data = build_corpus(corpus)?;
    let mut det = Detector::build(&spec.detector, spec.train.seed)?;
    let mut distiller = Distiller::new(KdRecipe::default(), &spec.detector, None, spec.train.seed)?;
    let prepared = prepare_all(&data.train, &KdRecipe::default(), &spec.detector, None)?;
    let mut log = TrainLog::default();
    train(&mut det, &mut distiller, &prepared, &spec.train, &mut log)?;
    det.store.zero_grad();
    let map = evaluate_detector(&det, &data.eval, eval)?;
    let counts = total_counts(&det, det.input_side())?;
    let summary = TeacherSummary {
        hash,
        map,
        acts: counts.acts,
        macs: counts.macs,
        params: counts.params,
    };
    let meta = TeacherMeta {
        kind: "teacher".into(),
        code_version: CODE_VERSION.into(),
        detector: spec.detector.clone(),
        summary: summary.clone(),
        train: log,
    };
    det.store.freeze();
    save_checkpoint(
        &spec.checkpoint,
        &Checkpoint::from_store(&det.store, serde_json::to_value(meta)?),
    )?;
    Ok(Teacher {
        detector: det,
        summary,
    })
}

fn stored_teacher_hash(path: &Path) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    let ckpt = load_checkpoint(path)?;
    let meta: TeacherMeta = serde_json::from_value(ckpt.meta)?;
    Ok(Some(meta.summary.hash))
}

/// Loads a frozen teacher, checking it was trained from this specification.
pub fn load_teacher(spec: &TeacherSpec, corpus: &CorpusSpec) -> Result<Teacher> {
    if !spec.checkpoint.exists() {
        return Err(Error::MissingTeacher(spec.checkpoint.clone()));
    }
    let ckpt = load_checkpoint(&spec.checkpoint)?;
    let meta: TeacherMeta = serde_json::from_value(ckpt.meta.clone())?;
    let hash = teacher_hash(spec, corpus);
    if meta.summary.hash != hash {
        return Err(Error::StaleTeacher {
            path: spec.checkpoint.clone(),
            existing: meta.summary.hash,
            requested: hash,
        });
    }
    let mut det = Detector::build(&spec.detector, 0)?;
    ckpt.load_into(&mut det.store)?;
    det.store.freeze();
    Ok(Teacher {
        detector: det,
        summary: meta.summary,
    })
}

/// Loads the teacher, training it first when no checkpoint exists.
pub fn ensure_teacher(
    spec: &TeacherSpec,
    corpus: &CorpusSpec,
    eval: &EvalConfig,
) -> Result<Teacher> {
    match load_teacher(spec, corpus) {
        Err(Error::MissingTeacher(_)) => train_teacher(spec, corpus, eval, false),
        other => other,
    }
}

pub fn prepare_all(
    scenes: &[Scene],
    recipe: &KdRecipe,
    student: &DetectorConfig,
    teacher: Option<&Detector>,
) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| prepare_scene(s, recipe, student, teacher))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub version: u32,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub map: MapResult,
    pub efficiency: EfficiencyReport,
    pub teacher: Option<TeacherSummary>,
    pub cpr: Option<CprScore>,
    pub train: TrainLog,
    /// Batches where box-level feature imitation found no boxes.
    pub empty_box_batches: usize,
    /// Teacher boxes merged into the training labels, over all scenes.
    pub teacher_labels: usize,
    pub wall_clock_s: f64,
}

impl RunResult {
    /// Copy with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RunResult {
        let mut r = self.clone();
        r.wall_clock_s = 0.0;
        r.efficiency.latency = None;
        r
    }

    pub fn row(&self) -> ResultRow {
        let c = &self.config;
        let ap = |name: &str| self.map.per_class.get(name).copied().flatten();
        ResultRow {
            name: c.name.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            family: format!("{:?}", c.student.family),
            voxel_size: c.student.voxel_size,
            width_pfe: c.student.width_pfe,
            width_bfe: c.student.width_bfe,
            width_head: c.student.width_head,
            depth_pfe: c.student.depth_pfe,
            depth_bfe: c.student.depth_bfe,
            logit: enum_name(&c.recipe.logit),
            feature: enum_name(&c.recipe.feature),
            label: enum_name(&c.recipe.label),
            tgi: c
                .recipe
                .tgi
                .map(|t| enum_name(&t))
                .unwrap_or_else(|| "none".into()),
            map: self.map.mean,
            ap_large: ap("large"),
            ap_small: ap("small"),
            params: self.efficiency.params,
            flops: self.efficiency.macs,
            acts: self.efficiency.acts,
            teacher_map: self.teacher.as_ref().map(|t| t.map.mean),
            teacher_acts: self.teacher.as_ref().map(|t| t.acts),
            cpr: self.cpr.as_ref().map(|c| c.value),
            wall_clock_s: self.wall_clock_s,
            code_version: self.code_version.clone(),
        }
    }
}

/// Flat CSV form of a [`RunResult`]. `flops` counts multiply-accumulates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub family: String,
    pub voxel_size: f64,
    pub width_pfe: f64,
    pub width_bfe: f64,
    pub width_head: f64,
    pub depth_pfe: f64,
    pub depth_bfe: f64,
    pub logit: String,
    pub feature: String,
    pub label: String,
    pub tgi: String,
    pub map: f64,
    pub ap_large: Option<f64>,
    pub ap_small: Option<f64>,
    pub params: u64,
    pub flops: u64,
    pub acts: u64,
    pub teacher_map: Option<f64>,
    pub teacher_acts: Option<u64>,
    pub cpr: Option<f64>,
    pub wall_clock_s: f64,
    pub code_version: String,
}

pub(crate) fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Overwrite results written from a different configuration.
    pub force: bool,
    /// Skip writing files.
    pub dry: bool,
    /// Keep the trained student's checkpoint next to the result.
    pub save_checkpoint: bool,
}

/// Reads the config hash of a finished run in `dir`, if any.
pub fn existing_hash(dir: &Path) -> Result<Option<String>> {
    let path = dir.join(RESULT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let r: RunResult = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(Some(r.config_hash))
}

pub fn read_result(dir: &Path) -> Result<RunResult> {
    Ok(serde_json::from_str(&std::fs::read_to_string(
        dir.join(RESULT_FILE),
    )?)?)
}

/// Trains and evaluates one student. Fails before training when a needed
/// teacher checkpoint is missing.
pub fn run(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunResult> {
    cfg.validate()?;
    let hash = cfg.hash();
    let out = cfg.output_dir.clone();
    if !opts.dry {
        if let Some(existing) = existing_hash(&out)? {
            if existing != hash && !opts.force {
                return Err(Error::Provenance {
                    path: out,
                    existing,
                    requested: hash,
                });
            }
        }
    }
    let teacher = match &cfg.teacher {
        Some(spec) if cfg.recipe.needs_teacher() => Some(load_teacher(spec, &cfg.corpus)?),
        Some(spec) if spec.checkpoint.exists() => Some(load_teacher(spec, &cfg.corpus)?),
        _ => None,
    };
    run_with_teacher(cfg, teacher.as_ref(), opts)
}

/// [`run`] with an already loaded teacher.
pub fn run_with_teacher(
    cfg: &ExperimentConfig,
    teacher: Option<&Teacher>,
    opts: RunOptions,
) -> Result<RunResult> {
    cfg.validate()?;
    let started = Instant::now();
    let corpus = build_corpus(&cfg.corpus)?;
    let t_det = teacher.map(|t| &t.detector);
    let mut student = Detector::build(&cfg.student, cfg.train.seed)?;
    if let Some(kind) = cfg.recipe.tgi {
        let t = t_det.ok_or_else(|| Error::Config("TGI needs a teacher".into()))?;
        tgi_remap(t, &mut student, kind)?;
    }
    let prepared = prepare_all(&corpus.train, &cfg.recipe, &cfg.student, t_det)?;
    let teacher_labels = prepared.iter().map(|p| p.teacher_labels).sum();
    let mut distiller = Distiller::new(
        cfg.recipe,
        &cfg.student,
        t_det.map(|t| &t.config),
        cfg.train.seed,
    )?;
    let mut log = TrainLog::default();
    if let Err(e) = train(
        &mut student,
        &mut distiller,
        &prepared,
        &cfg.train,
        &mut log,
    ) {
        if !opts.dry {
            write_diagnostics(&cfg.output_dir, &cfg.hash(), &log, &e)?;
        }
        return Err(e);
    }
    let map = evaluate_detector(&student, &corpus.eval, &cfg.eval)?;
    let efficiency = efficiency_report(&student, None)?;
    let summary = teacher.map(|t| t.summary.clone());
    let cpr = match &summary {
        Some(t) if t.map.mean > 0.0 => Some(cpr(CprInput {
            acts_s: efficiency.acts as f64,
            acts_t: t.acts as f64,
            maph_s: map.mean,
            maph_t: t.map.mean,
        })?),
        _ => None,
    };
    let result = RunResult {
        version: RESULT_VERSION,
        code_version: CODE_VERSION.into(),
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        config: cfg.clone(),
        map,
        efficiency,
        teacher: summary,
        cpr,
        train: log,
        empty_box_batches: distiller.empty_box_batches,
        teacher_labels,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    if !opts.dry {
        write_result(&cfg.output_dir, &result)?;
        if opts.save_checkpoint {
            let meta = serde_json::json!({
                "kind": "student",
                "config_hash": result.config_hash,
                "code_version": CODE_VERSION,
                "detector": cfg.student,
            });
            save_checkpoint(
                &cfg.output_dir.join(STUDENT_CHECKPOINT),
                &Checkpoint::from_store(&student.store, meta),
            )?;
        }
    }
    Ok(result)
}

fn write_diagnostics(dir: &Path, hash: &str, log: &TrainLog, err: &Error) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let doc = serde_json::json!({
        "config_hash": hash,
        "code_version": CODE_VERSION,
        "error": err.to_string(),
        "train": log,
    });
    std::fs::write(
        dir.join(DIAGNOSTICS_FILE),
        serde_json::to_string_pretty(&doc)?,
    )?;
    Ok(())
}

/// Writes `result.json`, `eval.json` and a one-row `result.csv`.
pub fn write_result(dir: &Path, result: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESULT_FILE), serde_json::to_string_pretty(result)?)?;
    let eval = serde_json::json!({
        "metric": "toy-mAP",
        "per_class": result.map.per_class,
        "mean": result.map.mean,
        "notes": result.map.notes,
        "config_hash": result.config_hash,
        "code_version": result.code_version,
    });
    std::fs::write(dir.join(EVAL_FILE), serde_json::to_string_pretty(&eval)?)?;
    write_rows(&dir.join(RESULT_CSV), &[result.row()])
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Student checkpoint path of a run directory.
pub fn student_checkpoint(dir: &Path) -> PathBuf {
    dir.join(STUDENT_CHECKPOINT)
}
