//! Study matrices: students × recipes × seeds, run cell by cell with resume
//! by config hash, collated into per-study tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{
    CorpusSpec, ExperimentConfig, TeacherSpec, TrainSpec, CODE_VERSION, CONFIG_VERSION,
};
use super::run::{
    ensure_teacher, existing_hash, read_result, run_with_teacher, write_rows, RunOptions,
    RunResult, Teacher,
};
use crate::detector::DetectorConfig;
use crate::error::{config_err, Error, Result};
use crate::eval::EvalConfig;
use crate::kd::{FeatureKind, KdRecipe, LabelKdMode, LogitKind, RemapKind};
use crate::metrics::{cpr, CprInput};

/// How a student differs from its teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compression {
    Input,
    Width,
    Depth,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentEntry {
    pub label: String,
    /// Key into [`MatrixSpec::teachers`].
    pub teacher: String,
    pub compression: Compression,
    pub detector: DetectorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeEntry {
    pub label: String,
    pub recipe: KdRecipe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub corpus: CorpusSpec,
    pub teachers: BTreeMap<String, TeacherSpec>,
    pub students: Vec<StudentEntry>,
    pub recipes: Vec<RecipeEntry>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Teacher training schedule of the built-in studies.
pub fn default_teacher_train() -> TrainSpec {
    TrainSpec {
        epochs: 60,
        ..TrainSpec::default()
    }
}

/// Student training schedule of the built-in studies.
pub fn default_student_train() -> TrainSpec {
    TrainSpec {
        epochs: 40,
        ..TrainSpec::default()
    }
}

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

/// Names accepted by [`builtin_matrix`].
pub const BUILTIN_STUDIES: [&str; 7] = [
    "compression",
    "benchmark",
    "synergy",
    "ablation",
    "remap",
    "pp",
    "label",
];

fn recipe(label: &str, f: impl FnOnce(&mut KdRecipe)) -> RecipeEntry {
    let mut r = KdRecipe::default();
    f(&mut r);
    RecipeEntry {
        label: label.into(),
        recipe: r,
    }
}

fn student(
    label: &str,
    teacher: &str,
    compression: Compression,
    detector: DetectorConfig,
) -> StudentEntry {
    StudentEntry {
        label: label.into(),
        teacher: teacher.into(),
        compression,
        detector,
    }
}

/// The six default teacher-student pairs: the pillar teacher with three
/// coarser pillar sizes, the voxel teacher with three narrower widths.
pub fn benchmark_students() -> Vec<StudentEntry> {
    let p = DetectorConfig::pillar_teacher;
    let v = DetectorConfig::voxel_teacher;
    vec![
        student(
            "pillar-v1.25",
            "pillar",
            Compression::Input,
            p().with_voxel(1.25),
        ),
        student(
            "pillar-v1.5",
            "pillar",
            Compression::Input,
            p().with_voxel(1.5),
        ),
        student(
            "pillar-v2.0",
            "pillar",
            Compression::Input,
            p().with_voxel(2.0),
        ),
        student(
            "voxel-S",
            "voxel",
            Compression::Width,
            v().with_widths(1.0, 0.5, 0.5),
        ),
        student(
            "voxel-XS",
            "voxel",
            Compression::Width,
            v().with_widths(0.75, 0.5, 0.5),
        ),
        student(
            "voxel-XXS",
            "voxel",
            Compression::Width,
            v().with_widths(0.5, 0.25, 0.25),
        ),
    ]
}

/// Width, depth and input variants of both teachers.
pub fn compression_students() -> Vec<StudentEntry> {
    let p = DetectorConfig::pillar_teacher;
    let v = DetectorConfig::voxel_teacher;
    vec![
        student(
            "pillar-a",
            "pillar",
            Compression::Width,
            p().with_widths(1.0, 0.5, 0.5),
        ),
        student(
            "pillar-b",
            "pillar",
            Compression::Width,
            p().with_widths(0.5, 0.5, 0.5),
        ),
        student(
            "pillar-c",
            "pillar",
            Compression::Depth,
            p().with_depths(1.0, 0.5),
        ),
        student(
            "pillar-d",
            "pillar",
            Compression::Depth,
            p().with_depths(1.0, 0.33),
        ),
        student(
            "pillar-v1.25",
            "pillar",
            Compression::Input,
            p().with_voxel(1.25),
        ),
        student(
            "pillar-v1.5",
            "pillar",
            Compression::Input,
            p().with_voxel(1.5),
        ),
        student(
            "pillar-v2.0",
            "pillar",
            Compression::Input,
            p().with_voxel(2.0),
        ),
        student(
            "voxel-a",
            "voxel",
            Compression::Width,
            v().with_widths(1.0, 0.5, 0.5),
        ),
        student(
            "voxel-b",
            "voxel",
            Compression::Width,
            v().with_widths(0.75, 0.5, 0.5),
        ),
        student(
            "voxel-c",
            "voxel",
            Compression::Width,
            v().with_widths(0.5, 0.5, 0.5),
        ),
        student(
            "voxel-d",
            "voxel",
            Compression::Width,
            v().with_widths(0.5, 0.25, 0.25),
        ),
        student(
            "voxel-e",
            "voxel",
            Compression::Width,
            v().with_widths(0.25, 0.25, 0.25),
        ),
        student(
            "voxel-f",
            "voxel",
            Compression::Depth,
            v().with_depths(0.5, 0.5),
        ),
        student(
            "voxel-g",
            "voxel",
            Compression::Depth,
            v().with_depths(0.33, 0.33),
        ),
        student(
            "voxel-v0.625",
            "voxel",
            Compression::Input,
            v().with_voxel(0.625),
        ),
        student(
            "voxel-v0.75",
            "voxel",
            Compression::Input,
            v().with_voxel(0.75),
        ),
    ]
}

fn pp(r: &mut KdRecipe) {
    r.logit = LogitKind::PpGaussian;
}
fn lbl(r: &mut KdRecipe) {
    r.label = LabelKdMode::Full;
}
fn fg(r: &mut KdRecipe) {
    r.feature = FeatureKind::Fg;
}
fn fna(r: &mut KdRecipe) {
    r.tgi = Some(RemapKind::Fna);
}

/// The proposed combination: Gaussian pivotal positions, label merging
/// and first-channel initialization.
pub fn full_recipe() -> KdRecipe {
    let mut r = KdRecipe::default();
    pp(&mut r);
    lbl(&mut r);
    fna(&mut r);
    r
}

pub fn benchmark_recipes() -> Vec<RecipeEntry> {
    vec![
        recipe("none", |_| {}),
        recipe("kd", |r| r.logit = LogitKind::Vanilla),
        recipe("gid_l", |r| r.logit = LogitKind::GidL),
        recipe("fitnet", |r| r.feature = FeatureKind::Fitnet),
        recipe("mimic", |r| r.feature = FeatureKind::Mimic),
        recipe("fg", fg),
        recipe("gid_f", |r| r.feature = FeatureKind::GidF),
        recipe("label_kd", lbl),
        RecipeEntry {
            label: "full".into(),
            recipe: full_recipe(),
        },
    ]
}

/// Every subset of {pp logit, label, fg feature, fna init}, 16 recipes.
pub fn synergy_recipes() -> Vec<RecipeEntry> {
    let parts: [(&str, fn(&mut KdRecipe)); 4] =
        [("pp", pp), ("label", lbl), ("feat", fg), ("tgi", fna)];
    (0..16usize)
        .map(|mask| {
            let mut r = KdRecipe::default();
            let mut names = Vec::new();
            for (i, (name, f)) in parts.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    f(&mut r);
                    names.push(*name);
                }
            }
            let label = if names.is_empty() {
                "none".to_string()
            } else {
                names.join("+")
            };
            RecipeEntry { label, recipe: r }
        })
        .collect()
}

fn teachers(dir: &Path) -> BTreeMap<String, TeacherSpec> {
    let mk = |d: DetectorConfig, key: &str| TeacherSpec {
        detector: d,
        checkpoint: dir.join("teachers").join(format!("{key}.ckpt.json")),
        train: default_teacher_train(),
    };
    BTreeMap::from([
        (
            "pillar".to_string(),
            mk(DetectorConfig::pillar_teacher(), "pillar"),
        ),
        (
            "voxel".to_string(),
            mk(DetectorConfig::voxel_teacher(), "voxel"),
        ),
    ])
}

fn pick(all: Vec<StudentEntry>, labels: &[&str]) -> Vec<StudentEntry> {
    all.into_iter()
        .filter(|s| labels.contains(&s.label.as_str()))
        .collect()
}

/// A named study. Teacher checkpoints live under `dir/teachers`.
pub fn builtin_matrix(name: &str, dir: &Path) -> Result<MatrixSpec> {
    let (students, recipes) = match name {
        "compression" => (compression_students(), vec![recipe("none", |_| {})]),
        "benchmark" => (benchmark_students(), benchmark_recipes()),
        "synergy" => (
            pick(benchmark_students(), &["voxel-XXS"]),
            synergy_recipes(),
        ),
        "ablation" => (
            pick(benchmark_students(), &["pillar-v2.0", "voxel-XXS"]),
            vec![
                recipe("none", |_| {}),
                recipe("pp", pp),
                recipe("pp+label", |r| {
                    pp(r);
                    lbl(r)
                }),
                RecipeEntry {
                    label: "pp+label+tgi".into(),
                    recipe: full_recipe(),
                },
            ],
        ),
        "remap" => (
            pick(benchmark_students(), &["voxel-XXS"]),
            vec![
                recipe("none", |_| {}),
                recipe("fna", fna),
                recipe("ofa", |r| r.tgi = Some(RemapKind::Ofa)),
                recipe("slim", |r| r.tgi = Some(RemapKind::Slim)),
            ],
        ),
        "pp" => (
            pick(benchmark_students(), &["pillar-v2.0", "voxel-XXS"]),
            vec![
                recipe("none", |_| {}),
                recipe("kd", |r| r.logit = LogitKind::Vanilla),
                recipe("gid_l", |r| r.logit = LogitKind::GidL),
                recipe("pp_confidence", |r| r.logit = LogitKind::PpConfidence),
                recipe("pp_rank", |r| r.logit = LogitKind::PpRank),
                recipe("pp_gaussian", pp),
            ],
        ),
        "label" => (
            pick(benchmark_students(), &["pillar-v1.5", "voxel-XXS"]),
            [
                LabelKdMode::Off,
                LabelKdMode::ClsOnly,
                LabelKdMode::NonOverlap,
                LabelKdMode::NonDuplicate,
                LabelKdMode::Full,
            ]
            .into_iter()
            .map(|m| recipe(&super::run::enum_name(&m), |r| r.label = m))
            .collect(),
        ),
        other => {
            return Err(config_err(format!(
                "unknown study {other}; expected one of {}",
                BUILTIN_STUDIES.join(", ")
            )))
        }
    };
    Ok(MatrixSpec {
        version: CONFIG_VERSION,
        name: name.into(),
        corpus: CorpusSpec::default(),
        teachers: teachers(dir),
        students,
        recipes,
        seeds: DEFAULT_SEEDS.to_vec(),
        train: default_student_train(),
        eval: EvalConfig::default(),
    })
}

impl MatrixSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = toml::from_str(&std::fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(config_err(format!(
                "matrix version {} is not supported",
                self.version
            )));
        }
        if self.students.is_empty() || self.recipes.is_empty() || self.seeds.is_empty() {
            return Err(config_err("matrix needs students, recipes and seeds"));
        }
        for s in &self.students {
            if !self.teachers.contains_key(&s.teacher) {
                return Err(config_err(format!(
                    "{}: unknown teacher {}",
                    s.label, s.teacher
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the named students and recipes; `None` keeps all.
    pub fn restrict(mut self, students: Option<&[&str]>, recipes: Option<&[&str]>) -> Self {
        if let Some(keep) = students {
            self.students.retain(|s| keep.contains(&s.label.as_str()));
        }
        if let Some(keep) = recipes {
            self.recipes.retain(|r| keep.contains(&r.label.as_str()));
        }
        self
    }

    /// Every cell of the matrix, students outermost.
    pub fn cells(&self, out_dir: &Path) -> Vec<Cell> {
        let mut cells = Vec::new();
        for s in &self.students {
            for r in &self.recipes {
                for &seed in &self.seeds {
                    let mut cfg = ExperimentConfig::new(
                        &format!("{}/{}/s{seed}", s.label, r.label),
                        s.detector.clone(),
                    );
                    cfg.corpus = self.corpus.clone();
                    cfg.teacher = Some(self.teachers[&s.teacher].clone());
                    cfg.recipe = r.recipe;
                    cfg.train = TrainSpec { seed, ..self.train };
                    cfg.eval = self.eval;
                    cfg.output_dir = out_dir
                        .join("cells")
                        .join(format!("{}__{}__s{seed}", s.label, r.label));
                    cells.push(Cell {
                        student: s.label.clone(),
                        teacher: s.teacher.clone(),
                        compression: s.compression,
                        recipe: r.label.clone(),
                        seed,
                        config: cfg,
                    });
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub student: String,
    pub teacher: String,
    pub compression: Compression,
    pub recipe: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub enum CellStatus {
    Ran(Box<RunResult>),
    Resumed(Box<RunResult>),
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: Cell,
    pub status: CellStatus,
}

impl CellOutcome {
    pub fn result(&self) -> Option<&RunResult> {
        match &self.status {
            CellStatus::Ran(r) | CellStatus::Resumed(r) => Some(r),
            CellStatus::Failed(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    /// Re-run cells whose stored result came from a different config.
    pub force: bool,
    /// Print one line per cell to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: String,
    pub out_dir: PathBuf,
    pub outcomes: Vec<CellOutcome>,
    pub teachers: BTreeMap<String, super::run::TeacherSummary>,
}

impl SuiteReport {
    pub fn failures(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| o.result().is_none())
            .count()
    }

    /// Results of one student/recipe pair over all seeds, in seed order.
    pub fn results(&self, student: &str, recipe: &str) -> Vec<&RunResult> {
        self.outcomes
            .iter()
            .filter(|o| o.cell.student == student && o.cell.recipe == recipe)
            .filter_map(CellOutcome::result)
            .collect()
    }

    pub fn mean_map(&self, student: &str, recipe: &str) -> Option<f64> {
        let r = self.results(student, recipe);
        (!r.is_empty()).then(|| r.iter().map(|x| x.map.mean).sum::<f64>() / r.len() as f64)
    }

    pub fn map_for_seed(&self, student: &str, recipe: &str, seed: u64) -> Option<f64> {
        self.results(student, recipe)
            .into_iter()
            .find(|r| r.seed == seed)
            .map(|r| r.map.mean)
    }
}

/// Runs every cell, training missing teachers first. Cells already
/// finished with the same config hash are read back instead of re-run.
/// Failures are recorded per cell and the suite continues.
pub fn run_suite(spec: &MatrixSpec, out_dir: &Path, opts: SuiteOptions) -> Result<SuiteReport> {
    spec.validate()?;
    let mut loaded: BTreeMap<String, Teacher> = BTreeMap::new();
    let mut teacher_errors: BTreeMap<String, String> = BTreeMap::new();
    for key in spec.students.iter().map(|s| &s.teacher) {
        if loaded.contains_key(key) || teacher_errors.contains_key(key) {
            continue;
        }
        match ensure_teacher(&spec.teachers[key], &spec.corpus, &spec.eval) {
            Ok(t) => {
                loaded.insert(key.clone(), t);
            }
            Err(e) => {
                teacher_errors.insert(key.clone(), format!("teacher {key}: {e}"));
            }
        }
    }
    let mut outcomes = Vec::new();
    for cell in spec.cells(out_dir) {
        let status = run_cell(
            &cell,
            loaded.get(&cell.teacher),
            teacher_errors.get(&cell.teacher),
            opts,
        );
        if opts.verbose {
            let what = match &status {
                CellStatus::Ran(r) => {
                    format!("ran     map {:.4} ({:.1}s)", r.map.mean, r.wall_clock_s)
                }
                CellStatus::Resumed(r) => format!("resumed map {:.4}", r.map.mean),
                CellStatus::Failed(e) => format!("FAILED  {e}"),
            };
            eprintln!("[{}] {} {what}", spec.name, cell.config.name);
        }
        outcomes.push(CellOutcome { cell, status });
    }
    let report = SuiteReport {
        name: spec.name.clone(),
        out_dir: out_dir.to_path_buf(),
        outcomes,
        teachers: loaded
            .iter()
            .map(|(k, t)| (k.clone(), t.summary.clone()))
            .collect(),
    };
    write_tables(&report)?;
    Ok(report)
}

fn run_cell(
    cell: &Cell,
    teacher: Option<&Teacher>,
    teacher_err: Option<&String>,
    opts: SuiteOptions,
) -> CellStatus {
    let dir = &cell.config.output_dir;
    let hash = cell.config.hash();
    match existing_hash(dir) {
        Ok(Some(h)) if h == hash => {
            return match read_result(dir) {
                Ok(r) => CellStatus::Resumed(Box::new(r)),
                Err(e) => CellStatus::Failed(e.to_string()),
            }
        }
        Ok(Some(h)) if !opts.force => {
            return CellStatus::Failed(
                Error::Provenance {
                    path: dir.clone(),
                    existing: h,
                    requested: hash,
                }
                .to_string(),
            )
        }
        Err(e) if !opts.force => return CellStatus::Failed(e.to_string()),
        _ => {}
    }
    if let Some(e) = teacher_err {
        return CellStatus::Failed(e.clone());
    }
    let run_opts = RunOptions {
        force: true,
        dry: false,
        save_checkpoint: true,
    };
    match run_with_teacher(&cell.config, teacher, run_opts) {
        Ok(r) => CellStatus::Ran(Box::new(r)),
        Err(e) => CellStatus::Failed(e.to_string()),
    }
}

/// One cell as a table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub student: String,
    pub teacher: String,
    pub compression: String,
    pub recipe: String,
    pub seed: u64,
    pub status: String,
    pub map: Option<f64>,
    pub acts: Option<u64>,
    pub flops: Option<u64>,
    pub params: Option<u64>,
    pub teacher_map: Option<f64>,
    pub teacher_acts: Option<u64>,
    pub cpr: Option<f64>,
    pub config_hash: String,
    pub error: String,
}

/// Mean ± standard deviation over seeds of one student/recipe pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub student: String,
    pub teacher: String,
    pub compression: String,
    pub recipe: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub map_mean: Option<f64>,
    pub map_std: Option<f64>,
    pub cpr_mean: Option<f64>,
    pub cpr_std: Option<f64>,
    pub acts: Option<u64>,
    pub flops: Option<u64>,
    pub params: Option<u64>,
    pub teacher_map: Option<f64>,
    pub teacher_acts: Option<u64>,
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (Some(m), Some(var.sqrt()))
}

fn compression_name(c: Compression) -> String {
    super::run::enum_name(&c)
}

pub fn cell_rows(report: &SuiteReport) -> Vec<CellRow> {
    report
        .outcomes
        .iter()
        .map(|o| {
            let r = o.result();
            let (status, error) = match &o.status {
                CellStatus::Ran(_) => ("ran", String::new()),
                CellStatus::Resumed(_) => ("resumed", String::new()),
                CellStatus::Failed(e) => ("failed", e.clone()),
            };
            CellRow {
                student: o.cell.student.clone(),
                teacher: o.cell.teacher.clone(),
                compression: compression_name(o.cell.compression),
                recipe: o.cell.recipe.clone(),
                seed: o.cell.seed,
                status: status.into(),
                map: r.map(|r| r.map.mean),
                acts: r.map(|r| r.efficiency.acts),
                flops: r.map(|r| r.efficiency.macs),
                params: r.map(|r| r.efficiency.params),
                teacher_map: r.and_then(|r| r.teacher.as_ref()).map(|t| t.map.mean),
                teacher_acts: r.and_then(|r| r.teacher.as_ref()).map(|t| t.acts),
                cpr: r.and_then(|r| r.cpr.as_ref()).map(|c| c.value),
                config_hash: o.cell.config.hash(),
                error,
            }
        })
        .collect()
}

pub fn summary_rows(report: &SuiteReport) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    for o in &report.outcomes {
        let key = (o.cell.student.clone(), o.cell.recipe.clone());
        if !order.contains(&key) {
            order.push(key);
        }
    }
    order
        .into_iter()
        .map(|(student, recipe)| {
            let cells: Vec<&CellOutcome> = report
                .outcomes
                .iter()
                .filter(|o| o.cell.student == student && o.cell.recipe == recipe)
                .collect();
            let ok: Vec<&RunResult> = cells.iter().filter_map(|o| o.result()).collect();
            let maps: Vec<f64> = ok.iter().map(|r| r.map.mean).collect();
            let cprs: Vec<f64> = ok
                .iter()
                .filter_map(|r| r.cpr.as_ref())
                .map(|c| c.value)
                .collect();
            let (map_mean, map_std) = mean_std(&maps);
            let (cpr_mean, cpr_std) = mean_std(&cprs);
            let first = ok.first();
            SummaryRow {
                teacher: cells[0].cell.teacher.clone(),
                compression: compression_name(cells[0].cell.compression),
                student,
                recipe,
                seeds_ok: ok.len(),
                seeds_failed: cells.len() - ok.len(),
                map_mean,
                map_std,
                cpr_mean,
                cpr_std,
                acts: first.map(|r| r.efficiency.acts),
                flops: first.map(|r| r.efficiency.macs),
                params: first.map(|r| r.efficiency.params),
                teacher_map: first.and_then(|r| r.teacher.as_ref()).map(|t| t.map.mean),
                teacher_acts: first.and_then(|r| r.teacher.as_ref()).map(|t| t.acts),
            }
        })
        .collect()
}

/// Recomputes each row's CPR from its acts and accuracy columns and returns
/// the largest deviation from the stored CPR.
pub fn cpr_consistency(rows: &[CellRow]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for r in rows {
        let (Some(a), Some(ta), Some(m), Some(tm), Some(c)) =
            (r.acts, r.teacher_acts, r.map, r.teacher_map, r.cpr)
        else {
            continue;
        };
        let again = cpr(CprInput {
            acts_s: a as f64,
            acts_t: ta as f64,
            maph_s: m,
            maph_t: tm,
        })?;
        worst = worst.max((again.value - c).abs());
    }
    Ok(worst)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

pub fn markdown_summary(report: &SuiteReport) -> String {
    let mut md = String::new();
    writeln!(md, "# {}\n", report.name).ok();
    writeln!(
        md,
        "code version {CODE_VERSION}; metric toy-mAP; acts and flops per scene\n"
    )
    .ok();
    for (k, t) in &report.teachers {
        writeln!(
            md,
            "- teacher {k}: toy-mAP {:.4}, acts {}, flops {}",
            t.map.mean, t.acts, t.macs
        )
        .ok();
    }
    writeln!(md).ok();
    writeln!(
        md,
        "| student | compression | recipe | seeds | toy-mAP | CPR | acts | flops |"
    )
    .ok();
    writeln!(md, "|---|---|---|---|---|---|---|---|").ok();
    for r in summary_rows(report) {
        writeln!(
            md,
            "| {} | {} | {} | {}/{} | {} ± {} | {} ± {} | {} | {} |",
            r.student,
            r.compression,
            r.recipe,
            r.seeds_ok,
            r.seeds_ok + r.seeds_failed,
            fmt_opt(r.map_mean, 4),
            fmt_opt(r.map_std, 4),
            fmt_opt(r.cpr_mean, 3),
            fmt_opt(r.cpr_std, 3),
            r.acts.map_or("-".into(), |v| v.to_string()),
            r.flops.map_or("-".into(), |v| v.to_string()),
        )
        .ok();
    }
    let failed: Vec<&CellOutcome> = report
        .outcomes
        .iter()
        .filter(|o| o.result().is_none())
        .collect();
    if !failed.is_empty() {
        writeln!(md, "\n## Failed cells\n").ok();
        for o in failed {
            if let CellStatus::Failed(e) = &o.status {
                writeln!(md, "- {}: {e}", o.cell.config.name).ok();
            }
        }
    }
    md
}

/// Writes `<name>.csv` (summary), `<name>_cells.csv` and `<name>.md`.
pub fn write_tables(report: &SuiteReport) -> Result<()> {
    std::fs::create_dir_all(&report.out_dir)?;
    let dir = &report.out_dir;
    write_rows(
        &dir.join(format!("{}.csv", report.name)),
        &summary_rows(report),
    )?;
    write_rows(
        &dir.join(format!("{}_cells.csv", report.name)),
        &cell_rows(report),
    )?;
    std::fs::write(
        dir.join(format!("{}.md", report.name)),
        markdown_summary(report),
    )?;
    Ok(())
}
