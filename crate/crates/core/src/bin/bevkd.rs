use std::path::PathBuf;
use std::process::ExitCode;

use bevkd::bench::suite::{
    benchmark_students, compression_students, default_student_train, default_teacher_train,
    StudentEntry,
};
use bevkd::bench::{
    builtin_matrix, emit_plot_data, run, run_suite, train_teacher, CorpusSpec, ExperimentConfig,
    MatrixSpec, RunOptions, SuiteOptions, TeacherSpec,
};
use bevkd::detector::{Detector, DetectorConfig, Family};
use bevkd::eval::EvalConfig;
use bevkd::metrics::{efficiency_report, format_table};
use bevkd::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "bevkd",
    version,
    about = "Knowledge distillation benchmark for toy BEV detectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher and write its checkpoint.
    TrainTeacher(TrainTeacherArgs),
    /// Train and evaluate one student from a config file.
    Run(RunArgs),
    /// Run a study matrix and write its tables.
    Suite(SuiteArgs),
    /// Print parameter, flop and activation counts.
    Profile(ProfileArgs),
    /// Collect scatter and channel-norm data from finished runs.
    PlotData(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Pillar,
    Voxel,
}

#[derive(Args)]
struct TrainTeacherArgs {
    /// Built-in teacher architecture.
    #[arg(long, value_enum, conflicts_with = "config")]
    family: Option<FamilyArg>,
    /// Experiment config whose teacher section and corpus are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path; defaults to teachers/<family>.ckpt.json.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite a checkpoint trained from a different spec.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long, required_unless_present = "template")]
    config: Option<PathBuf>,
    /// Print a config for a built-in student label and exit.
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite results written from a different config.
    #[arg(long)]
    force: bool,
    /// Keep the trained student checkpoint.
    #[arg(long)]
    save_checkpoint: bool,
}

#[derive(Args)]
struct SuiteArgs {
    /// Built-in study: compression, benchmark, synergy, ablation, remap, pp, label.
    #[arg(long, required_unless_present = "matrix", conflicts_with = "matrix")]
    name: Option<String>,
    /// Matrix spec file (TOML).
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Comma-separated subset of student labels.
    #[arg(long, value_delimiter = ',')]
    students: Option<Vec<String>>,
    /// Comma-separated subset of recipe labels.
    #[arg(long, value_delimiter = ',')]
    recipes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Re-run cells whose stored result came from a different config.
    #[arg(long)]
    force: bool,
    /// Exit successfully even when cells failed.
    #[arg(long)]
    keep_going: bool,
    /// Print the matrix spec as TOML and exit.
    #[arg(long)]
    print_spec: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ProfileArgs {
    /// Built-in model labels: pillar, voxel or any student label.
    #[arg(long, value_delimiter = ',', required_unless_present = "config")]
    preset: Vec<String>,
    /// Profile the teacher and student of an experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report flops as two per multiply-accumulate.
    #[arg(long)]
    flops_x2: bool,
    /// Time this many forward passes after two warm-up passes.
    #[arg(long)]
    latency: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Directory searched recursively for run results.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also export per-channel backbone norms.
    #[arg(long)]
    norms: bool,
}

fn teacher_config(f: FamilyArg) -> DetectorConfig {
    match f {
        FamilyArg::Pillar => DetectorConfig::pillar_teacher(),
        FamilyArg::Voxel => DetectorConfig::voxel_teacher(),
    }
}

fn family_key(f: Family) -> &'static str {
    match f {
        Family::PillarLike => "pillar",
        Family::VoxelLike => "voxel",
    }
}

fn find_student(label: &str) -> Option<StudentEntry> {
    compression_students()
        .into_iter()
        .chain(benchmark_students())
        .find(|s| s.label == label)
}

fn preset(label: &str) -> Result<DetectorConfig> {
    match label {
        "pillar" => Ok(DetectorConfig::pillar_teacher()),
        "voxel" => Ok(DetectorConfig::voxel_teacher()),
        _ => find_student(label)
            .map(|s| s.detector)
            .ok_or_else(|| Error::Usage(format!("unknown model label {label}"))),
    }
}

fn train_teacher_cmd(a: TrainTeacherArgs) -> Result<()> {
    let (mut spec, corpus, eval) = match (&a.config, a.family) {
        (Some(path), _) => {
            let cfg = ExperimentConfig::load(path)?;
            let spec = cfg.teacher.ok_or_else(|| {
                Error::Usage(format!("{} has no teacher section", path.display()))
            })?;
            (spec, cfg.corpus, cfg.eval)
        }
        (None, Some(f)) => {
            let detector = teacher_config(f);
            let key = family_key(detector.family);
            let spec = TeacherSpec {
                checkpoint: PathBuf::from("teachers").join(format!("{key}.ckpt.json")),
                detector,
                train: default_teacher_train(),
            };
            (spec, CorpusSpec::default(), EvalConfig::default())
        }
        (None, None) => return Err(Error::Usage("pass --family or --config".into())),
    };
    if let Some(p) = a.checkpoint {
        spec.checkpoint = p;
    }
    if let Some(e) = a.epochs {
        spec.train.epochs = e;
    }
    if let Some(s) = a.seed {
        spec.train.seed = s;
    }
    let t = train_teacher(&spec, &corpus, &eval, a.force)?;
    println!("{}", serde_json::to_string_pretty(&t.summary)?);
    eprintln!("checkpoint: {}", spec.checkpoint.display());
    Ok(())
}

fn template(label: &str) -> Result<String> {
    let s = find_student(label)
        .ok_or_else(|| Error::Usage(format!("unknown student label {label}")))?;
    let mut cfg = ExperimentConfig::new(label, s.detector);
    cfg.train = default_student_train();
    let detector = preset(&s.teacher)?;
    cfg.teacher = Some(TeacherSpec {
        detector,
        checkpoint: PathBuf::from("teachers").join(format!("{}.ckpt.json", s.teacher)),
        train: default_teacher_train(),
    });
    cfg.to_toml()
}

fn run_cmd(a: RunArgs) -> Result<()> {
    if let Some(label) = &a.template {
        print!("{}", template(label)?);
        return Ok(());
    }
    let path = a.config.expect("clap enforces --config");
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    let r = run(
        &cfg,
        RunOptions {
            force: a.force,
            dry: false,
            save_checkpoint: a.save_checkpoint,
        },
    )?;
    let cpr = r
        .cpr
        .as_ref()
        .map_or("-".to_string(), |c| format!("{:.3}", c.value));
    println!(
        "{}: toy-mAP {:.4}  acts {}  CPR {cpr}  ({:.1}s) -> {}",
        cfg.name,
        r.map.mean,
        r.efficiency.acts,
        r.wall_clock_s,
        cfg.output_dir.display()
    );
    Ok(())
}

fn suite_cmd(a: SuiteArgs) -> Result<bool> {
    let mut spec = match (&a.name, &a.matrix) {
        (Some(name), _) => builtin_matrix(name, &a.out)?,
        (None, Some(path)) => MatrixSpec::load(path)?,
        (None, None) => return Err(Error::Usage("pass --name or --matrix".into())),
    };
    let students: Option<Vec<&str>> = a
        .students
        .as_ref()
        .map(|v| v.iter().map(String::as_str).collect());
    let recipes: Option<Vec<&str>> = a
        .recipes
        .as_ref()
        .map(|v| v.iter().map(String::as_str).collect());
    spec = spec.restrict(students.as_deref(), recipes.as_deref());
    if let Some(s) = a.seeds {
        spec.seeds = s;
    }
    if let Some(e) = a.epochs {
        spec.train.epochs = e;
    }
    if a.print_spec {
        print!("{}", toml::to_string(&spec)?);
        return Ok(true);
    }
    let report = run_suite(
        &spec,
        &a.out,
        SuiteOptions {
            force: a.force,
            verbose: !a.quiet,
        },
    )?;
    print!("{}", bevkd::bench::suite::markdown_summary(&report));
    let failed = report.failures();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", report.outcomes.len());
    }
    Ok(failed == 0 || a.keep_going)
}

fn profile_cmd(a: ProfileArgs) -> Result<()> {
    let mut models: Vec<(String, DetectorConfig)> = Vec::new();
    if let Some(path) = &a.config {
        let cfg = ExperimentConfig::load(path)?;
        if let Some(t) = cfg.teacher {
            models.push(("teacher".into(), t.detector));
        }
        models.push((cfg.name.clone(), cfg.student));
    }
    for label in &a.preset {
        models.push((label.clone(), preset(label)?));
    }
    let latency = a.latency.map(|n| (n, 2));
    let mut rows = Vec::new();
    for (name, cfg) in models {
        let det = Detector::build(&cfg, 0)?;
        let mut report = efficiency_report(&det, latency)?;
        if a.flops_x2 {
            report.macs = report.flops(true);
            report.notes[0] = "flops count multiply and add separately".into();
        }
        rows.push((name, report, None, None));
    }
    if a.json {
        let out: Vec<_> = rows
            .iter()
            .map(|(n, r, _, _)| serde_json::json!({ "model": n, "report": r }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        print!("{}", format_table(&rows));
        for (name, r, _, _) in &rows {
            if let Some(l) = &r.latency {
                println!(
                    "{name}: {:.2} ± {:.2} ms over {} passes",
                    l.mean_ms, l.std_ms, l.repeats
                );
            }
        }
    }
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let s = emit_plot_data(&a.results, &a.out, a.norms)?;
    println!("{} scatter points -> {}", s.points, a.out.display());
    for f in &s.norm_files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::TrainTeacher(a) => train_teacher_cmd(a).map(|_| true),
        Command::Run(a) => run_cmd(a).map(|_| true),
        Command::Suite(a) => suite_cmd(a),
        Command::Profile(a) => profile_cmd(a).map(|_| true),
        Command::PlotData(a) => plot_cmd(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
