use std::path::Path;

use bevkd::bench::plot::{scatter_csv, scatter_points, SCATTER_CSV};
use bevkd::bench::run::{read_result, RESULT_FILE};
use bevkd::bench::suite::{builtin_matrix, full_recipe, Compression, RecipeEntry, StudentEntry};
use bevkd::bench::suite::{CellStatus, DEFAULT_SEEDS};
use bevkd::bench::{
    emit_plot_data, ensure_teacher, run, run_suite, run_with_teacher, CorpusSpec, ExperimentConfig,
    MatrixSpec, RunOptions, SuiteOptions, Teacher, TeacherSpec, TrainSpec, CONFIG_VERSION,
};
use bevkd::detector::DetectorConfig;
use bevkd::kd::{FeatureKind, KdRecipe, LogitKind, RemapKind};
use bevkd::Error;
use tempfile::TempDir;

fn corpus() -> CorpusSpec {
    CorpusSpec {
        train_scenes: 12,
        eval_scenes: 8,
        ..CorpusSpec::default()
    }
}

fn teacher_spec(dir: &Path) -> TeacherSpec {
    TeacherSpec {
        detector: DetectorConfig::pillar_teacher(),
        checkpoint: dir.join("teacher.ckpt.json"),
        train: TrainSpec {
            epochs: 12,
            ..TrainSpec::default()
        },
    }
}

fn setup(dir: &Path) -> (ExperimentConfig, Teacher) {
    let spec = teacher_spec(dir);
    let mut cfg = ExperimentConfig::new("h", DetectorConfig::pillar_teacher().with_voxel(1.5));
    cfg.corpus = corpus();
    cfg.teacher = Some(spec.clone());
    cfg.train.epochs = 2;
    cfg.output_dir = dir.join("run");
    let teacher = ensure_teacher(&spec, &cfg.corpus, &cfg.eval).unwrap();
    (cfg, teacher)
}

const DRY: RunOptions = RunOptions {
    force: false,
    dry: true,
    save_checkpoint: false,
};

#[test]
fn same_config_twice_gives_identical_results() {
    let dir = TempDir::new().unwrap();
    let (mut cfg, teacher) = setup(dir.path());
    cfg.recipe = KdRecipe {
        feature: FeatureKind::GidF,
        ..full_recipe()
    };
    let a = run_with_teacher(&cfg, Some(&teacher), DRY).unwrap();
    let b = run_with_teacher(&cfg, Some(&teacher), DRY).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
    assert!(a.train.epochs.iter().all(|e| e.total.is_finite()));
}

#[test]
fn empty_recipe_equals_plain_training() {
    let dir = TempDir::new().unwrap();
    let (cfg, teacher) = setup(dir.path());
    let with = run_with_teacher(&cfg, Some(&teacher), DRY).unwrap();
    let mut plain_cfg = cfg.clone();
    plain_cfg.teacher = None;
    let plain = run_with_teacher(&plain_cfg, None, DRY).unwrap();
    assert_eq!(with.map, plain.map);
    assert_eq!(with.train, plain.train);
    assert!(with.cpr.is_some() && plain.cpr.is_none());
}

#[test]
fn self_distillation_without_training_keeps_teacher_accuracy() {
    let dir = TempDir::new().unwrap();
    let (mut cfg, teacher) = setup(dir.path());
    assert!(teacher.summary.map.mean > 0.0);
    cfg.student = DetectorConfig::pillar_teacher();
    cfg.recipe = KdRecipe {
        tgi: Some(RemapKind::Fna),
        ..KdRecipe::default()
    };
    cfg.train.epochs = 0;
    let r = run_with_teacher(&cfg, Some(&teacher), DRY).unwrap();
    assert_eq!(r.train.steps, 0);
    assert_eq!(r.map.mean, teacher.summary.map.mean);
    assert_eq!(r.cpr.unwrap().value, 0.5);
}

#[test]
fn missing_teacher_fails_before_training() {
    let dir = TempDir::new().unwrap();
    let mut cfg = ExperimentConfig::new("m", DetectorConfig::pillar_teacher().with_voxel(1.5));
    cfg.corpus = corpus();
    cfg.teacher = Some(teacher_spec(&dir.path().join("nowhere")));
    cfg.recipe.logit = LogitKind::Vanilla;
    cfg.output_dir = dir.path().join("out");
    match run(&cfg, RunOptions::default()) {
        Err(Error::MissingTeacher(p)) => assert!(p.ends_with("teacher.ckpt.json")),
        other => panic!("{other:?}"),
    }
    assert!(!cfg.output_dir.exists());
}

#[test]
fn results_refuse_foreign_overwrite_unless_forced() {
    let dir = TempDir::new().unwrap();
    let (mut cfg, _) = setup(dir.path());
    cfg.train.epochs = 1;
    let first = run(&cfg, RunOptions::default()).unwrap();
    assert_eq!(read_result(&cfg.output_dir).unwrap(), first);
    let text = std::fs::read_to_string(cfg.output_dir.join(RESULT_FILE)).unwrap();
    assert!(text.contains(&first.config_hash) && text.contains("code_version"));

    cfg.train.seed = 9;
    match run(&cfg, RunOptions::default()) {
        Err(Error::Provenance { existing, .. }) => assert_eq!(existing, first.config_hash),
        other => panic!("{other:?}"),
    }
    let forced = run(
        &cfg,
        RunOptions {
            force: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_ne!(forced.config_hash, first.config_hash);

    let mut stale = teacher_spec(dir.path());
    stale.train.epochs += 1;
    cfg.teacher = Some(stale);
    let forced = RunOptions {
        force: true,
        ..RunOptions::default()
    };
    assert!(matches!(run(&cfg, forced), Err(Error::StaleTeacher { .. })));
}

fn one_cell_matrix(dir: &Path) -> MatrixSpec {
    let spec = teacher_spec(dir);
    MatrixSpec {
        version: CONFIG_VERSION,
        name: "single".into(),
        corpus: corpus(),
        teachers: [("pillar".to_string(), spec)].into(),
        students: vec![StudentEntry {
            label: "v1.5".into(),
            teacher: "pillar".into(),
            compression: Compression::Input,
            detector: DetectorConfig::pillar_teacher().with_voxel(1.5),
        }],
        recipes: vec![RecipeEntry {
            label: "pp".into(),
            recipe: KdRecipe {
                logit: LogitKind::PpGaussian,
                ..KdRecipe::default()
            },
        }],
        seeds: vec![3],
        train: TrainSpec {
            epochs: 2,
            ..TrainSpec::default()
        },
        eval: Default::default(),
    }
}

#[test]
fn single_cell_suite_matches_run_and_resumes() {
    let dir = TempDir::new().unwrap();
    let spec = one_cell_matrix(dir.path());
    let out = dir.path().join("suite");
    let report = run_suite(&spec, &out, SuiteOptions::default()).unwrap();
    assert_eq!(report.outcomes.len(), 1);
    let cell = &report.outcomes[0];
    assert!(matches!(cell.status, CellStatus::Ran(_)));
    let direct = run(&cell.cell.config, DRY).unwrap();
    assert_eq!(
        cell.result().unwrap().without_timing(),
        direct.without_timing()
    );

    let table = std::fs::read_to_string(out.join("single.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(out.join("single.md").exists());

    let again = run_suite(&spec, &out, SuiteOptions::default()).unwrap();
    assert!(matches!(again.outcomes[0].status, CellStatus::Resumed(_)));
    assert_eq!(again.outcomes[0].result(), cell.result());
}

#[test]
fn failed_cells_are_recorded_and_the_suite_continues() {
    let dir = TempDir::new().unwrap();
    let mut spec = one_cell_matrix(dir.path());
    let mut broken = spec.students[0].clone();
    broken.label = "depth".into();
    broken.detector = DetectorConfig::pillar_teacher().with_depths(1.0, 0.5);
    spec.students.push(broken);
    spec.recipes[0].recipe.tgi = Some(RemapKind::Fna);
    let report = run_suite(&spec, &dir.path().join("s"), SuiteOptions::default()).unwrap();
    assert_eq!(report.failures(), 1);
    assert!(report.outcomes[0].result().is_some());
    match &report.outcomes[1].status {
        CellStatus::Failed(e) => assert!(e.contains("topology")),
        other => panic!("{other:?}"),
    }
}

/// Independent CPR: read the written cell table and recompute each row.
#[test]
fn cpr_column_recomputes_from_raw_columns() {
    let dir = TempDir::new().unwrap();
    let mut spec = one_cell_matrix(dir.path());
    spec.seeds = vec![0, 1];
    let out = dir.path().join("suite");
    run_suite(&spec, &out, SuiteOptions::default()).unwrap();
    let mut rdr = csv::Reader::from_path(out.join("single_cells.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let f = |name: &str| rec[col(name)].parse::<f64>().unwrap();
        let want = 0.5 * (1.0 - f("acts") / f("teacher_acts"))
            + 0.5 * (f("map") / f("teacher_map")).powi(3);
        assert!((want - f("cpr")).abs() < 1e-9, "{want} vs {}", f("cpr"));
        rows += 1;
    }
    assert_eq!(rows, 2);
}

#[test]
fn scatter_data_regenerates_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let mut spec = one_cell_matrix(dir.path());
    spec.seeds = vec![0, 1];
    let out = dir.path().join("suite");
    run_suite(&spec, &out, SuiteOptions::default()).unwrap();
    let plots = dir.path().join("plots");
    let summary = emit_plot_data(&out, &plots, true).unwrap();
    assert_eq!(summary.points, 2);
    assert!(!summary.norm_files.is_empty());
    let written = std::fs::read(plots.join(SCATTER_CSV)).unwrap();
    assert_eq!(
        scatter_csv(&scatter_points(&out).unwrap())
            .unwrap()
            .into_bytes(),
        written
    );
    emit_plot_data(&out, &plots, false).unwrap();
    assert_eq!(std::fs::read(plots.join(SCATTER_CSV)).unwrap(), written);

    // Each point carries its run's flops and accuracy.
    let mut rdr = csv::Reader::from_reader(written.as_slice());
    for rec in rdr.deserialize::<std::collections::HashMap<String, String>>() {
        let rec = rec.unwrap();
        let run_dir = out.join("cells").join(&rec["run"].replace("cells__", ""));
        let r = read_result(&run_dir).unwrap();
        assert_eq!(rec["flops"], r.efficiency.macs.to_string());
        assert_eq!(rec["map"].parse::<f64>().unwrap(), r.map.mean);
    }
}

#[test]
fn empty_results_give_header_only_files() {
    let dir = TempDir::new().unwrap();
    let plots = dir.path().join("plots");
    let s = emit_plot_data(dir.path(), &plots, true).unwrap();
    assert_eq!(s.points, 0);
    let text = std::fs::read_to_string(plots.join(SCATTER_CSV)).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("run,"));
}

#[test]
fn builtin_studies_have_the_expected_shape() {
    let dir = Path::new("unused");
    let synergy = builtin_matrix("synergy", dir).unwrap();
    assert_eq!(synergy.recipes.len(), 16);
    assert_eq!(synergy.cells(dir).len(), 16 * DEFAULT_SEEDS.len());
    let bench = builtin_matrix("benchmark", dir).unwrap();
    assert_eq!(bench.students.len(), 6);
    assert!(builtin_matrix("nope", dir).is_err());
}
