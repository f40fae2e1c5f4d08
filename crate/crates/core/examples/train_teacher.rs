//! Trains a small voxel-like teacher, stores it with its provenance and
//! loads it back frozen. Pass an epoch count to train longer.

use bevkd::bench::{load_teacher, train_teacher, CorpusSpec, TeacherSpec, TrainSpec};
use bevkd::detector::DetectorConfig;
use bevkd::eval::EvalConfig;

fn main() -> bevkd::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(10);
    let corpus = CorpusSpec {
        train_scenes: 32,
        eval_scenes: 16,
        ..CorpusSpec::default()
    };
    let spec = TeacherSpec {
        detector: DetectorConfig::voxel_teacher(),
        checkpoint: std::env::temp_dir().join("bevkd_example_teacher.ckpt.json"),
        train: TrainSpec {
            epochs,
            ..TrainSpec::default()
        },
    };
    let trained = train_teacher(&spec, &corpus, &EvalConfig::default(), true)?;
    println!(
        "trained teacher: {}",
        serde_json::to_string_pretty(&trained.summary)?
    );

    let loaded = load_teacher(&spec, &corpus)?;
    assert!(loaded.detector.store.is_frozen());
    println!(
        "reloaded from {} (hash {})",
        spec.checkpoint.display(),
        loaded.summary.hash
    );

    let mut other = spec.clone();
    other.train.epochs += 1;
    match load_teacher(&other, &corpus) {
        Err(e) => println!("a different spec is refused: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
