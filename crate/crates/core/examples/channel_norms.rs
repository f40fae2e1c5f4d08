//! Compares per-channel backbone L1 norms of a trained network with a
//! freshly initialized one.

use bevkd::bench::{train_teacher, CorpusSpec, TeacherSpec, TrainSpec};
use bevkd::detector::{Detector, DetectorConfig};
use bevkd::eval::EvalConfig;
use bevkd::kd::norms::channel_norms;
use bevkd::scene::{generate_corpus, SceneConfig};

fn main() -> bevkd::Result<()> {
    let cfg = DetectorConfig::pillar_teacher().with_voxel(1.5);
    let spec = TeacherSpec {
        detector: cfg.clone(),
        checkpoint: std::env::temp_dir().join("bevkd_norms.ckpt.json"),
        train: TrainSpec {
            epochs: 8,
            ..TrainSpec::default()
        },
    };
    let corpus = CorpusSpec {
        train_scenes: 32,
        eval_scenes: 8,
        ..CorpusSpec::default()
    };
    let trained = train_teacher(&spec, &corpus, &EvalConfig::default(), true)?.detector;
    let fresh = Detector::build(&cfg, 0)?;
    let scenes = generate_corpus(42, 4, &SceneConfig::default())?;
    let a = channel_norms(&fresh, &scenes)?;
    let b = channel_norms(&trained, &scenes)?;
    println!("channel  initial   trained");
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        println!("{i:>7}  {x:>7.4}  {y:>8.4}");
    }
    Ok(())
}
