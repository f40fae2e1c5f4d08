//! Trains one teacher and distils it into the narrowest voxel student with
//! several recipes, printing accuracy and CPR per recipe.

use bevkd::bench::suite::full_recipe;
use bevkd::bench::{
    ensure_teacher, run_with_teacher, CorpusSpec, ExperimentConfig, RunOptions, TeacherSpec,
    TrainSpec,
};
use bevkd::detector::DetectorConfig;
use bevkd::kd::{FeatureKind, KdRecipe, LogitKind};

fn main() -> bevkd::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(15);
    let corpus = CorpusSpec {
        train_scenes: 32,
        eval_scenes: 16,
        ..CorpusSpec::default()
    };
    let teacher_spec = TeacherSpec {
        detector: DetectorConfig::voxel_teacher(),
        checkpoint: std::env::temp_dir().join("bevkd_distill_teacher.ckpt.json"),
        train: TrainSpec {
            epochs: 2 * epochs,
            ..TrainSpec::default()
        },
    };
    let mut base = ExperimentConfig::new(
        "distill",
        DetectorConfig::voxel_teacher().with_widths(0.5, 0.25, 0.25),
    );
    base.corpus = corpus;
    base.teacher = Some(teacher_spec.clone());
    base.train.epochs = epochs;
    let teacher = ensure_teacher(&teacher_spec, &base.corpus, &base.eval)?;
    println!(
        "teacher toy-mAP {:.4}, acts {}",
        teacher.summary.map.mean, teacher.summary.acts
    );

    let recipes: Vec<(&str, KdRecipe)> = vec![
        ("none", KdRecipe::default()),
        (
            "vanilla logit",
            KdRecipe {
                logit: LogitKind::Vanilla,
                ..KdRecipe::default()
            },
        ),
        (
            "foreground feature",
            KdRecipe {
                feature: FeatureKind::Fg,
                ..KdRecipe::default()
            },
        ),
        (
            "gid feature",
            KdRecipe {
                feature: FeatureKind::GidF,
                ..KdRecipe::default()
            },
        ),
        ("pp + label + tgi", full_recipe()),
    ];
    for (name, recipe) in recipes {
        let mut cfg = base.clone();
        cfg.recipe = recipe;
        let r = run_with_teacher(
            &cfg,
            Some(&teacher),
            RunOptions {
                dry: true,
                ..RunOptions::default()
            },
        )?;
        let last = r.train.epochs.last().copied().unwrap_or_default();
        println!(
            "{name:<20} toy-mAP {:.4}  CPR {:.3}  final loss {:.4}",
            r.map.mean,
            r.cpr.as_ref().map_or(f64::NAN, |c| c.value),
            last.total
        );
    }
    Ok(())
}
