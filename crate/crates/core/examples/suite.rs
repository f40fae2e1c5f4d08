//! Runs a small custom matrix (two students, three recipes, two seeds),
//! then resumes it from disk without retraining.

use bevkd::bench::suite::{benchmark_students, builtin_matrix, markdown_summary};
use bevkd::bench::{run_suite, SuiteOptions};

fn main() -> bevkd::Result<()> {
    let out = std::env::temp_dir().join("bevkd_suite_example");
    let mut spec = builtin_matrix("benchmark", &out)?.restrict(
        Some(&["pillar-v2.0", "voxel-XXS"]),
        Some(&["none", "kd", "full"]),
    );
    spec.name = "example".into();
    spec.seeds = vec![0, 1];
    spec.train.epochs = 10;
    spec.corpus.train_scenes = 32;
    spec.corpus.eval_scenes = 8;
    for t in spec.teachers.values_mut() {
        t.train.epochs = 25;
    }
    assert!(spec
        .students
        .iter()
        .all(|s| benchmark_students().contains(s)));

    let report = run_suite(
        &spec,
        &out,
        SuiteOptions {
            force: false,
            verbose: true,
        },
    )?;
    print!("{}", markdown_summary(&report));
    let again = run_suite(&spec, &out, SuiteOptions::default())?;
    println!(
        "second pass: {} cells, {} failures, all read back from {}",
        again.outcomes.len(),
        again.failures(),
        out.display()
    );
    Ok(())
}
