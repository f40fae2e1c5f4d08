//! Efficiency of the built-in teachers and students, the activation-based
//! cost-performance ratio, and how flops scale with the input grid.

use bevkd::bench::suite::compression_students;
use bevkd::detector::{Detector, DetectorConfig};
use bevkd::metrics::{count_flops, cpr, efficiency_report, format_table, module_counts, CprInput};

fn main() -> bevkd::Result<()> {
    let mut rows = Vec::new();
    for (name, cfg) in [
        (
            "pillar teacher".to_string(),
            DetectorConfig::pillar_teacher(),
        ),
        ("voxel teacher".to_string(), DetectorConfig::voxel_teacher()),
    ]
    .into_iter()
    .chain(
        compression_students()
            .into_iter()
            .map(|s| (s.label, s.detector)),
    ) {
        let det = Detector::build(&cfg, 0)?;
        rows.push((name, efficiency_report(&det, None)?, None, None));
    }
    print!("{}", format_table(&rows));

    // A student with 40% fewer activations that keeps 95% of the accuracy.
    let score = cpr(CprInput {
        acts_s: 60.0,
        acts_t: 100.0,
        maph_s: 0.57,
        maph_t: 0.60,
    })?;
    println!("\nCPR example: {:.4}", score.value);

    let det = Detector::build(&DetectorConfig::pillar_teacher(), 0)?;
    let bfe_head = |side| -> bevkd::Result<u64> {
        let m = module_counts(&det, side)?;
        Ok(m["bfe"].macs + m["head"].macs)
    };
    let (big, small) = (bfe_head(60)?, bfe_head(30)?);
    println!(
        "backbone+head MACs at grid 60: {big}, at grid 30: {small} ({}x)",
        big as f64 / small as f64
    );
    println!("whole network at grid 30: {} MACs", count_flops(&det, 30)?);
    Ok(())
}
