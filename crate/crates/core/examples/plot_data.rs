//! Turns a results tree into scatter data and channel-norm CSVs. Defaults
//! to the tree written by the `suite` example.

use std::path::PathBuf;

use bevkd::bench::emit_plot_data;

fn main() -> bevkd::Result<()> {
    let mut args = std::env::args().skip(1);
    let results = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bevkd_suite_example"));
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bevkd_plot_example"));
    let summary = emit_plot_data(&results, &out, true)?;
    println!(
        "{} scatter points written to {}",
        summary.points,
        out.display()
    );
    for f in &summary.norm_files {
        println!("  {}", f.display());
    }
    print!("{}", std::fs::read_to_string(out.join("scatter.csv"))?);
    Ok(())
}
