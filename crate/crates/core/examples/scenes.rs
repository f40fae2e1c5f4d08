//! Generates a scene corpus, round-trips it through JSON files and shows
//! the pillar grid and target maps a detector trains on.

use bevkd::scene::{
    assign_targets, generate_corpus, load_corpus, rasterize, save_corpus, SceneConfig, CLASS_NAMES,
};

fn main() -> bevkd::Result<()> {
    let config = SceneConfig::default();
    let scenes = generate_corpus(1000, 8, &config)?;
    let dir = std::env::temp_dir().join("bevkd_scenes");
    let files = save_corpus(&dir, &scenes)?;
    let reloaded = load_corpus(&dir)?;
    assert_eq!(reloaded, scenes);
    println!(
        "{} scenes written to {} and read back",
        files.len(),
        dir.display()
    );

    let s = &scenes[0];
    println!(
        "scene seed {}: {} points, {} boxes",
        s.seed,
        s.points.len(),
        s.boxes.len()
    );
    for b in &s.boxes {
        println!(
            "  {:<5} at ({:5.1}, {:5.1})  {:.1} x {:.1} m",
            CLASS_NAMES[b.class_id], b.cx, b.cy, b.w, b.l
        );
    }
    for voxel in [0.5, 1.0, 1.5] {
        let grid = rasterize(s, voxel)?;
        let occupied = grid.grid.data()[..grid.side * grid.side]
            .iter()
            .filter(|&&c| c > 0.0)
            .count();
        let targets = assign_targets(&s.boxes, grid.side, voxel)?;
        println!(
            "voxel {voxel}: grid {0}x{0}, {occupied} occupied cells, {1} heatmap peaks",
            grid.side,
            targets.num_peaks()
        );
    }
    Ok(())
}
