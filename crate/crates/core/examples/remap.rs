//! Initializes narrow students from a teacher with the three channel
//! selection rules and checks that a same-width remap is an exact copy.

use bevkd::detector::{Detector, DetectorConfig};
use bevkd::kd::{tgi_remap, RemapKind};
use bevkd::scene::{generate_scene, rasterize, SceneConfig};

fn main() -> bevkd::Result<()> {
    let t_cfg = DetectorConfig::voxel_teacher();
    let teacher = Detector::build(&t_cfg, 1)?;

    let mut twin = Detector::build(&t_cfg, 2)?;
    tgi_remap(&teacher, &mut twin, RemapKind::Fna)?;
    let scene = generate_scene(5, &SceneConfig::default())?;
    let grid = rasterize(&scene, t_cfg.voxel_size)?.grid;
    let (a, b) = (teacher.predict(&grid)?, twin.predict(&grid)?);
    println!(
        "same-width copy, max |difference| = {}",
        a.p_cls.max_abs_diff(&b.p_cls)
    );

    for kind in [RemapKind::Fna, RemapKind::Ofa, RemapKind::Slim] {
        let mut student = Detector::build(&t_cfg.clone().with_widths(0.5, 0.25, 0.25), 3)?;
        let report = tgi_remap(&teacher, &mut student, kind)?;
        println!(
            "{kind:?}: {} channel groups, {} layers copied",
            report.groups.len(),
            report.layers_copied
        );
    }
    let mut deeper = Detector::build(&t_cfg.clone().with_depths(0.5, 0.5), 3)?;
    if let Err(e) = tgi_remap(&teacher, &mut deeper, RemapKind::Fna) {
        println!("depth-compressed student: {e}");
    }
    Ok(())
}
