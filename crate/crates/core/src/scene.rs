//! Synthetic BEV scenes, pillar rasterization and heatmap target assignment.
//!
//! Coordinates are metres in `[0, extent)` on both axes. Grid cell `(row,
//! col)` covers `[col·v, (col+1)·v) × [row·v, (row+1)·v)` for pillar edge `v`.
//! Box `w` is the x extent and `l` the y extent.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;
pub const CLASS_LARGE: usize = 0;
pub const CLASS_SMALL: usize = 1;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["large", "small"];

/// Pillar feature channels: normalized count, mean intensity, mean x and y
/// offsets from the pillar centre in pillar units.
pub const NUM_FEATURES: usize = 4;
pub const COUNT_NORMALIZER: f64 = 16.0;
pub const SCENE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub class_id: usize,
}

impl BoxLabel {
    pub fn x_range(&self) -> (f64, f64) {
        (self.cx - self.w / 2.0, self.cx + self.w / 2.0)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.cy - self.l / 2.0, self.cy + self.l / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub version: u32,
    pub seed: u64,
    pub extent: f64,
    pub points: Vec<Point>,
    pub boxes: Vec<BoxLabel>,
    /// Boxes the generator could not place without overlap.
    #[serde(default)]
    pub dropped_boxes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Relative frequency when drawing a box's class.
    pub weight: f64,
    pub w_range: (f64, f64),
    pub l_range: (f64, f64),
    /// Points per square metre of box area.
    pub point_density: f64,
    pub min_points: usize,
    pub intensity_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub extent: f64,
    /// Inclusive range of the number of boxes per scene.
    pub boxes_min: usize,
    pub boxes_max: usize,
    pub classes: Vec<ClassSpec>,
    pub clutter_points: usize,
    pub clutter_intensity: (f64, f64),
    pub allow_overlap: bool,
    pub placement_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 30.0,
            boxes_min: 3,
            boxes_max: 8,
            classes: vec![
                ClassSpec {
                    name: CLASS_NAMES[CLASS_LARGE].into(),
                    weight: 0.35,
                    w_range: (3.0, 5.0),
                    l_range: (8.0, 12.0),
                    point_density: 1.0,
                    min_points: 20,
                    intensity_range: (0.2, 0.6),
                },
                ClassSpec {
                    name: CLASS_NAMES[CLASS_SMALL].into(),
                    weight: 0.65,
                    w_range: (1.6, 2.8),
                    l_range: (1.6, 2.8),
                    point_density: 2.0,
                    min_points: 5,
                    intensity_range: (0.6, 1.0),
                },
            ],
            clutter_points: 150,
            clutter_intensity: (0.0, 1.0),
            allow_overlap: false,
            placement_attempts: 50,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) {
            return Err(config_err("scene extent must be positive"));
        }
        if self.boxes_min > self.boxes_max {
            return Err(config_err("boxes_min exceeds boxes_max"));
        }
        if self.classes.len() != NUM_CLASSES {
            return Err(config_err(format!("expected {NUM_CLASSES} class specs")));
        }
        if self.classes.iter().any(|c| !(c.weight >= 0.0))
            || self.classes.iter().map(|c| c.weight).sum::<f64>() <= 0.0
        {
            return Err(config_err(
                "class weights must be non-negative with positive sum",
            ));
        }
        for c in &self.classes {
            for (lo, hi) in [c.w_range, c.l_range] {
                if !(lo > 0.0 && lo <= hi) {
                    return Err(config_err(format!("{}: invalid size range", c.name)));
                }
                if hi > self.extent {
                    return Err(config_err(format!(
                        "{}: boxes up to {hi} m do not fit a {} m scene",
                        c.name, self.extent
                    )));
                }
            }
            if !(c.intensity_range.0 <= c.intensity_range.1) || c.point_density < 0.0 {
                return Err(config_err(format!("{}: invalid point settings", c.name)));
            }
        }
        if self.placement_attempts == 0 {
            return Err(config_err("placement_attempts must be at least 1"));
        }
        Ok(())
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn overlaps(a: &BoxLabel, b: &BoxLabel) -> bool {
    let (ax0, ax1) = a.x_range();
    let (ay0, ay1) = a.y_range();
    let (bx0, bx1) = b.x_range();
    let (by0, by1) = b.y_range();
    ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
}

/// Draws a scene as a pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_weight: f64 = config.classes.iter().map(|c| c.weight).sum();
    let count = rng.gen_range(config.boxes_min..=config.boxes_max);
    let e = config.extent;
    let mut boxes: Vec<BoxLabel> = Vec::with_capacity(count);
    let mut dropped = 0;
    for _ in 0..count {
        let mut u = rng.gen_range(0.0..total_weight);
        let mut class_id = config.classes.len() - 1;
        for (i, c) in config.classes.iter().enumerate() {
            if u < c.weight {
                class_id = i;
                break;
            }
            u -= c.weight;
        }
        let spec = &config.classes[class_id];
        let w = sample(&mut rng, spec.w_range);
        let l = sample(&mut rng, spec.l_range);
        let mut placed = None;
        for _ in 0..config.placement_attempts {
            let cand = BoxLabel {
                cx: sample(&mut rng, (w / 2.0, e - w / 2.0)),
                cy: sample(&mut rng, (l / 2.0, e - l / 2.0)),
                w,
                l,
                class_id,
            };
            if config.allow_overlap || boxes.iter().all(|b| !overlaps(b, &cand)) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => dropped += 1,
        }
    }
    let mut points = Vec::new();
    for b in &boxes {
        let spec = &config.classes[b.class_id];
        let n = ((spec.point_density * b.w * b.l).round() as usize).max(spec.min_points);
        let (x0, x1) = b.x_range();
        let (y0, y1) = b.y_range();
        for _ in 0..n {
            points.push(Point {
                x: sample(&mut rng, (x0, x1)).clamp(0.0, e.next_down()),
                y: sample(&mut rng, (y0, y1)).clamp(0.0, e.next_down()),
                intensity: sample(&mut rng, spec.intensity_range),
            });
        }
    }
    for _ in 0..config.clutter_points {
        points.push(Point {
            x: rng.gen_range(0.0..e),
            y: rng.gen_range(0.0..e),
            intensity: sample(&mut rng, config.clutter_intensity),
        });
    }
    Ok(Scene {
        version: SCENE_VERSION,
        seed,
        extent: e,
        points,
        boxes,
        dropped_boxes: dropped,
    })
}

/// Scenes for seeds `base_seed, base_seed + 1, …`.
pub fn generate_corpus(base_seed: u64, count: usize, config: &SceneConfig) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| generate_scene(base_seed.wrapping_add(i), config))
        .collect()
}

/// Grid side for a pillar edge, refusing sizes that do not tile the scene.
pub fn grid_side(extent: f64, voxel_size: f64) -> Result<usize> {
    if !(voxel_size > 0.0) {
        return Err(config_err("voxel size must be positive"));
    }
    let g = extent / voxel_size;
    let r = g.round();
    if r < 1.0 || (g - r).abs() > 1e-9 * r.max(1.0) {
        return Err(config_err(format!(
            "voxel size {voxel_size} m does not divide the {extent} m extent"
        )));
    }
    Ok(r as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PillarGrid {
    pub voxel_size: f64,
    pub side: usize,
    /// `[1, NUM_FEATURES, side, side]`.
    pub grid: Tensor,
}

pub fn rasterize(scene: &Scene, voxel_size: f64) -> Result<PillarGrid> {
    let g = grid_side(scene.extent, voxel_size)?;
    let plane = g * g;
    let mut count = vec![0usize; plane];
    let mut sums = vec![[0.0f64; 3]; plane];
    for p in &scene.points {
        let fx = p.x / voxel_size;
        let fy = p.y / voxel_size;
        let ix = (fx.floor().max(0.0) as usize).min(g - 1);
        let iy = (fy.floor().max(0.0) as usize).min(g - 1);
        let cell = iy * g + ix;
        count[cell] += 1;
        sums[cell][0] += p.intensity;
        sums[cell][1] += fx - (ix as f64 + 0.5);
        sums[cell][2] += fy - (iy as f64 + 0.5);
    }
    let mut data = vec![0.0; NUM_FEATURES * plane];
    for cell in 0..plane {
        let n = count[cell];
        if n == 0 {
            continue;
        }
        data[cell] = n as f64 / COUNT_NORMALIZER;
        for k in 0..3 {
            data[(k + 1) * plane + cell] = sums[cell][k] / n as f64;
        }
    }
    Ok(PillarGrid {
        voxel_size,
        side: g,
        grid: Tensor::new(vec![1, NUM_FEATURES, g, g], data)?,
    })
}

/// A box handed to [`assign_targets_flagged`] with its assignment roles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignBox {
    pub label: BoxLabel,
    pub use_for_cls: bool,
    pub use_for_reg: bool,
}

/// One regression supervision point; several may share a cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegEntry {
    /// `row * side + col`.
    pub cell: usize,
    pub target: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub side: usize,
    pub voxel_size: f64,
    /// `[1, C, side, side]`.
    pub heatmap: Tensor,
    /// `[1, 4, side, side]` of `(dx, dy, ln w, ln l)`; the first box claiming a cell wins.
    pub reg: Tensor,
    /// `[1, 1, side, side]`.
    pub reg_mask: Tensor,
    pub entries: Vec<RegEntry>,
    /// Boxes whose centre quantized outside the map.
    pub rejected: usize,
}

impl TargetMaps {
    /// Cells holding a peak of exactly 1.0, counted over class channels.
    pub fn num_peaks(&self) -> usize {
        self.heatmap.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Heatmap maximum over classes, `[1, 1, side, side]`.
    pub fn class_max(&self) -> Tensor {
        let plane = self.side * self.side;
        let hm = self.heatmap.data();
        let data = (0..plane)
            .map(|i| {
                (0..NUM_CLASSES)
                    .map(|c| hm[c * plane + i])
                    .fold(0.0, f64::max)
            })
            .collect();
        Tensor::new(vec![1, 1, self.side, self.side], data).expect("non-empty grid")
    }
}

/// Gaussian radius in cells for a box on an output grid of edge `voxel_out`.
pub fn gaussian_radius(w: f64, l: f64, voxel_out: f64) -> usize {
    ((0.5 * w.min(l) / voxel_out).round() as usize).max(2)
}

/// Cell of a box centre, or `None` when it lies outside the map.
pub fn center_cell(b: &BoxLabel, side: usize, voxel_out: f64) -> Option<(usize, usize)> {
    let fx = (b.cx / voxel_out).floor();
    let fy = (b.cy / voxel_out).floor();
    if !(fx >= 0.0 && fy >= 0.0 && fx < side as f64 && fy < side as f64) {
        return None;
    }
    Some((fy as usize, fx as usize))
}

pub fn assign_targets(boxes: &[BoxLabel], side: usize, voxel_out: f64) -> Result<TargetMaps> {
    let flagged: Vec<AssignBox> = boxes
        .iter()
        .map(|&label| AssignBox {
            label,
            use_for_cls: true,
            use_for_reg: true,
        })
        .collect();
    assign_targets_flagged(&flagged, side, voxel_out)
}

pub fn assign_targets_flagged(
    boxes: &[AssignBox],
    side: usize,
    voxel_out: f64,
) -> Result<TargetMaps> {
    if side == 0 || !(voxel_out > 0.0) {
        return Err(config_err(
            "target grid needs a positive side and voxel size",
        ));
    }
    let plane = side * side;
    let mut heat = vec![0.0f64; NUM_CLASSES * plane];
    let mut reg = vec![0.0; 4 * plane];
    let mut mask = vec![0.0; plane];
    let mut entries = Vec::new();
    let mut rejected = 0;
    for ab in boxes {
        let b = &ab.label;
        if b.class_id >= NUM_CLASSES || !(b.w > 0.0 && b.l > 0.0) {
            return Err(Error::Config(format!("invalid box {b:?}")));
        }
        let Some((row, col)) = center_cell(b, side, voxel_out) else {
            rejected += 1;
            continue;
        };
        if ab.use_for_cls {
            let radius = gaussian_radius(b.w, b.l, voxel_out);
            let sigma = radius as f64 / 3.0;
            let denom = 2.0 * sigma * sigma;
            let ch = &mut heat[b.class_id * plane..(b.class_id + 1) * plane];
            let r = radius as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x) = (row as isize + dy, col as isize + dx);
                    if y < 0 || x < 0 || y >= side as isize || x >= side as isize {
                        continue;
                    }
                    let v = (-((dx * dx + dy * dy) as f64) / denom).exp();
                    let slot = &mut ch[y as usize * side + x as usize];
                    *slot = slot.max(v);
                }
            }
        }
        if ab.use_for_reg {
            let cell = row * side + col;
            let target = [
                b.cx / voxel_out - (col as f64 + 0.5),
                b.cy / voxel_out - (row as f64 + 0.5),
                b.w.ln(),
                b.l.ln(),
            ];
            if mask[cell] == 0.0 {
                mask[cell] = 1.0;
                for (k, t) in target.iter().enumerate() {
                    reg[k * plane + cell] = *t;
                }
            }
            entries.push(RegEntry { cell, target });
        }
    }
    Ok(TargetMaps {
        side,
        voxel_size: voxel_out,
        heatmap: Tensor::new(vec![1, NUM_CLASSES, side, side], heat)?,
        reg: Tensor::new(vec![1, 4, side, side], reg)?,
        reg_mask: Tensor::new(vec![1, 1, side, side], mask)?,
        entries,
        rejected,
    })
}

/// Writes one `scene_NNNNN.json` per scene into `dir`.
pub fn save_corpus(dir: &Path, scenes: &[Scene]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(format!("scene_{i:05}.json"));
            fs::write(&path, serde_json::to_vec(s)?)?;
            Ok(path)
        })
        .collect()
}

/// Loads every `scene_*.json` in `dir`, in file-name order.
pub fn load_corpus(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("scene_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let s: Scene = serde_json::from_slice(&fs::read(p)?)?;
            if s.version != SCENE_VERSION {
                return Err(config_err(format!(
                    "{}: scene version {} (expected {SCENE_VERSION})",
                    p.display(),
                    s.version
                )));
            }
            Ok(s)
        })
        .collect()
}
