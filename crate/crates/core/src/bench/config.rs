//! Experiment configuration, stored as TOML with a version field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::DetectorConfig;
use crate::error::{config_err, Result};
use crate::eval::EvalConfig;
use crate::kd::KdRecipe;
use crate::scene::SceneConfig;

pub const CONFIG_VERSION: u32 = 1;
/// Version string embedded in every artifact.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub scene: SceneConfig,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 1000,
            train_scenes: 64,
            eval_scenes: 48,
            scene: SceneConfig::default(),
        }
    }
}

impl CorpusSpec {
    /// Seed of the first evaluation scene; evaluation scenes follow the
    /// training scenes in the seed sequence.
    pub fn eval_seed(&self) -> u64 {
        self.seed + self.train_scenes as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 1e-2,
            final_lr_fraction: 0.1,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.final_lr_fraction)
        {
            return Err(config_err(
                "lr must be positive and final_lr_fraction in [0, 1]",
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub detector: DetectorConfig,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub train: TrainSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub teacher: Option<TeacherSpec>,
    pub student: DetectorConfig,
    #[serde(default)]
    pub recipe: KdRecipe,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(name: &str, student: DetectorConfig) -> Self {
        Self {
            version: CONFIG_VERSION,
            name: name.to_string(),
            corpus: CorpusSpec::default(),
            teacher: None,
            student,
            recipe: KdRecipe::default(),
            train: TrainSpec::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs").join(name),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(config_err(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.corpus.scene.validate()?;
        if self.corpus.train_scenes == 0 || self.corpus.eval_scenes == 0 {
            return Err(config_err("corpus needs training and evaluation scenes"));
        }
        self.student.validate()?;
        self.recipe.validate()?;
        self.train.validate()?;
        if let Some(t) = &self.teacher {
            t.detector.validate()?;
            t.train.validate()?;
            if t.detector.extent != self.student.extent
                || t.detector.extent != self.corpus.scene.extent
            {
                return Err(config_err(
                    "teacher, student and scenes must share one extent",
                ));
            }
        } else if self.recipe.needs_teacher() {
            return Err(config_err("the recipe needs a [teacher] section"));
        }
        if self.student.extent != self.corpus.scene.extent {
            return Err(config_err("student and scenes must share one extent"));
        }
        Ok(())
    }

    /// SHA-256 over everything that influences results. The output
    /// directory and the name are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.name = String::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Corpus, teacher and training settings shared by every cell of a study.
pub fn teacher_hash(spec: &TeacherSpec, corpus: &CorpusSpec) -> String {
    let mut s = spec.clone();
    s.checkpoint = PathBuf::new();
    let bytes = serde_json::to_vec(&(s, corpus)).expect("teacher spec serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
