//! Versioned JSON checkpoints: parameter name → shape + row-major values.
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Free-form metadata, e.g. the network configuration.
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            meta,
            params: store
                .iter()
                .map(|(_, e)| (e.name.clone(), e.value.clone()))
                .collect(),
        }
    }

    /// Copies every stored tensor into `store`; names and shapes must match exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut missing: Vec<String> = store
            .iter()
            .filter(|(_, e)| !self.params.contains_key(&e.name))
            .map(|(_, e)| e.name.clone())
            .collect();
        missing.extend(
            self.params
                .keys()
                .filter(|k| store.id(k).is_none())
                .map(|k| format!("{k} (unexpected)")),
        );
        if !missing.is_empty() {
            return Err(Error::Topology(missing));
        }
        for (name, t) in &self.params {
            store.set(name, t.clone())?;
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    for (name, t) in &ckpt.params {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
        }
    }
    fs::write(path, serde_json::to_vec(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    for (name, t) in &ckpt.params {
        Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .map_err(|e| Error::Config(format!("checkpoint tensor {name}: {e}")))?;
    }
    Ok(ckpt)
}
