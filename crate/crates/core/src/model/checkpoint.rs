//! Checkpoint directory: one `<param>.bt` per tensor plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::{read_bt, write_bt, AdamW, ParamSet};

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    arch: ArchConfig,
    step: u64,
    params: Vec<String>,
    optimizer: Option<AdamW>,
    /// Free-form provenance such as the config hash and selected epoch.
    info: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamW>,
    pub step: u64,
    pub info: serde_json::Value,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    optimizer: Option<&AdamW>,
    step: u64,
    info: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (name, t) in model.params().iter() {
        write_bt(&dir.join(format!("{name}.bt")), t)?;
        names.push(name.clone());
    }
    let manifest = Manifest {
        arch: model.config().clone(),
        step,
        params: names,
        optimizer: optimizer.cloned(),
        info,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mut params = ParamSet::new();
    for name in &manifest.params {
        params.insert(name.clone(), read_bt(&dir.join(format!("{name}.bt")))?)?;
    }
    Ok(Checkpoint {
        model: Model::from_parts(manifest.arch, params)?,
        optimizer: manifest.optimizer,
        step: manifest.step,
        info: manifest.info,
    })
}
