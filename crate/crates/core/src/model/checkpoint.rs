//! Checkpoints: `manifest.json` (config plus sorted parameter paths) and one
//! OLTENS1 file per parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::model::config::ModelConfig;
use crate::model::params::ParameterStore;
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: u64,
    pub config: ModelConfig,
    pub parameters: Vec<ParamEntry>,
}

pub fn save<T: Scalar>(dir: &Path, step: u64, config: &ModelConfig, params: &ParameterStore<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut parameters = Vec::with_capacity(params.len());
    for (path, t) in params.values() {
        let file = format!("{path}.oltens");
        write_tensor(&dir.join(&file), t)?;
        parameters.push(ParamEntry {
            path: path.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        step,
        config: config.clone(),
        parameters,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load<T: Scalar>(dir: &Path) -> Result<(CheckpointManifest, ParameterStore<T>)> {
    let manifest = read_manifest(dir)?;
    let mut store = ParameterStore::new();
    for entry in &manifest.parameters {
        let path = dir.join(&entry.file);
        let t = read_tensor::<T>(&path)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::TensorFormat {
                path,
                reason: format!("shape {:?} differs from manifest {:?}", t.shape(), entry.shape),
            });
        }
        store.insert(entry.path.clone(), t);
    }
    Ok((manifest, store))
}
