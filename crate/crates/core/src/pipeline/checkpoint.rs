use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::Components;
use crate::tensor::device;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// JSON sidecar next to the parameter archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub config: RunConfig,
    /// Modulation-network parameters only.
    pub parameter_count: usize,
    pub encoder_parameter_count: usize,
    pub step: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` (safetensors: modnet and encoder parameters) and the sidecar
/// `path.with_extension("json")`.
pub fn save_checkpoint(components: &Components, path: &Path, step: usize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tensors: HashMap<String, Tensor> = components.modnet.params().tensors().into_iter().collect();
    tensors.extend(components.encoder.params().tensors());
    candle_core::safetensors::save(&tensors, path)?;
    let meta = CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: components.config.clone(),
        parameter_count: components.modnet.parameter_count(),
        encoder_parameter_count: components.encoder.params().num_params(),
        step,
    };
    let side = sidecar(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// Rebuilds the components from the sidecar config and restores every
/// trained parameter.
pub fn load_checkpoint(path: &Path) -> Result<(Components, CheckpointMeta)> {
    let side = sidecar(path);
    if !path.exists() {
        return Err(Error::Input(format!("checkpoint not found: {}", path.display())));
    }
    let bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Input(format!(
            "checkpoint schema {} is not supported (expected {})",
            meta.schema_version, CHECKPOINT_SCHEMA_VERSION
        )));
    }
    let components = Components::build(&meta.config)?;
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load(path, &device())?.into_iter().collect();
    components.modnet.params().assign_from(&tensors)?;
    components.encoder.params().assign_from(&tensors)?;
    if components.modnet.parameter_count() != meta.parameter_count {
        return Err(Error::contract("checkpoint parameter count disagrees with its config"));
    }
    Ok((components, meta))
}
