//! Model checkpoints: one self-describing JSON file holding the model
//! configuration, the seed, and every parameter matrix with its shape.
//! JSON float serialization round-trips f64 exactly, so reloading a
//! checkpoint reproduces evaluation bit for bit on the same machine.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::Tensor;

#[derive(Serialize, Deserialize)]
struct TensorData {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    seed: u64,
    tensors: BTreeMap<String, TensorData>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    seed: u64,
    params: &ModelParams,
) -> Result<()> {
    let tensors = params
        .named()
        .into_iter()
        .map(|(name, t)| {
            (
                name,
                TensorData {
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        config: *config,
        seed,
        tensors,
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))?;
    fs::write(path, json).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, u64, ModelParams)> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut params = ModelParams::zeros(&file.config)?;
    let mut remaining = file.tensors;
    for (name, slot) in params.named_mut() {
        let data = remaining.remove(&name).ok_or_else(|| {
            Error::Checkpoint(format!("missing parameter tensor {name:?}"))
        })?;
        if (data.rows, data.cols) != slot.shape() || data.data.len() != slot.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {}x{}, expected {}x{}",
                data.rows,
                data.cols,
                slot.rows(),
                slot.cols()
            )));
        }
        *slot = Tensor::new(data.rows, data.cols, data.data)?.with_grad();
    }
    if let Some(extra) = remaining.keys().next() {
        return Err(Error::Checkpoint(format!(
            "unexpected parameter tensor {extra:?}"
        )));
    }
    Ok((file.config, file.seed, params))
}
