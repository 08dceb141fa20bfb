use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::store::{read_container, write_container};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "stv-checkpoint";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes config and every tensor (in [`Parameters::named`] order) as one payload.
pub fn save_checkpoint(params: &Parameters, path: &Path) -> Result<()> {
    let named = params.named();
    let header = Header {
        config: params.config.clone(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let payload: Vec<f64> = named
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect();
    write_container(path, FORMAT, CHECKPOINT_VERSION, &header, &payload)
}

/// Loads a checkpoint; with `expected`, the stored config must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Parameters> {
    let (header, payload): (Header, Vec<f64>) = read_container(path, FORMAT, CHECKPOINT_VERSION)?;
    if let Some(exp) = expected {
        if exp != &header.config {
            return Err(Error::Dimension(format!(
                "checkpoint config {:?} does not match expected {:?}",
                header.config, exp
            )));
        }
    }
    header.config.validate()?;
    let mut params = Parameters::zeros(&header.config);
    let mut named = params.named_mut();
    if named.len() != header.tensors.len() {
        return Err(Error::Dimension(format!(
            "checkpoint lists {} tensors, config implies {}",
            header.tensors.len(),
            named.len()
        )));
    }
    let mut offset = 0;
    for ((name, t), entry) in named.iter_mut().zip(&header.tensors) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(Error::Dimension(format!(
                "tensor {} has shape {:?} in checkpoint, expected {name} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let n = t.len();
        let slice = payload
            .get(offset..offset + n)
            .ok_or_else(|| Error::Format("checkpoint payload truncated".into()))?;
        **t = Tensor::from_vec(&entry.shape, slice.to_vec())?;
        offset += n;
    }
    if offset != payload.len() {
        return Err(Error::Format(
            "checkpoint payload has trailing values".into(),
        ));
    }
    drop(named);
    if !params.all_finite() {
        return Err(Error::Numeric(
            "checkpoint contains non-finite values".into(),
        ));
    }
    Ok(params)
}
