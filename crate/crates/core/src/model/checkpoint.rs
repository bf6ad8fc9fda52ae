//! Binary checkpoints.
//!
//! Layout: `b"LRSA"`, `u32` version, `u32` header length, a JSON header with
//! the model config and a tensor directory, then every tensor's elements as
//! little-endian values in directory order.

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"LRSA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// `"f32"` or `"f64"`.
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config,
        dtype: T::NAME.to_string(),
        tensors: model
            .params
            .names()
            .into_iter()
            .zip(model.params.tensors())
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + model.params.numel() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))
}

pub fn load<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.dtype != T::NAME {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, requested {}",
            header.dtype,
            T::NAME
        )));
    }
    // Any seed works: every value is overwritten below.
    let mut model = Model::<T>::init(header.config, &mut Rng::new(0))?;
    let names = model.params.names();
    if names.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "directory lists {} tensors, config implies {}",
            header.tensors.len(),
            names.len()
        )));
    }
    let mut at = 12 + len;
    for ((entry, name), t) in header.tensors.iter().zip(&names).zip(model.params.tensors_mut()) {
        if &entry.name != name || entry.shape != t.shape() {
            return Err(Error::Format(format!(
                "directory entry {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                name,
                t.shape()
            )));
        }
        for x in t.data_mut() {
            let b = bytes
                .get(at..at + T::BYTES)
                .ok_or_else(|| Error::Format(format!("payload of {name} is truncated")))?;
            *x = T::read_le(b);
            at += T::BYTES;
        }
    }
    if at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok(model)
}
