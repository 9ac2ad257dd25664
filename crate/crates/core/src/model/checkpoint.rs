//! Checkpoint container and its on-disk format.
//!
//! Layout: the magic string, a little-endian u64 header length, a JSON
//! header (config, optional optimizer step, and one entry per tensor with
//! name, shape, dtype, offset, byte count), then the raw tensor data,
//! little-endian, in header order. Optimizer moments live in the same blob
//! under `adam.m.` / `adam.v.` name prefixes, so a checkpoint with training
//! state is one file.
//!
//! Round trips are bit-exact: f64 values are stored as their 8 raw bytes,
//! and f32-dtype tensors hold already-quantized values that survive the
//! 4-byte form unchanged.

use super::{parameter_shapes, ModelConfig};
use crate::error::{FlowError, Result};
use crate::tensor::{Dtype, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"FLOWCKPT1";

/// Optimizer state carried alongside parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub parameters: BTreeMap<String, Tensor>,
    pub training_state: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<u64>,
    tensors: Vec<HeaderEntry>,
}

fn elem_bytes(dtype: Dtype) -> usize {
    match dtype {
        Dtype::F64 => 8,
        Dtype::F32 => 4,
    }
}

fn encode(t: &Tensor, out: &mut Vec<u8>) {
    match t.dtype() {
        Dtype::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
}

fn decode(entry: &HeaderEntry, blob: &[u8]) -> Result<Tensor> {
    let start = entry.offset as usize;
    let len = entry.bytes as usize;
    let end = start.checked_add(len).filter(|&e| e <= blob.len()).ok_or_else(|| {
        FlowError::data(
            "checkpoint_load",
            format!("tensor {} spans bytes {start}..{} but the blob has {}", entry.name, start + len, blob.len()),
        )
    })?;
    let count: usize = entry.shape.iter().product();
    if len != count * elem_bytes(entry.dtype) {
        return Err(FlowError::data(
            "checkpoint_load",
            format!("tensor {} has {len} bytes for shape {:?} ({})", entry.name, entry.shape, entry.dtype),
        ));
    }
    let bytes = &blob[start..end];
    let data: Vec<f64> = match entry.dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
    };
    Tensor::new(entry.shape.clone(), data, entry.dtype)
}

impl Checkpoint {
    /// Check the parameter map (and any training state) against the
    /// architecture the config implies.
    pub fn validate(&self) -> Result<()> {
        let op = "checkpoint";
        self.config.validate()?;
        let expected = parameter_shapes(&self.config);
        if self.parameters.len() != expected.len() {
            return Err(FlowError::contract(
                op,
                format!("{} parameters, architecture implies {}", self.parameters.len(), expected.len()),
            ));
        }
        for (name, shape) in &expected {
            match self.parameters.get(name) {
                None => return Err(FlowError::contract(op, format!("missing parameter {name}"))),
                Some(t) if t.shape() != *shape => {
                    return Err(FlowError::dim(
                        op,
                        format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape()),
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(state) = &self.training_state {
            for (label, moments) in [("adam.m", &state.first_moment), ("adam.v", &state.second_moment)] {
                if moments.len() != self.parameters.len() {
                    return Err(FlowError::contract(
                        op,
                        format!("{label} holds {} tensors for {} parameters", moments.len(), self.parameters.len()),
                    ));
                }
                for (name, t) in moments {
                    let param = self.parameters.get(name).ok_or_else(|| {
                        FlowError::contract(op, format!("{label}.{name} has no matching parameter"))
                    })?;
                    if t.shape() != param.shape() {
                        return Err(FlowError::dim(
                            op,
                            format!("{label}.{name} shape {:?} != parameter shape {:?}", t.shape(), param.shape()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        let push = |name: String, t: &Tensor, entries: &mut Vec<HeaderEntry>, blob: &mut Vec<u8>| {
            let offset = blob.len() as u64;
            encode(t, blob);
            entries.push(HeaderEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: t.dtype(),
                offset,
                bytes: blob.len() as u64 - offset,
            });
        };
        for (name, t) in &self.parameters {
            push(name.clone(), t, &mut entries, &mut blob);
        }
        if let Some(state) = &self.training_state {
            for (name, t) in &state.first_moment {
                push(format!("adam.m.{name}"), t, &mut entries, &mut blob);
            }
            for (name, t) in &state.second_moment {
                push(format!("adam.v.{name}"), t, &mut entries, &mut blob);
            }
        }
        let header = Header {
            config: self.config.clone(),
            step: self.training_state.as_ref().map(|s| s.step),
            tensors: entries,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| FlowError::internal("checkpoint_save", e.to_string()))?;

        let mut file = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header_json.len() + blob.len());
        file.extend_from_slice(CHECKPOINT_MAGIC);
        file.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        file.extend_from_slice(&header_json);
        file.extend_from_slice(&blob);
        std::fs::write(path, file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let prefix_len = CHECKPOINT_MAGIC.len() + 8;
        if bytes.len() < prefix_len || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(FlowError::data(
                "checkpoint_load",
                format!("{} is not a checkpoint (bad magic)", path.display()),
            ));
        }
        let header_len = u64::from_le_bytes(
            bytes[CHECKPOINT_MAGIC.len()..prefix_len].try_into().expect("8 bytes"),
        ) as usize;
        let header_end = prefix_len.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(
            || FlowError::data("checkpoint_load", format!("truncated header in {}", path.display())),
        )?;
        let header: Header = serde_json::from_slice(&bytes[prefix_len..header_end])
            .map_err(|e| FlowError::data("checkpoint_load", format!("bad header: {e}")))?;
        let blob = &bytes[header_end..];

        let mut parameters = BTreeMap::new();
        let mut first_moment = BTreeMap::new();
        let mut second_moment = BTreeMap::new();
        for entry in &header.tensors {
            let t = decode(entry, blob)?;
            if let Some(name) = entry.name.strip_prefix("adam.m.") {
                first_moment.insert(name.to_string(), t);
            } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
                second_moment.insert(name.to_string(), t);
            } else {
                parameters.insert(entry.name.clone(), t);
            }
        }
        let training_state = match header.step {
            Some(step) => Some(TrainingState { step, first_moment, second_moment }),
            None if first_moment.is_empty() && second_moment.is_empty() => None,
            None => {
                return Err(FlowError::data(
                    "checkpoint_load",
                    "optimizer moments present but no step recorded".to_string(),
                ))
            }
        };
        let ckpt = Checkpoint { config: header.config, parameters, training_state };
        ckpt.validate().map_err(|e| FlowError::data("checkpoint_load", e.to_string()))?;
        Ok(ckpt)
    }
}
