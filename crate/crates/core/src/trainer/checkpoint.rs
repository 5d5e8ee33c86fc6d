//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SRGC" | u32 version | u64 header length | JSON header | f64 payload
//! ```
//!
//! The header lists every tensor with its byte offset into the payload.
//! Tensors appear as model parameters, EMA parameters, Adam first moments,
//! then Adam second moments, each group in model parameter order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{AdamConfig, AdamState, Shape, Tensor};
use crate::trainer::EpochMetrics;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRGC";
pub const CHECKPOINT_VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["params", "ema", "adam.m", "adam.v"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub ema: ModelParams,
    pub adam: AdamState,
    pub adam_config: AdamConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Shape,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    adam_config: AdamConfig,
    adam_step: u64,
    epoch: usize,
    log: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    fn groups(&self) -> [&[Tensor]; 4] {
        [
            self.params.tensors(),
            self.ema.tensors(),
            &self.adam.first_moment,
            &self.adam.second_moment,
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let names = self.params.names();
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (group, list) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in names.iter().zip(list) {
                tensors.push(TensorEntry {
                    name: format!("{group}/{name}"),
                    shape: t.shape().clone(),
                    offset,
                });
                offset += 8 * t.numel() as u64;
            }
        }
        let header = Header {
            model: *self.params.config(),
            adam_config: self.adam_config,
            adam_step: self.adam.step,
            epoch: self.epoch,
            log: self.log.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");

        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for list in self.groups() {
            for t in list {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format("checkpoint", path, msg);
        if bytes.len() < 16 {
            return Err(bad(format!("truncated: {} bytes, shorter than the fixed prefix", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing SRGC magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version}; this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let payload_start = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("truncated: header of {header_len} bytes does not fit")))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| bad(format!("header: {e}")))?;
        header.model.validate()?;

        let payload = &bytes[payload_start..];
        let specs = header.model.param_specs();
        if header.tensors.len() != GROUPS.len() * specs.len() {
            return Err(bad(format!(
                "tensor directory has {} entries, expected {}",
                header.tensors.len(),
                GROUPS.len() * specs.len()
            )));
        }
        let mut expected_offset = 0u64;
        let mut groups: Vec<Vec<Tensor>> = Vec::with_capacity(GROUPS.len());
        for (g, group) in GROUPS.iter().enumerate() {
            let mut list = Vec::with_capacity(specs.len());
            for (i, (name, shape)) in specs.iter().enumerate() {
                let entry = &header.tensors[g * specs.len() + i];
                let want = format!("{group}/{name}");
                if entry.name != want || &entry.shape != shape || entry.offset != expected_offset {
                    return Err(bad(format!(
                        "tensor directory entry {} is {} {} at {}, expected {want} {shape} at {expected_offset}",
                        g * specs.len() + i,
                        entry.name,
                        entry.shape,
                        entry.offset
                    )));
                }
                let start = expected_offset as usize;
                let end = start + 8 * shape.numel();
                if end > payload.len() {
                    return Err(bad(format!(
                        "truncated: tensor {want} needs payload bytes {start}..{end}, file has {}",
                        payload.len()
                    )));
                }
                let data = payload[start..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                list.push(Tensor::new(shape.clone(), data)?);
                expected_offset = end as u64;
            }
            groups.push(list);
        }
        if expected_offset as usize != payload.len() {
            return Err(bad(format!(
                "{} trailing bytes after the last tensor",
                payload.len() - expected_offset as usize
            )));
        }

        let second = groups.pop().expect("four groups");
        let first = groups.pop().expect("four groups");
        let ema = groups.pop().expect("four groups");
        let params = groups.pop().expect("four groups");
        Ok(Checkpoint {
            params: ModelParams::from_tensors(header.model, params)?,
            ema: ModelParams::from_tensors(header.model, ema)?,
            adam: AdamState {
                step: header.adam_step,
                first_moment: first,
                second_moment: second,
            },
            adam_config: header.adam_config,
            epoch: header.epoch,
            log: header.log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    fn sample() -> Checkpoint {
        let config = ModelConfig::default();
        let params = ModelParams::init(config, 3).unwrap();
        let ema = ModelParams::init(config, 4).unwrap();
        let mut adam = AdamState::for_params(params.tensors());
        adam.step = 17;
        adam.first_moment[0].data_mut()[0] = 0.25;
        Checkpoint {
            params,
            ema,
            adam,
            adam_config: AdamConfig::default(),
            epoch: 2,
            log: vec![EpochMetrics {
                epoch: 0,
                mean_sup_loss: Some(1.5),
                mean_inv_loss: None,
                mean_var_loss: None,
                ema_miou: Some(0.1 + 0.2),
            }],
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn loaded_parameters_give_identical_forward() {
        let ckpt = sample();
        let loaded = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("mem")).unwrap();
        let img = Tensor::full(Shape::new([3, 16, 16]).unwrap(), 0.3);
        let a = forward(&ckpt.params, &img).unwrap();
        let b = forward(&loaded.params, &img).unwrap();
        assert!(a.logits.data().iter().zip(b.logits.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncation_is_reported_at_every_length() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, 16, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], Path::new("ckpt")).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains("truncated") || msg.contains("header"), "cut {cut}: {msg}");
        }
    }

    #[test]
    fn wrong_version_and_magic_are_descriptive() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        let msg = Checkpoint::from_bytes(&bytes, Path::new("ckpt")).unwrap_err().to_string();
        assert!(msg.contains("version 9"), "{msg}");
        bytes[0] = b'X';
        let msg = Checkpoint::from_bytes(&bytes, Path::new("ckpt")).unwrap_err().to_string();
        assert!(msg.contains("magic"), "{msg}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes, Path::new("ckpt")).is_err());
    }
}
