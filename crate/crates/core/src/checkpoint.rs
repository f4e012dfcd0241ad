//! Versioned binary checkpoint container.
//!
//! Layout: 8 magic bytes, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as contiguous little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::nn::{ConditionEmbedding, DenoiserConfig, DenoiserParams, ParamTensor};
use crate::schedule::ScheduleConfig;

pub const MAGIC: [u8; 8] = *b"IFILLCKP";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

/// Adam moments for one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub name: String,
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

/// Where a checkpoint sits in the two-stage schedule. Per-step randomness is
/// derived from `seed` and the step index, so `(seed, step)` is the full RNG
/// state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// 0 for an untrained initialization.
    pub stage: u8,
    pub step: u64,
    pub stage1_steps: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub params: DenoiserParams<f32>,
    pub embedding: ConditionEmbedding<f32>,
    pub optimizer: Option<OptimizerState>,
    pub progress: Progress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Embedding,
    AdamFirst,
    AdamSecond,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    group: Group,
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: DenoiserConfig,
    schedule: ScheduleConfig,
    progress: Progress,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

fn inconsistent(msg: impl Into<String>) -> Error {
    CheckpointError::Inconsistent(msg.into()).into()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut slots: Vec<(Group, &str, Vec<usize>, &[f32])> = Vec::new();
        for t in self.params.tensors() {
            slots.push((Group::Param, &t.name, t.shape.clone(), &t.data));
        }
        let e = &self.embedding;
        for (name, v) in [("creation", &e.creation), ("removal", &e.removal), ("neutral", &e.neutral)] {
            slots.push((Group::Embedding, name, vec![v.len()], v));
        }
        if let Some(opt) = &self.optimizer {
            for m in &opt.moments {
                slots.push((Group::AdamFirst, &m.name, vec![m.first.len()], &m.first));
                slots.push((Group::AdamSecond, &m.name, vec![m.second.len()], &m.second));
            }
        }
        let mut offset = 0u64;
        let tensors = slots
            .iter()
            .map(|(group, name, shape, data)| {
                let nbytes = 4 * data.len() as u64;
                let entry = TensorEntry {
                    group: *group,
                    name: name.to_string(),
                    shape: shape.clone(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                entry
            })
            .collect();
        let header = Header {
            dtype: "f32le".into(),
            model: self.model,
            schedule: self.schedule,
            progress: self.progress,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, _, data) in &slots {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::Header("file ends inside the preamble".into()).into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| CheckpointError::Header(format!("header length {header_len} runs past end of file")))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.dtype != "f32le" {
            return Err(CheckpointError::Header(format!("unsupported dtype '{}'", header.dtype)).into());
        }

        let mut expected_offset = 0u64;
        for t in &header.tensors {
            let elements: usize = t.shape.iter().product();
            if t.nbytes != 4 * elements as u64 {
                return Err(inconsistent(format!(
                    "tensor '{}' declares {} bytes for shape {:?}",
                    t.name, t.nbytes, t.shape
                )));
            }
            if t.offset != expected_offset {
                return Err(inconsistent(format!(
                    "tensor '{}' at offset {} but the previous tensor ends at {expected_offset}",
                    t.name, t.offset
                )));
            }
            expected_offset += t.nbytes;
        }
        let payload = &bytes[header_end..];
        if (payload.len() as u64) < expected_offset {
            return Err(CheckpointError::TruncatedPayload {
                expected: expected_offset,
                found: payload.len() as u64,
            }
            .into());
        }
        if payload.len() as u64 > expected_offset {
            return Err(inconsistent(format!(
                "{} trailing bytes after the declared payload",
                payload.len() as u64 - expected_offset
            )));
        }

        let read = |t: &TensorEntry| -> Vec<f32> {
            payload[t.offset as usize..(t.offset + t.nbytes) as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        let mut params = Vec::new();
        let (mut creation, mut removal, mut neutral) = (None, None, None);
        let mut moments: Vec<Moments> = Vec::new();
        for t in &header.tensors {
            match t.group {
                Group::Param => params.push(ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: read(t),
                }),
                Group::Embedding => {
                    let slot = match t.name.as_str() {
                        "creation" => &mut creation,
                        "removal" => &mut removal,
                        "neutral" => &mut neutral,
                        other => return Err(inconsistent(format!("unknown embedding '{other}'"))),
                    };
                    *slot = Some(read(t));
                }
                Group::AdamFirst => moments.push(Moments {
                    name: t.name.clone(),
                    first: read(t),
                    second: Vec::new(),
                }),
                Group::AdamSecond => {
                    let m = moments
                        .last_mut()
                        .filter(|m| m.name == t.name && m.second.is_empty())
                        .ok_or_else(|| inconsistent(format!("second moment '{}' without first moment", t.name)))?;
                    m.second = read(t);
                }
            }
        }
        let params = DenoiserParams::from_tensors(params);
        params.check_layout(&header.model).map_err(|e| inconsistent(e.to_string()))?;
        let embedding = match (creation, removal, neutral) {
            (Some(creation), Some(removal), Some(neutral)) => ConditionEmbedding {
                creation,
                removal,
                neutral,
            },
            _ => return Err(inconsistent("missing condition embedding tensors")),
        };
        if embedding.dim() != header.model.cond_dim {
            return Err(inconsistent(format!(
                "embedding dimension {} but model expects {}",
                embedding.dim(),
                header.model.cond_dim
            )));
        }
        embedding.validate().map_err(|e| inconsistent(e.to_string()))?;
        if moments.iter().any(|m| m.first.len() != m.second.len()) {
            return Err(inconsistent("optimizer moments differ in length"));
        }
        let optimizer = match header.optimizer_step {
            Some(step) => Some(OptimizerState { step, moments }),
            None if moments.is_empty() => None,
            None => return Err(inconsistent("optimizer moments without optimizer step")),
        };
        Ok(Self {
            model: header.model,
            schedule: header.schedule,
            params,
            embedding,
            optimizer,
            progress: header.progress,
        })
    }

    /// SHA-256 of the serialized container, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint together with the SHA-256 of the file it came from.
pub fn load_checkpoint_with_digest(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = fs::read(path)?;
    let digest = hex::encode(Sha256::digest(&bytes));
    Ok((Checkpoint::from_bytes(&bytes)?, digest))
}
