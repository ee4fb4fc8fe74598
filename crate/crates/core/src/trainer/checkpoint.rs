//! Binary checkpoint: `ATSC`, version, JSON metadata, then parameters, Adam
//! moments and the data-sampler rng state.
//!
//! ```text
//! "ATSC" | u32 version | u32 json_len | json
//! | f32 params (store order) | f32 adam m | f32 adam v | rng state (56 B)
//! ```
//!
//! All integers and floats are little-endian. Tensor offsets in the
//! manifest are byte offsets into the parameter section.

use std::fs;
use std::path::Path;

use atsc_tensor::{ParamStore, RngState, Tensor, RNG_STATE_BYTES};
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::config::TrainConfig;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Optimizer updates completed.
    pub step: usize,
    pub elapsed_seconds: f64,
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    elapsed_seconds: f64,
    adam: AdamMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor) {
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (_, p) in self.params.iter() {
            tensors.push(TensorEntry {
                name: p.name().to_string(),
                shape: p.value().shape().to_vec(),
                offset,
            });
            offset += 4 * p.value().numel();
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            elapsed_seconds: self.elapsed_seconds,
            adam: AdamMeta {
                t: self.adam.t,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
            },
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 3 * offset + RNG_STATE_BYTES);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            put_f32s(&mut out, p.value());
        }
        for t in self.adam.m.iter().chain(&self.adam.v) {
            put_f32s(&mut out, t);
        }
        out.extend_from_slice(&self.rng.to_bytes());
        Ok(out)
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < 12 {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad magic, expected ATSC".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = 12 + json_len;
        if bytes.len() < body {
            return Err(fail(8, format!("metadata length {json_len} exceeds file")));
        }
        let header: Header = serde_json::from_slice(&bytes[12..body])
            .map_err(|e| fail(12, format!("metadata: {e}")))?;

        let numel: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let expected = body + 3 * 4 * numel + RNG_STATE_BYTES;
        if bytes.len() != expected {
            return Err(fail(
                body,
                format!("expected {expected} bytes in total, found {}", bytes.len()),
            ));
        }
        let read = |start: usize, shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            let data = bytes[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches length")
        };
        let mut params = ParamStore::new();
        let mut m = Vec::with_capacity(header.tensors.len());
        let mut v = Vec::with_capacity(header.tensors.len());
        let mut running = 0;
        for t in &header.tensors {
            if t.offset != running {
                return Err(fail(
                    12,
                    format!(
                        "tensor {} has offset {}, expected {running}",
                        t.name, t.offset
                    ),
                ));
            }
            if params.find(&t.name).is_some() {
                return Err(fail(12, format!("duplicate tensor {}", t.name)));
            }
            params.add(t.name.clone(), read(body + t.offset, &t.shape));
            m.push(read(body + 4 * numel + t.offset, &t.shape));
            v.push(read(body + 8 * numel + t.offset, &t.shape));
            running += 4 * t.shape.iter().product::<usize>();
        }
        let rng_bytes: &[u8; RNG_STATE_BYTES] =
            bytes[expected - RNG_STATE_BYTES..].try_into().unwrap();
        Ok(Self {
            model: header.model,
            train: header.train,
            step: header.step,
            elapsed_seconds: header.elapsed_seconds,
            params,
            adam: AdamState {
                m,
                v,
                t: header.adam.t,
                beta1: header.adam.beta1,
                beta2: header.adam.beta2,
                eps: header.adam.eps,
            },
            rng: RngState::from_bytes(rng_bytes),
        })
    }

    /// Writes atomically: a partial write never replaces an older file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// The model stored in this checkpoint.
    pub fn to_model(&self) -> Result<Model> {
        Model::from_parts(self.model.clone(), self.params.clone())
    }
}
