//! Binary checkpoint format.
//!
//! ```text
//! b"MLCAP1" | header length (u64 LE) | JSON header | f64 LE arrays
//! ```
//!
//! The header carries the format version, model dimensions, vocabulary,
//! array names and shapes in storage order, the training configuration and
//! the epoch index. Arrays follow back to back in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{CaptionModel, Dims, ModelParams, PARAM_NAMES};
use crate::trainer::TrainConfig;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 6] = b"MLCAP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CaptionModel,
    pub config: TrainConfig,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dims: Dims,
    vocab: Vocabulary,
    arrays: Vec<ArrayInfo>,
    config: TrainConfig,
    epoch: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let header = Header {
            format_version: FORMAT_VERSION,
            dims: params.dims,
            vocab: self.model.vocab.clone(),
            arrays: PARAM_NAMES
                .iter()
                .zip(params.tensors())
                .map(|(name, t)| ArrayInfo {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            config: self.config.clone(),
            epoch: self.epoch,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + params.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in params.tensors() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(corrupt("file is too short to be a checkpoint"));
        }
        let (magic, rest) = bytes.split_at(MAGIC.len());
        if magic != MAGIC {
            return Err(corrupt("bad magic; not an MLCAP1 checkpoint"));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(corrupt("truncated header"));
        }
        let (json, mut payload) = rest.split_at(len);
        let header: Header =
            serde_json::from_slice(json).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        header.dims.validate()?;
        if header.dims.vocab != header.vocab.len() {
            return Err(corrupt(format!(
                "header vocabulary has {} tokens but dims say {}",
                header.vocab.len(),
                header.dims.vocab
            )));
        }
        let expected = header.dims.shapes();
        if header.arrays.len() != expected.len() {
            return Err(corrupt("wrong number of parameter arrays"));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for ((info, shape), name) in header.arrays.iter().zip(&expected).zip(PARAM_NAMES) {
            if info.name != name || &info.shape != shape {
                return Err(corrupt(format!(
                    "array {:?} {:?} disagrees with expected {name:?} {shape:?}",
                    info.name, info.shape
                )));
            }
            let n: usize = shape.iter().product();
            if payload.len() < n * 8 {
                return Err(corrupt(format!("truncated data for array {name:?}")));
            }
            let (chunk, rest) = payload.split_at(n * 8);
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(shape.clone(), data)?);
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(corrupt(format!("{} trailing bytes after parameter data", payload.len())));
        }
        let params = ModelParams::from_tensors(header.dims, tensors)?;
        Ok(Self {
            model: CaptionModel::new(params, header.vocab)?,
            config: header.config,
            epoch: header.epoch,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial
    /// checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
