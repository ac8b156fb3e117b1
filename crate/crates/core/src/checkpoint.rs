//! Binary checkpoint format.
//!
//! Layout: magic `MMF3`, format version (u32 LE), payload length (u64 LE),
//! SHA-256 of the payload, payload. The payload is a u64 LE header length,
//! a JSON header, then every tensor's values as f64 LE in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MMF3";
pub const VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub code_vocab: Vocab,
    pub summary_vocab: Vocab,
    pub epoch: usize,
    /// `None` before any validation pass.
    pub best_valid: Option<f64>,
    pub params: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    code_vocab: Vec<String>,
    summary_vocab: Vec<String>,
    epoch: usize,
    best_valid: Option<f64>,
    tensors: Vec<(String, usize, usize)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &TrainConfig, code_vocab: &Vocab, summary_vocab: &Vocab, epoch: usize, best_valid: f64) -> Self {
        Self {
            config: config.clone(),
            code_vocab: code_vocab.clone(),
            summary_vocab: summary_vocab.clone(),
            epoch,
            best_valid: best_valid.is_finite().then_some(best_valid),
            params: model
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model described by the stored config and fills in the
    /// saved parameter values.
    pub fn to_model(&self) -> Result<Model> {
        let mut m = Model::new(self.config.model(), self.code_vocab.len(), self.summary_vocab.len(), 0)?;
        m.store
            .load_values(self.params.clone())
            .map_err(|e| Error::Checkpoint(format!("parameters do not fit the stored config: {e}")))?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            code_vocab: self.code_vocab.tokens().to_vec(),
            summary_vocab: self.summary_vocab.tokens().to_vec(),
            epoch: self.epoch,
            best_valid: self.best_valid,
            tensors: self.params.iter().map(|(n, t)| (n.clone(), t.rows(), t.cols())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let values: usize = self.params.iter().map(|(_, t)| t.len()).sum();
        let mut payload = Vec::with_capacity(8 + json.len() + 8 * values);
        payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
        payload.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(PREFIX + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(Sha256::digest(&payload).as_slice());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < PREFIX {
            return Err(corrupt("file shorter than the fixed prefix"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload = &bytes[PREFIX..];
        if payload.len() != len {
            return Err(corrupt("payload length mismatch"));
        }
        if Sha256::digest(payload).as_slice() != &bytes[16..48] {
            return Err(corrupt("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(payload.get(..8).ok_or_else(|| corrupt("missing header"))?.try_into().unwrap()) as usize;
        let json = payload.get(8..8 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
        let mut rest = &payload[8 + hlen..];
        let mut params = Vec::with_capacity(header.tensors.len());
        for (name, rows, cols) in header.tensors {
            let n = rows * cols;
            if rest.len() < 8 * n {
                return Err(corrupt("truncated tensor data"));
            }
            let data = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            rest = &rest[8 * n..];
            params.push((name, Tensor::from_rows(rows, cols, data)));
        }
        if !rest.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            config: header.config,
            code_vocab: Vocab::from_tokens(header.code_vocab).map_err(|e| corrupt(&e.to_string()))?,
            summary_vocab: Vocab::from_tokens(header.summary_vocab).map_err(|e| corrupt(&e.to_string()))?,
            epoch: header.epoch,
            best_valid: header.best_valid,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
