//! Binary checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"STRTCKPT"
//! 8       4     format version, u32 LE (currently 1)
//! 12      4     header length L, u32 LE
//! 16      L     header, UTF-8 JSON (CheckpointHeader)
//! 16+L    4·P   weights, f32 LE, parameters in header order, row-major
//! ```
//!
//! The header carries the architecture hash, the model config, an optional
//! noise schedule, references to other checkpoints by weights hash, and the
//! weights hash of the payload itself, which is verified on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{Param, ParamSet};
use super::tensor::Real;

const MAGIC: &[u8; 8] = b"STRTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("truncated weight payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("weights hash mismatch: header {header}, payload {payload}")]
    Corrupt { header: String, payload: String },
    #[error("checkpoint kind is {found}, expected {expected}")]
    Kind { expected: String, found: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub arch_hash: String,
    pub weights_hash: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub schedule: Option<serde_json::Value>,
    #[serde(default)]
    pub refs: BTreeMap<String, String>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
    pub params: Vec<ParamMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(kind: &str, arch_hash: String, config: serde_json::Value, params: ParamSet<f32>) -> Self {
        let header = CheckpointHeader {
            kind: kind.to_string(),
            arch_hash,
            weights_hash: params.weights_hash(),
            config,
            schedule: None,
            refs: BTreeMap::new(),
            extra: BTreeMap::new(),
            params: params
                .params
                .iter()
                .map(|p| ParamMeta { name: p.name.clone(), shape: p.shape.clone() })
                .collect(),
        };
        Self { header, params }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.header.kind != kind {
            return Err(CheckpointError::Kind { expected: kind.to_string(), found: self.header.kind.clone() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.weights_hash = self.params.weights_hash();
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or(CheckpointError::Truncated { expected: 16 + len, found: bytes.len() })?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut payload = &bytes[16 + len..];
        let expected: usize = header.params.iter().map(|p| 4 * p.shape.iter().product::<usize>()).sum();
        if payload.len() != expected {
            return Err(CheckpointError::Truncated { expected, found: payload.len() });
        }
        let mut params = Vec::with_capacity(header.params.len());
        for meta in &header.params {
            let n: usize = meta.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                payload.read_exact(&mut buf).expect("length checked");
                data.push(f32::from_le_bytes(buf));
            }
            params.push(Param { name: meta.name.clone(), shape: meta.shape.clone(), data });
        }
        let params = ParamSet { params };
        let actual = params.weights_hash();
        if actual != header.weights_hash {
            return Err(CheckpointError::Corrupt { header: header.weights_hash, payload: actual });
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn params_as<T: Real>(&self) -> ParamSet<T> {
        self.params.cast()
    }
}
