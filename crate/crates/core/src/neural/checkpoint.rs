//! Versioned binary container for networks, optimizer states and raw arrays.
//!
//! ```text
//! magic "RGCK" | version u32 | header_len u32 | header JSON | f64 payload (LE) | CRC32
//! ```
//! The header lists entries in payload order; parameters are stored as raw
//! little-endian f64 so a save/load round-trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Mlp, MlpSpec, NeuralError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RGCK";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// What produced the checkpoint, e.g. `"ppo_teacher"`.
    pub kind: String,
    pub metadata: serde_json::Value,
    pub networks: BTreeMap<String, Mlp>,
    pub optimizers: BTreeMap<String, Adam>,
    pub arrays: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    networks: Vec<NetworkEntry>,
    optimizers: Vec<OptimizerEntry>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct NetworkEntry {
    name: String,
    spec: MlpSpec,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    name: String,
    config: AdamConfig,
    steps: u64,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.into(), metadata: serde_json::Value::Null, ..Self::default() }
    }

    pub fn network(&self, name: &str) -> Result<&Mlp, NeuralError> {
        self.networks.get(name).ok_or_else(|| NeuralError::MissingEntry(name.into()))
    }

    pub fn optimizer(&self, name: &str) -> Result<&Adam, NeuralError> {
        self.optimizers.get(name).ok_or_else(|| NeuralError::MissingEntry(name.into()))
    }

    pub fn array(&self, name: &str) -> Result<&[f64], NeuralError> {
        self.arrays.get(name).map(Vec::as_slice).ok_or_else(|| NeuralError::MissingEntry(name.into()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NeuralError> {
        let header = Header {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            networks: self
                .networks
                .iter()
                .map(|(name, net)| NetworkEntry { name: name.clone(), spec: net.spec().clone() })
                .collect(),
            optimizers: self
                .optimizers
                .iter()
                .map(|(name, opt)| OptimizerEntry {
                    name: name.clone(),
                    config: opt.config,
                    steps: opt.t,
                    len: opt.m.len(),
                })
                .collect(),
            arrays: self.arrays.iter().map(|(name, a)| ArrayEntry { name: name.clone(), len: a.len() }).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |values: &[f64]| {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for net in self.networks.values() {
            put(net.params());
        }
        for opt in self.optimizers.values() {
            put(&opt.m);
            put(&opt.v);
        }
        for a in self.arrays.values() {
            put(a);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        if bytes.len() < 4 {
            return Err(NeuralError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(NeuralError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(NeuralError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(NeuralError::CheckpointVersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err(NeuralError::ChecksumMismatch);
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize.checked_add(header_len).filter(|&e| e <= body_len).ok_or(NeuralError::Truncated)?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
        let mut payload = bytes[header_end..body_len].chunks_exact(8);
        if payload.remainder().len() != 0 {
            return Err(NeuralError::Truncated);
        }
        let mut take = |n: usize| -> Result<Vec<f64>, NeuralError> {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let chunk = payload.next().ok_or(NeuralError::Truncated)?;
                v.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            Ok(v)
        };
        let mut networks = BTreeMap::new();
        for entry in header.networks {
            let mut net = Mlp::zeros(entry.spec)?;
            let params = take(net.num_params())?;
            net.set_params(&params)?;
            networks.insert(entry.name, net);
        }
        let mut optimizers = BTreeMap::new();
        for entry in header.optimizers {
            let m = take(entry.len)?;
            let v = take(entry.len)?;
            optimizers.insert(entry.name, Adam { config: entry.config, m, v, t: entry.steps });
        }
        let mut arrays = BTreeMap::new();
        for entry in header.arrays {
            arrays.insert(entry.name, take(entry.len)?);
        }
        if payload.next().is_some() {
            return Err(NeuralError::Truncated);
        }
        Ok(Self { kind: header.kind, metadata: header.metadata, networks, optimizers, arrays })
    }

    /// Write via a temporary sibling and rename, so a crash never leaves a partial file.
    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
