use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// SHA-256 of `"blob <len>\0" ++ bytes`, the hashing scheme git uses for objects.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(blob_hash(&bytes))
}

#[derive(Clone, Debug, Serialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub blob_sha256: String,
    pub bytes: u64,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(Self { path: path.to_path_buf(), blob_sha256: blob_hash(&bytes), bytes: bytes.len() as u64 })
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    /// Hash of command, resolved config and input hashes; equal ids mean equal runs.
    pub run_id: String,
    pub started_at: String,
    pub finished_at: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub extra: serde_json::Value,
}

pub struct ManifestBuilder {
    command: String,
    started_at: String,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<FileRecord>,
    extra: serde_json::Value,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl ManifestBuilder {
    pub fn start(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            started_at: now(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            extra: serde_json::Value::Object(Default::default()),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs.push(FileRecord::of(path)?);
        Ok(self)
    }

    pub fn extra(&mut self, key: &str, value: impl Serialize) -> Result<&mut Self> {
        self.extra[key] = serde_json::to_value(value)?;
        Ok(self)
    }

    pub fn run_id(&self) -> String {
        let mut key = format!("{}\n{}\n{}\n", self.command, self.seed, self.config);
        for i in &self.inputs {
            key.push_str(&i.blob_sha256);
            key.push('\n');
        }
        blob_hash(key.as_bytes())[..16].to_string()
    }

    /// Hash the outputs and write `manifest.json` into `dir`.
    pub fn finish(self, dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf> {
        let outputs = outputs.iter().map(|p| FileRecord::of(p)).collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            tool: "romgait",
            version: env!("CARGO_PKG_VERSION"),
            run_id: self.run_id(),
            command: self.command,
            argv: std::env::args().collect(),
            started_at: self.started_at,
            finished_at: now(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs,
            extra: self.extra,
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_objects() {
        // `git hash-object` in a sha256 repository, for an empty file and for "hello\n"
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
        assert_eq!(blob_hash(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
    }

    #[test]
    fn run_id_depends_on_config_and_seed() {
        let a = ManifestBuilder::start("x", 1, &serde_json::json!({"a": 1})).unwrap().run_id();
        let b = ManifestBuilder::start("x", 2, &serde_json::json!({"a": 1})).unwrap().run_id();
        let c = ManifestBuilder::start("x", 1, &serde_json::json!({"a": 1})).unwrap().run_id();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
