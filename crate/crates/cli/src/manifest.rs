use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use kinefit_core::io::write_json;

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written as `manifest.json` at the end of a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_sha256: String,
    pub inputs: Vec<InputHash>,
    pub seed: Option<u64>,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub status: String,
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<InputHash> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputHash {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Collects inputs and outputs over a run and writes the manifest into `out`.
pub struct Recorder {
    pub out: PathBuf,
    file_name: String,
    command: String,
    started: String,
    config_sha256: String,
    inputs: Vec<InputHash>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
}

impl Recorder {
    pub fn new(command: &str, out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            file_name: "manifest.json".into(),
            command: command.to_string(),
            started: now(),
            config_sha256: sha256_hex(b""),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
        }
    }

    pub fn file_name(mut self, name: &str) -> Self {
        self.file_name = name.into();
        self
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config_sha256 = sha256_hex(serde_json::to_string(config)?.as_bytes());
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        if !self.inputs.iter().any(|h| h.path == path) {
            self.inputs.push(hash_file(path)?);
        }
        Ok(())
    }

    /// Path of an output file inside `out`, recorded for the manifest.
    pub fn output(&mut self, name: impl AsRef<Path>) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    pub fn finish(self, status: &str) -> Result<()> {
        let path = self.out.join(&self.file_name);
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            config_sha256: self.config_sha256,
            inputs: self.inputs,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: self.started,
            finished: now(),
            status: status.to_string(),
            outputs: self.outputs,
        };
        write_json(&path, &manifest).with_context(|| format!("writing {}", path.display()))
    }
}
