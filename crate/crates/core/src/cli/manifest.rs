use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Record of one CLI run, written beside its primary output as
/// `<output>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) struct ManifestBuilder {
    subcommand: &'static str,
    started: Instant,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(subcommand: &'static str) -> Self {
        Self {
            subcommand,
            started: Instant::now(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, value: &impl Serialize) -> Result<()> {
        self.config = serde_json::to_value(value)?;
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_owned(), seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_owned());
    }

    /// Writes the manifest beside `primary` and returns its path.
    pub fn finish(self, primary: &Path) -> Result<PathBuf> {
        let manifest = RunManifest {
            subcommand: self.subcommand.to_owned(),
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
        };
        let path = manifest_path(primary);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
