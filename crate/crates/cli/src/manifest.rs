use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Provenance sidecar written next to a command's primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl RunManifest {
    pub fn start(command: &str, config: &impl Serialize) -> Result<Self, CliError> {
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config: serde_json::to_value(config).map_err(weaver_core::Error::from)?,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0.0,
        })
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, path: &Path) -> Result<(), CliError> {
        self.finished_unix = now();
        let mut text = serde_json::to_string_pretty(&self).map_err(weaver_core::Error::from)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}

/// `<path>.<suffix>`, e.g. `moe.ewck.manifest.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
