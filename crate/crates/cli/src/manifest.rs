use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use cadaft::data::content_hash;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::Failure;

pub const MANIFEST_FORMAT: &str = "cadaft-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    /// Split name, or what the file is for.
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(role: impl Into<String>, path: &Path) -> Result<Self, Failure> {
        let bytes = fs::read(path)
            .map_err(|e| Failure::runtime(format!("cannot hash {}: {e}", path.display())))?;
        Ok(Self::of_bytes(role, path, &bytes))
    }

    pub fn of_bytes(role: impl Into<String>, path: &Path, bytes: &[u8]) -> Self {
        FileHash {
            role: role.into(),
            path: path.display().to_string(),
            sha256: content_hash(bytes),
        }
    }
}

/// Everything needed to rerun a command: the resolved configuration, the
/// seed, and hashes of every dataset read or written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    pub datasets: Vec<FileHash>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub warnings: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&RunConfig>) -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: config.map_or(0, |c| c.seed),
            seeds: Vec::new(),
            alpha: None,
            config: config.cloned(),
            datasets: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
            warnings: Vec::new(),
        }
    }

    pub fn write(mut self, path: &Path) -> Result<(), Failure> {
        self.finished_unix = unix_now();
        let mut bytes = serde_json::to_vec_pretty(&self).map_err(Failure::runtime)?;
        bytes.push(b'\n');
        fs::write(path, bytes)
            .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
    }
}
