use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub status: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Resolved experiment config.
    pub config: serde_json::Value,
    /// SHA-256 of every file the run wrote, keyed by relative path.
    pub files: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Creates `dir`, refusing to reuse one that already exists.
pub fn create_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::OutputCollision(dir.display().to_string()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Tracks files written into a run directory and the headline metrics.
#[derive(Debug)]
pub struct RunRecorder {
    pub dir: PathBuf,
    command: String,
    started: u64,
    files: Vec<String>,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

impl RunRecorder {
    pub fn new(dir: &Path, command: &str) -> Self {
        Self { dir: dir.to_path_buf(), command: command.into(), started: unix_now(), files: Vec::new(), metrics: BTreeMap::new() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.path(name), contents)?;
        self.track(name);
        Ok(())
    }

    pub fn track(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.metrics.insert(key.to_string(), v);
    }

    pub fn finish(self, config: &impl Serialize, status: &str) -> Result<RunManifest> {
        let mut files = BTreeMap::new();
        for f in &self.files {
            files.insert(f.clone(), sha256_file(&self.dir.join(f))?);
        }
        let manifest = RunManifest {
            tool: "ntklab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            status: status.into(),
            started_unix: self.started,
            finished_unix: unix_now(),
            config: serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?,
            files,
            metrics: self.metrics,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}
