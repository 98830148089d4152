use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Everything needed to rerun a command, plus checksums of what it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub notes: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config: config.clone(),
            seeds,
            notes: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Checksums `rel` (relative to `dir`) and records it.
    pub fn record(&mut self, dir: &Path, rel: &Path) -> Result<()> {
        let bytes = fs::read(dir.join(rel))?;
        self.artifacts.push(Artifact {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Names of artifacts whose current contents differ from the record.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for a in &self.artifacts {
            match fs::read(dir.join(&a.path)) {
                Ok(bytes) if sha256_hex(&bytes) == a.sha256 => {}
                _ => bad.push(a.path.clone()),
            }
        }
        Ok(bad)
    }
}
