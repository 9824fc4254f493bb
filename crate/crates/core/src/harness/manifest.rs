//! Run manifests and declared stage inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::records::write_atomic;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Done,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seed: u64,
    /// Paths the stage declared it may read, relative to the run directory.
    pub inputs: Vec<PathBuf>,
    /// Paths it actually read.
    pub reads: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the configuration bytes in `config.toml`.
    pub config_sha256: String,
    pub code_version: String,
    pub master_seed: u64,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(config_bytes: &[u8], master_seed: u64) -> Self {
        Self {
            config_sha256: sha256_hex(config_bytes),
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            master_seed,
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Replaces the record of the same stage or appends.
    pub fn record(&mut self, rec: StageRecord) {
        match self.stages.iter_mut().find(|s| s.name == rec.name) {
            Some(s) => *s = rec,
            None => self.stages.push(rec),
        }
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&run_dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn read(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Records {
                path,
                line: e.line(),
                reason: e.to_string(),
            })
    }
}

/// File access for one stage: reads must be declared up front.
#[derive(Debug)]
pub struct StageIo {
    root: PathBuf,
    stage: String,
    declared: Vec<(PathBuf, String)>,
    reads: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl StageIo {
    /// `declared` pairs each readable path with the stage that produces it.
    pub fn new(root: &Path, stage: &str, declared: Vec<(PathBuf, String)>) -> Self {
        Self {
            root: root.to_path_buf(),
            stage: stage.to_string(),
            declared,
            reads: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Absolute path of a declared, existing input.
    pub fn input(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let rel = rel.as_ref();
        let Some((_, producer)) = self.declared.iter().find(|(p, _)| p == rel) else {
            return Err(Error::UndeclaredRead {
                stage: self.stage.clone(),
                path: rel.to_path_buf(),
            });
        };
        let abs = self.root.join(rel);
        if !abs.exists() {
            return Err(Error::MissingArtifact {
                path: abs,
                producer: producer.clone(),
            });
        }
        if !self.reads.iter().any(|p| p == rel) {
            self.reads.push(rel.to_path_buf());
        }
        Ok(abs)
    }

    /// Absolute path for an artifact this stage writes.
    pub fn output(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let rel = rel.as_ref();
        let abs = self.root.join(rel);
        if let Some(dir) = abs.parent() {
            fs::create_dir_all(dir)?;
        }
        if !self.artifacts.iter().any(|p| p == rel) {
            self.artifacts.push(rel.to_path_buf());
        }
        Ok(abs)
    }

    pub fn declared(&self) -> Vec<PathBuf> {
        self.declared.iter().map(|(p, _)| p.clone()).collect()
    }

    pub fn reads(&self) -> &[PathBuf] {
        &self.reads
    }

    pub fn artifacts(&self) -> &[PathBuf] {
        &self.artifacts
    }
}
