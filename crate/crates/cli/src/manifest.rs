//! Per-run manifest. Written on success and on failure alike.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

use msp::corpus::{CORPUS_FORMAT, CORPUS_VERSION};
use msp::model::CHECKPOINT_VERSION;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct Formats {
    pub manifest: u32,
    pub corpus: String,
    pub checkpoint: u32,
}

impl Default for Formats {
    fn default() -> Self {
        Self {
            manifest: MANIFEST_VERSION,
            corpus: format!("{CORPUS_FORMAT}/{CORPUS_VERSION}"),
            checkpoint: CHECKPOINT_VERSION,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Output {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub status: &'static str,
    /// Last stage entered; on failure, the one that failed.
    pub stage: String,
    pub error: Option<String>,
    pub seed: Option<u64>,
    /// Effective configuration after `--seed` and `--override`.
    pub config: Option<serde_json::Value>,
    pub overrides: Vec<String>,
    pub formats: Formats,
    pub outputs: Vec<Output>,
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(format!("{:x}", Sha256::digest(fs::read(path)?)))
}

impl Manifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::file_name(&self.command));
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}
