// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub setke: String,
    pub manifest: u32,
}

/// Record written beside every command's outputs, enough to re-run it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Command-specific options as given.
    pub options: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub config_sha256: String,
    pub config: RunConfig,
    pub versions: Versions,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(
        command: &str,
        options: serde_json::Value,
        config: &RunConfig,
        inputs: &[&Path],
    ) -> Result<Self> {
        let text = config.to_toml_string()?;
        Ok(Self {
            command: command.to_string(),
            options,
            inputs: inputs
                .iter()
                .map(|p| FileDigest::of(p))
                .collect::<Result<_>>()?,
            outputs: Vec::new(),
            seed: config.seed,
            config_sha256: sha256_hex(text.as_bytes()),
            config: config.clone(),
            versions: Versions {
                setke: env!("CARGO_PKG_VERSION").to_string(),
                manifest: 1,
            },
        })
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
