//! Run manifests: what ran, with which inputs, producing which outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use af1_core::util::sha256_hex;
use af1_core::Error as CoreError;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::Config;

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Config,
    pub seeds: BTreeMap<String, u64>,
    pub workers: usize,
    pub tool_version: String,
    /// Workspace-relative path to sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Command-specific facts (selected cell, timings, ...).
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| {
        anyhow::Error::new(CoreError::Missing(format!("{}: {e}", path.display())))
    })?;
    Ok(sha256_hex(&bytes))
}

/// Collects inputs and outputs of one command invocation.
pub struct Run<'a> {
    pub workspace: &'a Path,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    pub fn new(workspace: &'a Path, command: &str, argv: Vec<String>, config: &Config, workers: usize) -> Self {
        Self {
            workspace,
            manifest: RunManifest {
                command: command.to_string(),
                argv,
                config: config.clone(),
                seeds: config.seeds(),
                workers,
                tool_version: TOOL_VERSION.to_string(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                notes: BTreeMap::new(),
            },
        }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(self.workspace)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned()
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = file_hash(path)?;
        self.manifest.inputs.insert(self.key(path), hash);
        Ok(())
    }

    /// Write `bytes` to `path` (creating parent directories) and record it.
    pub fn output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record_output(path)
    }

    /// Record a file some library call already wrote.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let hash = file_hash(path)?;
        self.manifest.outputs.insert(self.key(path), hash);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.manifest
            .notes
            .insert(key.to_string(), serde_json::to_value(value).expect("note serialises"));
    }

    /// Write the manifest to `manifests/<name>.json` and return its path.
    pub fn finish(self, name: &str) -> Result<PathBuf> {
        let path = self.workspace.join("manifests").join(format!("{name}.json"));
        std::fs::create_dir_all(path.parent().unwrap())?;
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(path)
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Missing(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Every recorded file of `kind` must still hash to its recorded value.
    pub fn verify(&self, workspace: &Path, outputs: bool) -> Result<()> {
        let files = if outputs { &self.outputs } else { &self.inputs };
        for (rel, want) in files {
            let got = file_hash(&workspace.join(rel))?;
            if &got != want {
                return Err(CoreError::Integrity(format!(
                    "{rel} hashes to {got}, manifest of `{}` recorded {want}",
                    self.command
                ))
                .into());
            }
        }
        Ok(())
    }
}
