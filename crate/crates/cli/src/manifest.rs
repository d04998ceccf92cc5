//! Run manifests written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use duoserve_core::digest::file_sha256;
use serde::Serialize;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub config_paths: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_paths: Vec::new(),
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix_ms: now_ms(),
                finished_unix_ms: 0,
            },
        }
    }

    pub fn config(&mut self, path: &Path) -> &mut Self {
        self.manifest.config_paths.push(path.to_path_buf());
        self
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.manifest.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn input(&mut self, name: &str, digest: &str) -> &mut Self {
        self.manifest.inputs.insert(name.to_string(), digest.to_string());
        self
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        let digest = file_sha256(path).with_context(|| format!("hashing {}", path.display()))?;
        self.manifest.outputs.insert(name.to_string(), digest);
        Ok(self)
    }

    /// Writes `<primary>.manifest.json`.
    pub fn finish(&mut self, primary: &Path) -> Result<PathBuf> {
        self.manifest.finished_unix_ms = now_ms();
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn digest_of(path: &Path) -> Result<String> {
    file_sha256(path).with_context(|| format!("reading {}", path.display()))
}
