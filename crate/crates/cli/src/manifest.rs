//! Run manifests: what was run, with which settings, and what it wrote.

use std::path::{Path, PathBuf};
use std::time::Instant;

use aemlab::trainer::PhaseTimings;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<PathBuf>,
    /// Summed per-phase seconds, for commands that train.
    pub timings: Option<PhaseTimings>,
    pub wall_seconds: f64,
}

/// Collects outputs while a command runs and writes the manifest at the end.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> CliResult<Self> {
        Ok(Self {
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                config: serde_json::to_value(config)?,
                outputs: Vec::new(),
                timings: None,
                wall_seconds: 0.0,
            },
            started: Instant::now(),
        })
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        let path = path.into();
        if !self.manifest.outputs.contains(&path) {
            self.manifest.outputs.push(path);
        }
    }

    pub fn outputs<I: IntoIterator<Item = PathBuf>>(&mut self, paths: I) {
        for p in paths {
            self.output(p);
        }
    }

    pub fn timings(&mut self, t: PhaseTimings) {
        self.manifest.timings = Some(t);
    }

    /// Keeps only outputs that exist and are non-empty, relativizes them and
    /// writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> CliResult<RunManifest> {
        self.manifest.wall_seconds = self.started.elapsed().as_secs_f64();
        self.manifest.outputs = self
            .manifest
            .outputs
            .iter()
            .filter(|p| std::fs::metadata(p).map(|m| m.len() > 0).unwrap_or(false))
            .map(|p| p.strip_prefix(dir).unwrap_or(p).to_path_buf())
            .collect();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> CliResult<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
