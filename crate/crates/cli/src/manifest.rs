//! Run manifests: a JSON sidecar written next to every output artifact
//! recording what produced it. For deterministic commands, replaying the
//! recorded invocation reproduces the artifact bit for bit; the manifest
//! itself carries wall-clock duration and is not byte-stable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::fsutil;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully materialized settings, defaults included.
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub tool_version: String,
    pub duration_seconds: f64,
}

/// Collects manifest fields over the life of one command.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: BTreeMap<String, String>, seed: u64) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_owned(),
                config,
                inputs: Vec::new(),
                outputs: Vec::new(),
                seed,
                tool_version: env!("CARGO_PKG_VERSION").to_owned(),
                duration_seconds: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    /// Writes `<artifact>.manifest.json` beside the first recorded
    /// output (or beside `fallback` when the command wrote no files).
    pub fn finish(mut self, fallback: Option<&Path>) -> Result<Option<PathBuf>> {
        self.manifest.duration_seconds = self.started.elapsed().as_secs_f64();
        let anchor = match self.manifest.outputs.first() {
            Some(first) => PathBuf::from(first),
            None => match fallback {
                Some(p) => p.to_path_buf(),
                None => return Ok(None),
            },
        };
        let mut name = anchor
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_else(|| "run".into());
        name.push(".manifest.json");
        let path = anchor.with_file_name(name);
        let body = serde_json::to_vec_pretty(&self.manifest)
            .expect("manifest serialization is infallible");
        fsutil::write_atomic(&path, &body)?;
        Ok(Some(path))
    }
}
