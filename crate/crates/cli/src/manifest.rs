use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rfpnapo_core::config::RunConfig;
use rfpnapo_core::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written beside every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub subcommand: String,
    pub command_line: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    /// Subcommand-specific results such as stage counts or final loss.
    pub details: BTreeMap<String, serde_json::Value>,
    /// The only field expected to differ between identical reruns.
    pub wall_time_s: f64,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str, argv: &[String]) -> Self {
        ManifestBuilder {
            started: Instant::now(),
            manifest: RunManifest {
                artifact_version: env!("CARGO_PKG_VERSION").to_string(),
                subcommand: subcommand.to_string(),
                command_line: argv.to_vec(),
                config: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                details: BTreeMap::new(),
                wall_time_s: 0.0,
            },
        }
    }

    pub fn manifest_config(&mut self, cfg: &RunConfig) {
        self.manifest.config = cfg
            .entries()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.manifest.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn detail(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.manifest.details.insert(key.to_string(), value.into());
    }

    /// Writes `bytes` to `path` and records its hash.
    pub fn write_output(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        std::fs::write(path, bytes)?;
        self.manifest.outputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Stamps the wall time and writes `<out>.manifest.json`.
    pub fn finish(mut self, out: &Path) -> CliResult<RunManifest> {
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| crate::CliError::new(1, format!("cannot serialize manifest: {e}")))?;
        std::fs::write(manifest_path(out), text + "\n")?;
        Ok(self.manifest)
    }
}

/// `<out>.<suffix>`, keeping any extension already on `out`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, "manifest.json")
}

pub fn metrics_path(out: &Path) -> PathBuf {
    sibling(out, "metrics.csv")
}

pub fn read_manifest(out: &Path) -> CliResult<RunManifest> {
    let text = std::fs::read_to_string(manifest_path(out))?;
    serde_json::from_str(&text).map_err(|e| crate::CliError::new(5, format!("bad manifest: {e}")))
}
