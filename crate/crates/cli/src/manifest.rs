//! Run manifests: every command records what it read, what it wrote, and
//! the configuration hash, so any run can be reproduced from its manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_SCHEMA: &str = "m2manifest/1";
pub const MANIFEST_FILE: &str = "run-manifest.json";

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    schema: &'static str,
    command: &'a str,
    version: &'static str,
    /// The effective configuration, embedded verbatim: re-running the same
    /// command with this config and the recorded inputs reproduces the
    /// outputs byte for byte.
    config: &'a serde_json::Value,
    config_sha256: String,
    seeds: &'a [u64],
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
    wall_time_ms: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Accumulates a run's inputs and outputs, then writes the manifest.
pub struct RunContext {
    command: String,
    out_dir: PathBuf,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: Instant,
}

impl RunContext {
    pub fn new(
        command: &str,
        out_dir: &Path,
        config: &impl Serialize,
    ) -> Result<RunContext, CliError> {
        let config = serde_json::to_value(config)
            .map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))?;
        fs::create_dir_all(out_dir).map_err(|e| {
            CliError::Runtime(format!("cannot create {}: {e}", out_dir.display()))
        })?;
        Ok(RunContext {
            command: command.to_string(),
            out_dir: out_dir.to_path_buf(),
            config,
            seeds: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn record_seeds(&mut self, seeds: impl IntoIterator<Item = u64>) {
        self.seeds.extend(seeds);
    }

    /// Reads an input file, remembering its digest under the path as given.
    pub fn read_input(&mut self, path: &Path) -> Result<String, CliError> {
        let bytes = fs::read(path).map_err(|e| {
            CliError::Validation(format!("cannot read {}: {e}", path.display()))
        })?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        String::from_utf8(bytes).map_err(|e| {
            CliError::Validation(format!("{} is not UTF-8: {e}", path.display()))
        })
    }

    /// Writes `name` under the output directory (atomically) and records
    /// its digest. `name` may contain subdirectories.
    pub fn write_output(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| {
                CliError::Runtime(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
        m2_core::util::write_atomic(&path, bytes)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Digests a file some other component already wrote under the output
    /// directory.
    pub fn record_output_file(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| {
            CliError::Runtime(format!("cannot read back {}: {e}", path.display()))
        })?;
        let name = path
            .strip_prefix(&self.out_dir)
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| path.display().to_string());
        self.outputs.insert(name, sha256_hex(&bytes));
        Ok(())
    }

    /// Writes `run-manifest.json` and hands back its path. The manifest's
    /// own digest is deliberately not recorded anywhere.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let config_text = serde_json::to_string(&self.config)
            .map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))?;
        let manifest = RunManifest {
            schema: MANIFEST_SCHEMA,
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            config: &self.config,
            config_sha256: sha256_hex(config_text.as_bytes()),
            seeds: &self.seeds,
            inputs: &self.inputs,
            outputs: &self.outputs,
            wall_time_ms: self.started.elapsed().as_millis() as u64,
        };
        let text = m2_core::util::canonical_json_pretty(&manifest)
            .map_err(|e| CliError::Runtime(format!("cannot serialize manifest: {e}")))?;
        let path = self.out_dir.join(MANIFEST_FILE);
        m2_core::util::write_atomic(&path, text.as_bytes())
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}
