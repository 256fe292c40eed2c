//! Run manifests and output-directory locking.
//!
//! Every command writes a `manifest.json` recording the exact invocation,
//! SHA-256 hashes of its inputs, the seed, the tool version, and start/end
//! timestamps. Identical flags, inputs, and seed reproduce identical
//! outputs; the timestamps are the only varying fields.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_SCHEMA_VERSION: &str = "wordkrill-manifest-v1";

pub struct ManifestBuilder {
    started_at: f64,
    command: Vec<String>,
    inputs: Vec<(String, String)>,
    seed: Option<u64>,
    config: serde_json::Value,
}

impl ManifestBuilder {
    pub fn new() -> Self {
        Self {
            started_at: epoch_seconds(),
            command: std::env::args().collect(),
            inputs: Vec::new(),
            seed: None,
            config: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = sha256_file(path)?;
        self.inputs.push((path.display().to_string(), digest));
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn config(&mut self, config: serde_json::Value) {
        self.config = config;
    }

    pub fn write(self, dir: &Path) -> Result<(), CliError> {
        let manifest = serde_json::json!({
            "version": MANIFEST_SCHEMA_VERSION,
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs
                .iter()
                .map(|(p, h)| serde_json::json!({"path": p, "sha256": h}))
                .collect::<Vec<_>>(),
            "seed": self.seed,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "started_at_epoch_s": self.started_at,
            "finished_at_epoch_s": epoch_seconds(),
        });
        write_json(&dir.join("manifest.json"), &manifest)
    }
}

fn epoch_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::input(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

/// Exclusive lock on an output directory for the duration of a run.
/// Creating the lock file fails when another run owns the directory; it is
/// removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".wordkrill.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::input(
                format!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(CliError::input(format!(
                "cannot lock {}: {e}",
                dir.display()
            ))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
