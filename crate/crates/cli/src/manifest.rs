//! Per-run provenance record, written to `run_manifest.json` in the output
//! directory before any work starts and rewritten when the run ends.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const FILE_NAME: &str = "run_manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub build: String,
    pub inputs: Vec<InputHash>,
    /// SHA-256 over command, config, build and inputs. Two runs with the
    /// same hash produce the same numbers on the same platform.
    pub run_hash: String,
    pub status: String,
    pub started_unix: f64,
    pub wall_clock_secs: Option<f64>,
    pub outputs: Vec<OutputFile>,
    pub error: Option<String>,
    #[serde(skip)]
    dir: PathBuf,
    #[serde(skip)]
    clock: Option<Instant>,
}

pub fn build_id() -> String {
    format!(
        "{}+{}",
        env!("CARGO_PKG_VERSION"),
        option_env!("INTERACT_GIT_REV").unwrap_or("unknown")
    )
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Digest of a file, or of every regular file in a directory taken in name
/// order together with the names.
pub fn hash_input(path: &Path) -> Result<InputHash> {
    let sha256 = if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("cannot list {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.retain(|p| p.is_file());
        entries.sort();
        let mut h = Sha256::new();
        for p in entries {
            h.update(p.file_name().expect("file entry").to_string_lossy().as_bytes());
            h.update([0]);
            h.update(fs::read(&p).with_context(|| format!("cannot read {}", p.display()))?);
        }
        hex(&h.finalize())
    } else {
        sha256_file(path)?
    };
    Ok(InputHash {
        path: path.to_path_buf(),
        sha256,
    })
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, inputs: Vec<InputHash>) -> Self {
        let build = build_id();
        let identity = json!({
            "command": command,
            "config": config,
            "build": build,
            "inputs": inputs.iter().map(|i| &i.sha256).collect::<Vec<_>>(),
        });
        let run_hash = hex(&Sha256::digest(identity.to_string().as_bytes()));
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64());
        Self {
            command: command.to_string(),
            config: config.clone(),
            seed: config.seed,
            build,
            inputs,
            run_hash,
            status: "running".into(),
            started_unix,
            wall_clock_secs: None,
            outputs: Vec::new(),
            error: None,
            dir: config.output.dir.clone(),
            clock: Some(Instant::now()),
        }
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join(FILE_NAME)
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("cannot create {}", self.dir.display()))?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(self.path(), text + "\n").with_context(|| format!("cannot write {}", self.path().display()))
    }

    /// Records a finished output file by content hash.
    pub fn output(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.outputs.push(OutputFile {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn finish(&mut self, error: Option<String>) -> Result<()> {
        self.wall_clock_secs = self.clock.map(|c| c.elapsed().as_secs_f64());
        self.status = if error.is_some() { "failed" } else { "ok" }.into();
        self.error = error;
        self.write()
    }

    /// Tag embedded in JSON outputs so they point back at this run.
    pub fn stamp(&self) -> Value {
        json!({ "run_hash": self.run_hash, "manifest": FILE_NAME })
    }
}
