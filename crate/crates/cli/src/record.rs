use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance of one command invocation, written as `run.json`.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    /// Effective configuration, in the command's key-value format.
    pub config: String,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub outputs: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunRecord {
    pub fn start(command: &str, seed: u64, config: String) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(seed.to_le_bytes());
        h.update(config.as_bytes());
        let digest = format!("{:x}", h.finalize());
        Self {
            run_id: format!("{command}-{}", &digest[..12]),
            command: command.to_string(),
            seed,
            config,
            started_at: now(),
            finished_at: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Checks every listed output exists, then writes `<dir>/run.json`.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        if let Some(missing) = self.outputs.iter().find(|p| !p.exists()) {
            bail!("expected output {} was not written", missing.display());
        }
        let path = dir.join("run.json");
        self.outputs.push(path.clone());
        self.finished_at = now();
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
