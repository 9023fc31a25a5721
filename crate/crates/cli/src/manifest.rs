//! Run manifest: one JSON document per command invocation recording the
//! config snapshot, seed, code version, platform fingerprint, timestamps,
//! and the artifacts the run produced. Written atomically at run start and
//! finalized on success, so a run is reproducible from the manifest alone.

use anyhow::Result;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Platform {
    pub os: String,
    pub arch: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub platform: Platform,
    pub started_at_unix: u64,
    pub finished_at_unix: Option<u64>,
    pub artifacts: Vec<String>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(
        dir: &Path,
        command: &str,
        config: serde_json::Value,
        seed: Option<u64>,
    ) -> Result<(RunManifest, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let manifest = RunManifest {
            schema: holon::SCHEMA_VERSION,
            command: command.to_string(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            platform: Platform {
                os: std::env::consts::OS.to_string(),
                arch: std::env::consts::ARCH.to_string(),
            },
            started_at_unix: now_unix(),
            finished_at_unix: None,
            artifacts: Vec::new(),
        };
        let path = dir.join("run_manifest.json");
        manifest.write(&path)?;
        Ok((manifest, path))
    }

    /// Record produced artifacts and the finish time; every listed path must
    /// exist.
    pub fn finish(mut self, path: &Path, artifacts: &[PathBuf]) -> Result<()> {
        for a in artifacts {
            anyhow::ensure!(a.exists(), "artifact {} missing at finish", a.display());
            self.artifacts.push(a.display().to_string());
        }
        self.finished_at_unix = Some(now_unix());
        self.write(path)
    }

    fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}
