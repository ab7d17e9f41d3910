//! Run manifest written next to every command's outputs so results can be
//! traced back to the configuration, geometry, and tool version that made
//! them. Timestamps are deliberately absent: identical runs must produce
//! byte-identical outputs.

use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_path: Option<String>,
    pub geometry_hash: String,
    pub cache_dir: Option<String>,
    pub seed: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        geometry_hash: String,
        config_path: &Option<PathBuf>,
        cache_dir: &Option<PathBuf>,
        seed: u64,
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: config_path.as_ref().map(|p| p.display().to_string()),
            geometry_hash,
            cache_dir: cache_dir.as_ref().map(|p| p.display().to_string()),
            seed,
            outputs: Vec::new(),
        }
    }

    pub fn record(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, out_dir: &Path) -> anyhow::Result<()> {
        let path = out_dir.join("run_manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
