use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::exit::Exit;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// One per command invocation, written to `<run dir>/run_manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Config file contents after defaults and flag overrides, plus command arguments.
    pub resolved_config: serde_json::Value,
    /// sha256 of `resolved_config`.
    pub config_hash: String,
    pub artifacts: Vec<PathBuf>,
    pub started: String,
    pub finished: String,
    /// `success` or `failed`.
    pub status: String,
    pub exit_code: i32,
    pub message: Option<String>,
    /// Command-specific facts, e.g. the effective λ or whether an export was unchanged.
    pub details: serde_json::Map<String, serde_json::Value>,
}

impl RunManifest {
    pub fn succeeded(&self) -> bool {
        self.status == "success" && self.exit_code == 0
    }

    pub fn finish(&mut self, exit: Exit, message: Option<String>) {
        self.finished = now();
        self.exit_code = exit.code();
        self.status = if exit == Exit::Success {
            "success"
        } else {
            "failed"
        }
        .into();
        self.message = message;
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
