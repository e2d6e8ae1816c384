use std::path::Path;

use anyhow::Result;
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written when the run finishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, workers: Option<usize>) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::Value::Null,
            seed: None,
            workers,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn with_config<T: Serialize>(mut self, config: &T, seed: Option<u64>) -> Result<Self> {
        self.config = serde_json::to_value(config)?;
        self.seed = seed;
        Ok(self)
    }

    /// Stamps the end time and writes the manifest atomically to `path`.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_at = now();
        let bytes = serde_json::to_vec_pretty(&self)?;
        reid_core::checkpoint::write_atomic(path, &bytes)?;
        Ok(())
    }
}
