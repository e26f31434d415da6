use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::write_atomic;
use matchdiff::Result;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Record of one command invocation, written once the command finishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    pub outputs: Vec<String>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, config: Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: now(),
            finished: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished = now();
        self.outputs.sort();
        write_atomic(&dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&self)?.as_bytes())
    }
}
