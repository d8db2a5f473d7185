use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use densecontrast::io::write_atomic;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written before a command produces anything else; the outputs it lists
/// carry its `run_id`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Stable hash of command, config and seed: equal for reproducible reruns.
    pub run_id: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<String>,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Value, inputs: Vec<String>, artifacts: Vec<String>) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in command.bytes().chain(config.to_string().into_bytes()).chain(seed.to_le_bytes()) {
            h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        }
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            run_id: format!("{h:016x}"),
            seed,
            config,
            inputs,
            artifacts,
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }
}
