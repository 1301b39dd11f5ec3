//! Run reports. The deterministic payload and the wall-clock timing live in
//! separate fields so two runs of the same command diff cleanly.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{io_error, CliResult};

pub const TOOL: &str = "geoloc";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// SHA-256 hex digest of `command` plus the canonical JSON of `config`.
/// Struct fields serialize in declaration order, so equal configs hash
/// equally regardless of flag order on the command line.
pub fn config_hash<T: Serialize>(command: &str, config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0u8]);
    h.update(json.as_bytes());
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// The parsed configuration of the subcommand, flags and defaults merged.
    pub config: Value,
    pub config_hash: String,
    pub outputs: Vec<String>,
    /// Everything that must be identical across repeated seeded runs.
    pub payload: Value,
    /// Wall-clock measurements; excluded from determinism comparisons.
    pub timing: Value,
}

impl RunReport {
    pub fn new<T: Serialize>(command: &str, config: &T) -> Self {
        Self {
            tool: TOOL,
            version: VERSION,
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            config_hash: config_hash(command, config),
            outputs: Vec::new(),
            payload: Value::Object(Default::default()),
            timing: Value::Object(Default::default()),
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename, so
/// readers never observe a partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}
