use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use gradsynth::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "gradsynth";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub name: String,
    pub sha256: String,
}

/// Everything needed to rerun a command bit-exactly. Paths are relative to the
/// manifest's directory; inputs are identified by content hash.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Timing {
    wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &'static str, config: serde_json::Value) -> Self {
        RunManifest {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        self.inputs.push(InputDigest {
            name: file_name(path),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(file_name(path));
    }

    /// Writes `<stem>.json` and the `<stem>.timing.json` sidecar. Wall-clock time lives
    /// in the sidecar so the manifest itself is byte-reproducible.
    pub fn write(&self, dir: &Path, stem: &str, elapsed: Duration) -> Result<PathBuf> {
        let path = dir.join(format!("{stem}.json"));
        write_json_atomic(&path, self)?;
        let timing = Timing {
            wall_clock_seconds: elapsed.as_secs_f64(),
        };
        write_json_atomic(&dir.join(format!("{stem}.timing.json")), &timing)?;
        Ok(path)
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write to a sibling temp file, then rename over the target.
fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}
