//! Per-run manifest: resolved configuration plus content hashes of every
//! input and output file.

use std::path::{Path, PathBuf};

use depthdiff::data::png::{read_file, write_file};
use depthdiff::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub hash: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<FileRecord> {
        Ok(FileRecord { path: path.to_path_buf(), hash: content_hash(&read_file(path)?) })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &impl Serialize) -> Result<RunManifest> {
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config).map_err(|e| Error::Usage(format!("config: {e}")))?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileRecord::of(path)?);
        Ok(())
    }

    /// Writes `bytes` to `path` and records it as an output.
    pub fn emit(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_file(path, bytes)?;
        self.outputs.push(FileRecord { path: path.to_path_buf(), hash: content_hash(bytes) });
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileRecord::of(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Usage(format!("run manifest: {e}")))?;
        write_file(&dir.join("run.json"), format!("{text}\n").as_bytes())
    }
}
