use std::path::Path;

use pretr::evaluation::build_id;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Serialize)]
pub struct Manifest<'a> {
    /// Hash of everything below except `build`; named by every output file.
    pub id: String,
    pub command: &'a str,
    pub data_source: String,
    pub config: &'a RunConfig,
    pub build: String,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, data_source: String, config: &'a RunConfig) -> Self {
        let body = serde_json::json!({ "command": command, "data_source": data_source, "config": config });
        let digest = Sha256::digest(body.to_string().as_bytes());
        let id = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        Self { id, command, data_source, config, build: build_id() }
    }

    pub fn write(&self, dir: &Path) -> pretr::Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| io(&path, e))
    }
}

/// Wraps a filesystem failure in the library error type.
pub fn io(path: &Path, e: std::io::Error) -> pretr::Error {
    pretr::Error::Io { path: path.to_path_buf(), source: e }
}
