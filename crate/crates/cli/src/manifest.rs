//! The `manifest.json` every run leaves in its output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use peneo_core::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct Versions {
    pub peneo_cli: &'static str,
    pub peneo_core: &'static str,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub argv: Vec<String>,
    pub pipeline: &'a str,
    pub seed: u64,
    pub config: &'a RunConfig,
    /// Same configuration in the config-file format.
    pub config_text: String,
    pub config_hash: String,
    pub versions: Versions,
    /// SHA-256 of every input file or directory, keyed by role.
    pub inputs: &'a BTreeMap<String, String>,
    pub outputs: &'a [String],
    pub elapsed_seconds: f64,
}

impl Manifest<'_> {
    pub fn versions() -> Versions {
        Versions { peneo_cli: env!("CARGO_PKG_VERSION"), peneo_core: peneo_core::VERSION }
    }
}

/// SHA-256 of a file, or of the sorted `(relative name, contents)` stream of
/// a directory.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    } else {
        let mut entries: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for p in entries {
            h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
            h.update([0]);
            h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}
