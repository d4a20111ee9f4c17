//! Run manifests: what was run, with which settings, on which inputs, and
//! what it produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{invalid, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Resolved settings after flag, config-file and default precedence.
    pub config: serde_json::Value,
    /// Global seed and every derived per-component seed.
    pub seeds: BTreeMap<String, u64>,
    /// Combined hash over `inputs`.
    pub input_hash: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    /// Seconds since the epoch; `SOURCE_DATE_EPOCH` when set.
    pub created_unix: u64,
}

/// Hash of a file's bytes in the style of git's blob objects
/// (`sha256("blob <len>\0" ++ bytes)`), hex encoded.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Every regular file under `root` (or `root` itself), sorted by relative
/// path, skipping manifests.
fn files_under(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let err = |p: &Path, e: std::io::Error| invalid(format!("{}: {e}", p.display()));
    let meta = fs::metadata(root).map_err(|e| err(root, e))?;
    if meta.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| err(&dir, e))? {
            let path = entry.map_err(|e| err(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Hashes of every file under each root. Paths are shown relative to the
/// root's parent so a directory input reads as `data/loads.csv`.
pub fn hash_paths(roots: &[&Path]) -> Result<Vec<FileHash>, CliError> {
    let mut out = Vec::new();
    for root in roots {
        let base = if root.is_dir() { Some(*root) } else { root.parent() };
        let label = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for f in files_under(root)? {
            let bytes = fs::read(&f).map_err(|e| invalid(format!("{}: {e}", f.display())))?;
            let rel = match base {
                Some(b) if root.is_dir() => {
                    let r = f.strip_prefix(b).unwrap_or(&f);
                    format!("{label}/{}", r.to_string_lossy().replace('\\', "/"))
                }
                _ => label.clone(),
            };
            out.push(FileHash {
                path: rel,
                sha256: blob_hash(&bytes),
            });
        }
    }
    Ok(out)
}

/// Tree-style hash over `(path, hash)` pairs.
pub fn combined_hash(files: &[FileHash]) -> String {
    let mut h = Sha256::new();
    for f in files {
        h.update(format!("{} {}\n", f.sha256, f.path));
    }
    hex(&h.finalize())
}

pub fn created_unix() -> Result<u64, CliError> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| invalid(format!("SOURCE_DATE_EPOCH={v}: {e}"))),
        Err(_) => Ok(SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)),
    }
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        seeds: BTreeMap<String, u64>,
        inputs: &[&Path],
    ) -> Result<Self, CliError> {
        let inputs = hash_paths(inputs)?;
        Ok(RunManifest {
            tool: "lmpcast".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seeds,
            input_hash: combined_hash(&inputs),
            inputs,
            outputs: Vec::new(),
            created_unix: created_unix()?,
        })
    }

    /// Hashes the artifacts under `outputs` and writes the manifest to `path`.
    pub fn write(mut self, path: &Path, outputs: &[&Path]) -> Result<(), CliError> {
        self.outputs = hash_paths(outputs)?;
        let mut json = serde_json::to_string_pretty(&self).map_err(|e| invalid(e.to_string()))?;
        json.push('\n');
        fs::write(path, json).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }
}
