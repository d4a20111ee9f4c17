//! Single-file checkpoints.
//!
//! Layout: the magic line, the manifest length as a little-endian `u64`,
//! the manifest as JSON, then every array's values as little-endian `f64`
//! in manifest order. Arrays are written in name order, so saving a loaded
//! checkpoint reproduces it byte for byte.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, ModelKind, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"LMPCAST-CHECKPOINT v1\n";

const LAPLACIAN: &str = "graph.laplacian";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{0}: not a checkpoint (bad magic line)")]
    Magic(String),
    #[error("{path}: corrupt checkpoint: {msg}")]
    Corrupt { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    node_ids: Vec<i64>,
    lambda_max: Option<f64>,
    arrays: Vec<ArrayEntry>,
    /// Free-form run metadata (hyperparameters, epoch, metrics).
    meta: serde_json::Value,
}

/// A model together with what is needed to use it standalone.
pub struct Checkpoint {
    pub model: Model,
    pub node_ids: Vec<i64>,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    node_ids: &[i64],
    meta: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut arrays: Vec<(&str, &Tensor)> = model.params.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let laplacian = model.basis.as_ref().map(|b| {
        let n = b.laplacian.nrows();
        // row-major copy of the (symmetric) Laplacian
        let data = (0..n * n).map(|i| b.laplacian[(i / n, i % n)]).collect();
        Tensor::new(vec![n, n], data).expect("square")
    });
    if let Some(l) = &laplacian {
        arrays.push((LAPLACIAN, l));
    }
    arrays.sort_by(|a, b| a.0.cmp(b.0));
    let manifest = Manifest {
        config: model.config.clone(),
        node_ids: node_ids.to_vec(),
        lambda_max: model.basis.as_ref().map(|b| b.lambda_max),
        arrays: arrays
            .iter()
            .map(|(name, t)| ArrayEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut buf = Vec::with_capacity(json.len() + 8 * model.parameter_count() + 64);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &arrays {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;
    f.sync_all().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let p = path.display().to_string();
    let corrupt = |msg: String| CheckpointError::Corrupt { path: p.clone(), msg };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: p.clone(),
            source,
        })?;
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| CheckpointError::Magic(p.clone()))?;
    if rest.len() < 8 {
        return Err(corrupt("truncated header".into()));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(corrupt("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&rest[..len]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let mut data = &rest[len..];
    let mut params = ParamStore::new();
    let mut laplacian = None;
    for entry in &manifest.arrays {
        let n: usize = entry.shape.iter().product();
        if data.len() < 8 * n {
            return Err(corrupt(format!("array {} truncated", entry.name)));
        }
        let values: Vec<f64> = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        let t = Tensor::new(entry.shape.clone(), values).map_err(|e| corrupt(e.to_string()))?;
        if entry.name == LAPLACIAN {
            laplacian = Some(t);
        } else {
            params.insert(entry.name.clone(), t);
        }
    }
    if !data.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", data.len())));
    }
    let basis = match (manifest.config.kind, laplacian, manifest.lambda_max) {
        (ModelKind::Mlp, _, _) => None,
        (_, Some(l), Some(lmax)) => {
            let n = l.shape()[0];
            let m = DMatrix::from_row_slice(n, n, l.data());
            Some(Model::basis_from_laplacian(&m, lmax, manifest.config.k)?)
        }
        _ => return Err(corrupt("graph variant without a stored Laplacian".into())),
    };
    let model = Model::from_parts(manifest.config, params, basis)?;
    Ok(Checkpoint {
        model,
        node_ids: manifest.node_ids,
        meta: manifest.meta,
    })
}
