//! Error metrics, comparison tables, attention export and plots.
//!
//! Every plot is written twice: a CSV with the exact values and a
//! self-contained SVG for viewing. The CSV is the artifact of record.

mod svg;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::Branch;
use crate::tensor::Tensor;

/// Ground-truth prices with smaller magnitude are left out of MAPE.
pub const MAPE_FLOOR: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("node id {0} not in the table")]
    UnknownNode(i64),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> EvalError + '_ {
    move |e| EvalError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> EvalError + '_ {
    move |e| EvalError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// $/MWh
    pub mae: f64,
    /// $/MWh
    pub rmse: f64,
    /// Percent, over node-hours with `|gt| >= MAPE_FLOOR`.
    pub mape: f64,
    /// Percent of hours whose congestion flag matches.
    pub s_accuracy: f64,
    pub node_hours: usize,
    pub mape_excluded: usize,
    /// One entry per column.
    pub per_node: Vec<NodeMetrics>,
}

/// MAE, RMSE and MAPE over all node-hours of `H x N` arrays, plus the
/// congestion-flag accuracy over hours.
pub fn compute_metrics(
    pred: &[Vec<f64>],
    gt: &[Vec<f64>],
    s_pred: &[u8],
    s_gt: &[u8],
) -> Result<MetricReport, EvalError> {
    if pred.is_empty() || pred[0].is_empty() {
        return Err(EvalError::Empty("no predictions"));
    }
    let n = pred[0].len();
    if gt.len() != pred.len() || pred.iter().chain(gt).any(|r| r.len() != n) {
        return Err(EvalError::Shape(format!(
            "predictions {}x{n} vs ground truth {} rows",
            pred.len(),
            gt.len()
        )));
    }
    if s_pred.len() != s_gt.len() || s_pred.len() != pred.len() {
        return Err(EvalError::Shape(format!(
            "{} predicted flags, {} true flags, {} hours",
            s_pred.len(),
            s_gt.len(),
            pred.len()
        )));
    }
    let mut abs = vec![0.0; n];
    let mut sq = vec![0.0; n];
    let (mut ape, mut ape_n, mut excluded) = (0.0, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        for i in 0..n {
            let d = p[i] - g[i];
            abs[i] += d.abs();
            sq[i] += d * d;
            if g[i].abs() < MAPE_FLOOR {
                excluded += 1;
            } else {
                ape += (d / g[i]).abs();
                ape_n += 1;
            }
        }
    }
    let h = pred.len() as f64;
    let total = h * n as f64;
    let hits = s_pred.iter().zip(s_gt).filter(|(a, b)| a == b).count();
    Ok(MetricReport {
        mae: abs.iter().sum::<f64>() / total,
        rmse: (sq.iter().sum::<f64>() / total).sqrt(),
        mape: if ape_n == 0 { 0.0 } else { 100.0 * ape / ape_n as f64 },
        s_accuracy: 100.0 * hits as f64 / s_pred.len() as f64,
        node_hours: pred.len() * n,
        mape_excluded: excluded,
        per_node: abs
            .iter()
            .zip(&sq)
            .map(|(a, s)| NodeMetrics {
                mae: a / h,
                rmse: (s / h).sqrt(),
            })
            .collect(),
    })
}

/// `100 (baseline - new) / baseline`; zero when both are zero.
pub fn improvement(new: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        if new == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        100.0 * (baseline - new) / baseline
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeComparison {
    pub node: i64,
    pub mae_new: f64,
    pub mae_baseline: f64,
    pub mae_improvement: f64,
    pub rmse_new: f64,
    pub rmse_baseline: f64,
    pub rmse_improvement: f64,
}

/// Per-node comparison of a model (`new`) against a baseline. Both metric
/// lists are aligned with `node_ids`; one row per requested node.
pub fn per_node_table(
    new: &[NodeMetrics],
    baseline: &[NodeMetrics],
    node_ids: &[i64],
    requested: &[i64],
) -> Result<Vec<NodeComparison>, EvalError> {
    if new.len() != node_ids.len() || baseline.len() != node_ids.len() {
        return Err(EvalError::Shape(format!(
            "{} and {} node metrics for {} nodes",
            new.len(),
            baseline.len(),
            node_ids.len()
        )));
    }
    requested
        .iter()
        .map(|&id| {
            let i = node_ids
                .iter()
                .position(|&n| n == id)
                .ok_or(EvalError::UnknownNode(id))?;
            let (a, b) = (new[i], baseline[i]);
            Ok(NodeComparison {
                node: id,
                mae_new: a.mae,
                mae_baseline: b.mae,
                mae_improvement: improvement(a.mae, b.mae),
                rmse_new: a.rmse,
                rmse_baseline: b.rmse,
                rmse_improvement: improvement(a.rmse, b.rmse),
            })
        })
        .collect()
}

pub fn write_node_table(path: &Path, rows: &[NodeComparison]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// `row,c0,c1,...` header, then one labelled row per matrix row.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<(), EvalError> {
    let s = m.shape();
    if s.len() != 2 {
        return Err(EvalError::Shape(format!("matrix expected, got {s:?}")));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["row".to_string()];
    header.extend((0..s[1]).map(|j| format!("c{j}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, row) in m.data().chunks(s[1]).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let cols = r.headers().map_err(csv_err(path))?.len().saturating_sub(1);
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        for field in rec.iter().skip(1) {
            data.push(field.parse::<f64>().map_err(|e| EvalError::Io {
                path: path.display().to_string(),
                msg: format!("row {rows}: {e}"),
            })?);
        }
        rows += 1;
    }
    Tensor::new(vec![rows, cols], data).map_err(|e| EvalError::Shape(e.to_string()))
}

/// Writes `<branch>_spatial.{csv,svg}` and `<branch>_temporal.{csv,svg}`.
pub fn export_attention(masks: &[(Branch, Tensor, Tensor)], dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for (branch, spatial, temporal) in masks {
        for (kind, m, label) in [("spatial", spatial, "node"), ("temporal", temporal, "hour")] {
            let stem = format!("{}_{kind}", branch.name());
            let csv = dir.join(format!("{stem}.csv"));
            write_matrix_csv(&csv, m)?;
            let svg = dir.join(format!("{stem}.svg"));
            let title = format!("{} branch, {kind} attention ({label} x {label})", branch.name());
            fs::write(&svg, svg::heat_map(m, &title)).map_err(io_err(&svg))?;
            written.extend([csv, svg]);
        }
    }
    Ok(written)
}

/// Aligned prediction and ground-truth series for one node.
pub fn emit_series_plot(
    pred: &[f64],
    gt: &[f64],
    hours: &[usize],
    node: i64,
    dir: &Path,
) -> Result<(PathBuf, PathBuf), EvalError> {
    if hours.is_empty() {
        return Err(EvalError::Empty("hour range"));
    }
    if pred.len() != hours.len() || gt.len() != hours.len() {
        return Err(EvalError::Shape(format!(
            "{} predictions, {} ground-truth values, {} hours",
            pred.len(),
            gt.len(),
            hours.len()
        )));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv = dir.join(format!("series_node{node}.csv"));
    let mut w = csv::Writer::from_path(&csv).map_err(csv_err(&csv))?;
    w.write_record(["hour", "prediction", "ground_truth"]).map_err(csv_err(&csv))?;
    for ((h, p), g) in hours.iter().zip(pred).zip(gt) {
        w.write_record([h.to_string(), p.to_string(), g.to_string()])
            .map_err(csv_err(&csv))?;
    }
    w.flush().map_err(io_err(&csv))?;
    let svg = dir.join(format!("series_node{node}.svg"));
    let xs: Vec<f64> = hours.iter().map(|&h| h as f64).collect();
    let doc = svg::line_chart(
        &format!("LMP at node {node}"),
        "hour",
        "$/MWh",
        &xs,
        &[("prediction", pred), ("ground truth", gt)],
    );
    fs::write(&svg, doc).map_err(io_err(&svg))?;
    Ok((csv, svg))
}

/// Per-node RMSE of two models side by side.
pub fn emit_per_node_rmse_plot(
    a: (&str, &MetricReport),
    b: (&str, &MetricReport),
    node_ids: &[i64],
    dir: &Path,
) -> Result<(PathBuf, PathBuf), EvalError> {
    let (na, ra) = a;
    let (nb, rb) = b;
    if ra.per_node.len() != rb.per_node.len() || ra.per_node.len() != node_ids.len() {
        return Err(EvalError::Shape(format!(
            "{} and {} nodes in the reports, {} node ids",
            ra.per_node.len(),
            rb.per_node.len(),
            node_ids.len()
        )));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv = dir.join("per_node_rmse.csv");
    let mut w = csv::Writer::from_path(&csv).map_err(csv_err(&csv))?;
    w.write_record(["node", &format!("rmse_{na}"), &format!("rmse_{nb}")])
        .map_err(csv_err(&csv))?;
    for ((id, x), y) in node_ids.iter().zip(&ra.per_node).zip(&rb.per_node) {
        w.write_record([id.to_string(), x.rmse.to_string(), y.rmse.to_string()])
            .map_err(csv_err(&csv))?;
    }
    w.flush().map_err(io_err(&csv))?;
    let xs: Vec<f64> = node_ids.iter().map(|&id| id as f64).collect();
    let ya: Vec<f64> = ra.per_node.iter().map(|m| m.rmse).collect();
    let yb: Vec<f64> = rb.per_node.iter().map(|m| m.rmse).collect();
    let svg = dir.join("per_node_rmse.svg");
    let doc = svg::line_chart("RMSE per node", "node", "RMSE ($/MWh)", &xs, &[(na, &ya), (nb, &yb)]);
    fs::write(&svg, doc).map_err(io_err(&svg))?;
    Ok((csv, svg))
}
