use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use serde_json::json;

use lmpcast::eval::{
    emit_per_node_rmse_plot, emit_series_plot, export_attention, per_node_table, write_node_table, MetricReport,
};
use lmpcast::grid::load_case;
use lmpcast::market::{
    derive_seed, generate_dataset, read_dataset, write_dataset, GenConfig, MarketDataset, SourceLoads,
    SyntheticLoadConfig,
};
use lmpcast::model::{load_checkpoint, Checkpoint, Model, ModelKind, Prediction};
use lmpcast::train::{evaluate_positions, init_model, load_window, train, windows, LrSchedule, TrainConfig};

use crate::config::ConfigFile;
use crate::error::{invalid, CliError};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::Common;

const EVAL_CHUNK: usize = 64;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if !force && fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some()) {
        return Err(invalid(format!(
            "{} exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))
}

fn prepare_file(path: &Path, force: bool) -> Result<(), CliError> {
    if !force && path.exists() {
        return Err(invalid(format!("{} exists; pass --force to overwrite", path.display())));
    }
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| invalid(format!("{}: {e}", p.display())))
        }
        _ => Ok(()),
    }
}

fn parse_ids(list: &str) -> Result<Vec<i64>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| usage(format!("bad node id {s:?} in {list:?}"))))
        .collect()
}

fn node_indices(data: &MarketDataset, ids: &[i64]) -> Result<Vec<usize>, CliError> {
    ids.iter()
        .map(|&id| data.graph.index_of(id).ok_or_else(|| invalid(format!("node {id} is not in the dataset"))))
        .collect()
}

fn open_checkpoint(path: &Path, data: Option<&MarketDataset>) -> Result<Checkpoint, CliError> {
    let ckpt = load_checkpoint(path)?;
    if let Some(d) = data {
        if ckpt.node_ids != d.graph.node_ids {
            return Err(invalid(format!(
                "{} was trained on a different grid ({} nodes) than the dataset ({} nodes)",
                path.display(),
                ckpt.node_ids.len(),
                d.graph.node_ids.len()
            )));
        }
    }
    Ok(ckpt)
}

fn output_ids(model: &Model, node_ids: &[i64]) -> Vec<i64> {
    model.config.output_nodes().iter().map(|&i| node_ids[i]).collect()
}

fn seeds(seed: u64, labels: &[&str]) -> BTreeMap<String, u64> {
    let mut m: BTreeMap<String, u64> = labels.iter().map(|l| (l.to_string(), derive_seed(seed, l))).collect();
    m.insert("seed".into(), seed);
    m
}

/// CSV with a header row. A leading `hour` column, when present, labels
/// the rows.
struct LabeledCsv {
    columns: Vec<String>,
    hours: Option<Vec<usize>>,
    rows: Vec<Vec<f64>>,
}

fn read_labeled_csv(path: &Path) -> Result<LabeledCsv, CliError> {
    let at = |msg: String| invalid(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| at(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| at(e.to_string()))?.iter().map(str::to_string).collect();
    let has_hour = header.first().is_some_and(|h| h == "hour");
    let columns = header[usize::from(has_hour)..].to_vec();
    let mut hours = has_hour.then(Vec::new);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| at(e.to_string()))?;
        let mut fields = rec.iter();
        if let Some(h) = hours.as_mut() {
            let v = fields.next().unwrap_or_default();
            h.push(v.parse().map_err(|_| at(format!("row {}: bad hour {v:?}", i + 1)))?);
        }
        let row = fields
            .map(|f| f.trim().parse::<f64>().map_err(|_| at(format!("row {}: bad number {f:?}", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(LabeledCsv { columns, hours, rows })
}

#[derive(Args, Debug)]
pub struct GenData {
    /// Grid case directory (nodes.csv, edges.csv, generators.csv, meta.csv).
    #[arg(long)]
    case: PathBuf,
    /// `synthetic` or `csv:PATH` (hourly zonal loads).
    #[arg(long)]
    source: Option<String>,
    /// Span in years of 8760 hours.
    #[arg(long)]
    years: Option<f64>,
    /// Span in hours; overrides --years.
    #[arg(long)]
    hours: Option<usize>,
    /// Noise scale (MW) of the synthesized nodal loads.
    #[arg(long)]
    alpha: Option<f64>,
    /// Dirichlet concentration of the mixing weights.
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long)]
    source_zones: Option<usize>,
    #[arg(long)]
    congested_lines: Option<usize>,
    /// Line limit as a fraction of the unconstrained mean-plus-std flow.
    #[arg(long)]
    limit_fraction: Option<f64>,
    #[arg(long)]
    selection_hours: Option<usize>,
    /// Randomize bids hour by hour (`true`/`false`).
    #[arg(long)]
    bid_noise: Option<bool>,
    /// Share of hours, from the start, in the training split.
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn parse_source(s: &str) -> Result<SourceLoads, CliError> {
    match s.split_once(':') {
        None if s == "synthetic" => Ok(SourceLoads::Synthetic(SyntheticLoadConfig::default())),
        Some(("csv", path)) if !path.is_empty() => Ok(SourceLoads::Csv { path: path.into() }),
        _ => Err(usage(format!("--source {s:?}: expected `synthetic` or `csv:PATH`"))),
    }
}

impl GenData {
    fn config(&self) -> Result<GenConfig, CliError> {
        let file = ConfigFile::load(self.common.config.as_deref())?;
        let d = GenConfig::default();
        let years = file.pick(self.years, "years", 3.0)?;
        let hours = file.pick_opt(self.hours, "hours")?.unwrap_or_else(|| GenConfig::years(years));
        let source = parse_source(&file.pick(self.source.clone(), "source", "synthetic".to_string())?)?;
        let cfg = GenConfig {
            hours,
            seed: file.pick(self.seed, "seed", d.seed)?,
            alpha: file.pick(self.alpha, "alpha", d.alpha)?,
            concentration: file.pick(self.concentration, "concentration", d.concentration)?,
            source,
            source_zones: file.pick(self.source_zones, "source-zones", d.source_zones)?,
            source_nodes: None,
            congested_lines: file.pick(self.congested_lines, "congested-lines", d.congested_lines)?,
            limit_fraction: file.pick(self.limit_fraction, "limit-fraction", d.limit_fraction)?,
            selection_sample_hours: file.pick(self.selection_hours, "selection-hours", d.selection_sample_hours)?,
            bid_noise: file.pick(self.bid_noise, "bid-noise", d.bid_noise)?,
            train_fraction: file.pick(self.train_fraction, "train-fraction", d.train_fraction)?,
            max_failure_fraction: d.max_failure_fraction,
        };
        file.finish()?;
        if cfg.hours == 0 || !(years > 0.0) {
            return Err(invalid("the span must be at least one hour"));
        }
        if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
            return Err(invalid(format!("train fraction {} must lie in (0, 1)", cfg.train_fraction)));
        }
        if !(cfg.limit_fraction > 0.0) || !(cfg.alpha >= 0.0) || !(cfg.concentration > 0.0) || cfg.source_zones == 0 {
            return Err(invalid(
                "limit fraction and concentration must be positive, alpha nonnegative, source zones at least 1",
            ));
        }
        Ok(cfg)
    }

    pub fn run(self) -> Result<(), CliError> {
        let cfg = self.config()?;
        let graph = load_case(&self.case)?;
        prepare_dir(&self.out, self.common.force)?;
        let gen = generate_dataset(&graph, &cfg)?;
        write_dataset(&gen, &self.out)?;
        let data = &gen.data;
        let congested = data.s.iter().filter(|&&s| s == 1).count();
        println!(
            "{} of {} hours solved ({} failed), {:.1}% congested, {} monitored lines -> {}",
            data.len(),
            cfg.hours,
            gen.failures.len(),
            100.0 * congested as f64 / data.len().max(1) as f64,
            data.monitored.len(),
            self.out.display()
        );
        let mut inputs: Vec<&Path> = vec![&self.case];
        if let SourceLoads::Csv { path } = &cfg.source {
            inputs.push(path);
        }
        let manifest = RunManifest::new(
            "gen-data",
            json!(cfg),
            seeds(cfg.seed, &["source", "weights", "load-noise", "bids"]),
            &inputs,
        )?;
        manifest.write(&self.out.join(MANIFEST_FILE), &[&self.out])
    }
}

#[derive(Args, Debug)]
pub struct Train {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// astgcn, gcn or mlp.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// constant or cosine.
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Chebyshev order.
    #[arg(long)]
    k: Option<usize>,
    /// Input window in hours (GCN always uses 1).
    #[arg(long)]
    t_hist: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    mlp_layers: Option<usize>,
    #[arg(long)]
    mlp_width: Option<usize>,
    /// Comma-separated node ids; required by mlp, which trains one model per node.
    #[arg(long, alias = "node")]
    nodes: Option<String>,
    /// Evaluate on the test split every this many epochs.
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

impl Train {
    fn config(&self) -> Result<(ModelKind, TrainConfig, Vec<i64>), CliError> {
        let file = ConfigFile::load(self.common.config.as_deref())?;
        let d = TrainConfig::default();
        let kind: String = file
            .pick_opt(self.model.clone(), "model")?
            .ok_or_else(|| usage("--model is required (astgcn, gcn or mlp)"))?;
        let kind: ModelKind = kind.parse().map_err(|e| usage(format!("--model: {e}")))?;
        let schedule: String = file.pick(self.lr_schedule.clone(), "lr-schedule", "constant".into())?;
        let tc = TrainConfig {
            learning_rate: file.pick(self.lr, "lr", d.learning_rate)?,
            lr_schedule: schedule.parse::<LrSchedule>().map_err(|e| usage(format!("--lr-schedule: {e}")))?,
            epochs: file.pick(self.epochs, "epochs", d.epochs)?,
            batch_size: file.pick(self.batch_size, "batch-size", d.batch_size)?,
            k: file.pick(self.k, "k", d.k)?,
            t_hist: file.pick(self.t_hist, "t-hist", d.t_hist)?,
            channels: file.pick(self.channels, "channels", d.channels)?,
            mlp_hidden_layers: file.pick(self.mlp_layers, "mlp-layers", d.mlp_hidden_layers)?,
            mlp_width: file.pick(self.mlp_width, "mlp-width", d.mlp_width)?,
            seed: file.pick(self.seed, "seed", d.seed)?,
            weights: d.weights,
            eval_every: file.pick(self.eval_every, "eval-every", d.eval_every)?,
            eval_batch: d.eval_batch,
        };
        let nodes: Option<String> = file.pick_opt(self.nodes.clone(), "nodes")?;
        file.finish()?;
        tc.validate()?;
        let ids = match (kind, nodes) {
            (ModelKind::Mlp, Some(list)) => parse_ids(&list)?,
            (ModelKind::Mlp, None) => return Err(usage("--model mlp trains one model per node and requires --nodes")),
            (_, Some(_)) => return Err(usage("--nodes applies only to --model mlp")),
            (_, None) => Vec::new(),
        };
        if kind == ModelKind::Mlp && ids.is_empty() {
            return Err(usage("--nodes lists no node ids"));
        }
        Ok((kind, tc, ids))
    }

    pub fn run(self) -> Result<(), CliError> {
        let (kind, tc, ids) = self.config()?;
        let data = read_dataset(&self.data)?;
        let nodes = node_indices(&data, &ids)?;
        prepare_dir(&self.out, self.common.force)?;
        let model = init_model(kind, &data, &tc, &nodes)?;
        info!("{kind}: {} parameters", model.parameter_count());
        let outcome = train(model, &data, &tc, Some(&self.out))?;
        if let Some(last) = outcome.history.last() {
            let test = last
                .test
                .as_ref()
                .map(|m| format!(", test MAE {:.4} RMSE {:.4} MAPE {:.3}%", m.mae, m.rmse, m.mape))
                .unwrap_or_default();
            println!("epoch {}: loss {:.4}{test}", last.epoch, last.loss.total);
        }
        println!("best epoch {} -> {}", outcome.best_epoch, self.out.display());
        let manifest = RunManifest::new(
            "train",
            json!({ "model": kind, "nodes": ids, "train": tc }),
            seeds(tc.seed, &["init", "shuffle"]),
            &[&self.data],
        )?;
        manifest.write(&self.out.join(MANIFEST_FILE), &[&self.out])
    }
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Baseline checkpoint for per-node comparison tables and plots.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Node ids for the comparison table; defaults to the nodes both models forecast.
    #[arg(long)]
    nodes: Option<String>,
    /// test or train.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

struct Scored {
    label: &'static str,
    kind: ModelKind,
    ids: Vec<i64>,
    preds: Vec<Prediction>,
    report: MetricReport,
}

/// `report` restricted to the nodes in `keep`, in that order.
fn restrict(s: &Scored, keep: &[i64]) -> MetricReport {
    let at: HashMap<i64, usize> = s.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    MetricReport {
        per_node: keep.iter().map(|id| s.report.per_node[at[id]]).collect(),
        ..s.report.clone()
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

impl Eval {
    pub fn run(self) -> Result<(), CliError> {
        ConfigFile::load(self.common.config.as_deref())?.finish()?;
        let data = read_dataset(&self.data)?;
        let range = match self.split.as_str() {
            "test" => data.split.test,
            "train" => data.split.train,
            other => return Err(usage(format!("--split {other:?}: expected test or train"))),
        };
        let primary = open_checkpoint(&self.ckpt, Some(&data))?;
        let baseline = self.compare.as_deref().map(|p| open_checkpoint(p, Some(&data))).transpose()?;
        let t = baseline
            .iter()
            .map(|b| b.model.config.t_hist)
            .fold(primary.model.config.t_hist, usize::max);
        let positions = windows(&data, t, range.start, range.end);
        if positions.is_empty() {
            return Err(invalid(format!("no {} hours with {t} hours of history", self.split)));
        }
        prepare_dir(&self.out, self.common.force)?;

        let score = |label, ckpt: &Checkpoint| -> Result<Scored, CliError> {
            let (preds, report) = evaluate_positions(&ckpt.model, &data, &positions, EVAL_CHUNK)?;
            Ok(Scored {
                label,
                kind: ckpt.model.kind(),
                ids: output_ids(&ckpt.model, &data.graph.node_ids),
                preds,
                report,
            })
        };
        let mut scored = vec![score("model", &primary)?];
        if let Some(b) = &baseline {
            scored.push(score("baseline", b)?);
        }
        let hours: Vec<usize> = positions.iter().map(|&p| data.hours[p]).collect();

        let mut metrics = String::from("model,kind,mae,rmse,mape,s_accuracy,node_hours,mape_excluded\n");
        let mut table = format!(
            "{:<9} {:<7} {:>10} {:>10} {:>9} {:>9} {:>10}\n",
            "model", "kind", "MAE", "RMSE", "MAPE(%)", "s-acc(%)", "node-hours"
        );
        for s in &scored {
            let r = &s.report;
            writeln!(
                metrics,
                "{},{},{},{},{},{},{},{}",
                s.label, s.kind, r.mae, r.rmse, r.mape, r.s_accuracy, r.node_hours, r.mape_excluded
            )
            .unwrap();
            writeln!(
                table,
                "{:<9} {:<7} {:>10.4} {:>10.4} {:>9.3} {:>9.2} {:>10}",
                s.label, s.kind, r.mae, r.rmse, r.mape, r.s_accuracy, r.node_hours
            )
            .unwrap();
        }
        write_text(&self.out.join("metrics.csv"), &metrics)?;

        let main = &scored[0];
        let mut per_node = String::from("node,mae,rmse\n");
        for (id, m) in main.ids.iter().zip(&main.report.per_node) {
            writeln!(per_node, "{id},{},{}", m.mae, m.rmse).unwrap();
        }
        write_text(&self.out.join("per_node.csv"), &per_node)?;

        let mut preds = String::from("hour");
        let mut status = String::from("hour,s_pred,s_prob,s_true\n");
        for id in &main.ids {
            write!(preds, ",{id}").unwrap();
        }
        preds.push('\n');
        for ((h, p), &pos) in hours.iter().zip(&main.preds).zip(&positions) {
            write!(preds, "{h}").unwrap();
            for v in &p.lmp {
                write!(preds, ",{v}").unwrap();
            }
            preds.push('\n');
            writeln!(status, "{h},{},{},{}", p.s, p.s_prob, data.s[pos]).unwrap();
        }
        write_text(&self.out.join("predictions.csv"), &preds)?;
        write_text(&self.out.join("status.csv"), &status)?;

        if let [a, b] = &scored[..] {
            let common: Vec<i64> = a.ids.iter().copied().filter(|id| b.ids.contains(id)).collect();
            let requested = match &self.nodes {
                Some(list) => parse_ids(list)?,
                None => common.clone(),
            };
            if let Some(id) = requested.iter().find(|id| !common.contains(id)) {
                return Err(invalid(format!("node {id} is not forecast by both checkpoints")));
            }
            let (ra, rb) = (restrict(a, &common), restrict(b, &common));
            let rows = per_node_table(&ra.per_node, &rb.per_node, &common, &requested)?;
            write_node_table(&self.out.join("comparison.csv"), &rows)?;
            emit_per_node_rmse_plot((a.kind.name(), &ra), (b.kind.name(), &rb), &common, &self.out)?;
            writeln!(
                table,
                "\n{:>6} {:>10} {:>10} {:>9} {:>10} {:>10} {:>9}",
                "node", "MAE", "MAE base", "impr(%)", "RMSE", "RMSE base", "impr(%)"
            )
            .unwrap();
            for r in &rows {
                writeln!(
                    table,
                    "{:>6} {:>10.4} {:>10.4} {:>9.2} {:>10.4} {:>10.4} {:>9.2}",
                    r.node, r.mae_new, r.mae_baseline, r.mae_improvement, r.rmse_new, r.rmse_baseline, r.rmse_improvement
                )
                .unwrap();
            }
        }
        print!("{table}");

        let mut inputs: Vec<&Path> = vec![&self.data, &self.ckpt];
        if let Some(c) = &self.compare {
            inputs.push(c);
        }
        let manifest = RunManifest::new(
            "eval",
            json!({ "split": self.split, "nodes": self.nodes, "positions": positions.len() }),
            BTreeMap::new(),
            &inputs,
        )?;
        manifest.write(&self.out.join(MANIFEST_FILE), &[&self.out])
    }
}

#[derive(Args, Debug)]
pub struct Predict {
    #[arg(long)]
    ckpt: PathBuf,
    /// Loads with one column per node id (optionally led by `hour`); at
    /// least the model's input window of rows.
    #[arg(long)]
    loads: PathBuf,
    /// Output CSV: one LMP row per complete input window.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

impl Predict {
    pub fn run(self) -> Result<(), CliError> {
        ConfigFile::load(self.common.config.as_deref())?.finish()?;
        let ckpt = open_checkpoint(&self.ckpt, None)?;
        let model = &ckpt.model;
        let csv = read_labeled_csv(&self.loads)?;
        let by_name: HashMap<&str, usize> = csv.columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let order: Vec<usize> = ckpt
            .node_ids
            .iter()
            .map(|id| {
                by_name
                    .get(id.to_string().as_str())
                    .copied()
                    .ok_or_else(|| invalid(format!("{}: no column for node {id}", self.loads.display())))
            })
            .collect::<Result<_, _>>()?;
        if csv.columns.len() != order.len() {
            return Err(invalid(format!(
                "{}: {} load columns, the checkpoint has {} nodes",
                self.loads.display(),
                csv.columns.len(),
                order.len()
            )));
        }
        let t = model.config.t_hist;
        if csv.rows.len() < t {
            return Err(invalid(format!(
                "{}: {} rows, the model needs a {t}-hour window",
                self.loads.display(),
                csv.rows.len()
            )));
        }
        if let Some(bad) = csv.rows.iter().flatten().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("{}: load {bad} is not a nonnegative number", self.loads.display())));
        }
        let reordered: Vec<Vec<f64>> = csv.rows.iter().map(|r| order.iter().map(|&c| r[c]).collect()).collect();
        let ends: Vec<usize> = (t - 1..reordered.len()).collect();
        let flat: Vec<Vec<f64>> = ends.iter().map(|&e| reordered[e + 1 - t..=e].concat()).collect();
        let mut preds = Vec::with_capacity(ends.len());
        for part in flat.chunks(EVAL_CHUNK) {
            let windows: Vec<&[f64]> = part.iter().map(Vec::as_slice).collect();
            preds.extend(model.predict(model.input_tensor(&windows)?)?);
        }

        prepare_file(&self.out, self.common.force)?;
        let mut text = String::from("hour");
        for id in output_ids(model, &ckpt.node_ids) {
            write!(text, ",{id}").unwrap();
        }
        text.push('\n');
        for (&e, p) in ends.iter().zip(&preds) {
            let label = csv.hours.as_ref().map_or(e, |h| h[e]);
            write!(text, "{label}").unwrap();
            for v in &p.lmp {
                write!(text, ",{v}").unwrap();
            }
            text.push('\n');
        }
        write_text(&self.out, &text)?;
        println!("{} forecast rows -> {}", preds.len(), self.out.display());
        let manifest = RunManifest::new(
            "predict",
            json!({ "model": model.kind(), "t_hist": t }),
            BTreeMap::new(),
            &[&self.ckpt, &self.loads],
        )?;
        manifest.write(&sibling_manifest(&self.out), &[&self.out])
    }
}

#[derive(Args, Debug)]
pub struct ExportAttention {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset providing the sample's load window.
    #[arg(long)]
    data: PathBuf,
    /// Hour whose input window is attended over.
    #[arg(long)]
    sample: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

impl ExportAttention {
    pub fn run(self) -> Result<(), CliError> {
        ConfigFile::load(self.common.config.as_deref())?.finish()?;
        let data = read_dataset(&self.data)?;
        let ckpt = open_checkpoint(&self.ckpt, Some(&data))?;
        let model = &ckpt.model;
        if !model.kind().has_attention() {
            return Err(invalid(format!("no attention parameters: {} has no attention layer", model.kind())));
        }
        let t = model.config.t_hist;
        if self.sample >= data.loads.hours() || self.sample + 1 < t {
            return Err(invalid(format!(
                "sample hour {} needs {t} hours of loads within 0..{}",
                self.sample,
                data.loads.hours()
            )));
        }
        let window = load_window(&data, self.sample, t);
        let masks = model.attention_masks(model.input_tensor(&[window])?)?;
        prepare_dir(&self.out, self.common.force)?;
        let written = export_attention(&masks, &self.out)?;
        println!("{} files -> {}", written.len(), self.out.display());
        let manifest = RunManifest::new(
            "export-attention",
            json!({ "sample": self.sample, "t_hist": t }),
            BTreeMap::new(),
            &[&self.ckpt, &self.data],
        )?;
        manifest.write(&self.out.join(MANIFEST_FILE), &[&self.out])
    }
}

#[derive(Args, Debug)]
pub struct Plot {
    /// Predictions CSV (`hour` then one column per node id), e.g. from eval.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth in the same layout, e.g. a dataset's lmp.csv.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    node: i64,
    /// First hour to plot (inclusive).
    #[arg(long)]
    from: Option<usize>,
    /// Last hour to plot (exclusive).
    #[arg(long)]
    to: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn node_series(csv: &LabeledCsv, node: i64, path: &Path) -> Result<BTreeMap<usize, f64>, CliError> {
    let col = csv
        .columns
        .iter()
        .position(|c| c == &node.to_string())
        .ok_or_else(|| invalid(format!("{}: no column for node {node}", path.display())))?;
    let hours = csv
        .hours
        .as_ref()
        .ok_or_else(|| invalid(format!("{}: first column must be `hour`", path.display())))?;
    Ok(hours.iter().zip(&csv.rows).map(|(&h, r)| (h, r[col])).collect())
}

impl Plot {
    pub fn run(self) -> Result<(), CliError> {
        ConfigFile::load(self.common.config.as_deref())?.finish()?;
        let pred = node_series(&read_labeled_csv(&self.pred)?, self.node, &self.pred)?;
        let gt = node_series(&read_labeled_csv(&self.gt)?, self.node, &self.gt)?;
        let (lo, hi) = (self.from.unwrap_or(0), self.to.unwrap_or(usize::MAX));
        let hours: Vec<usize> = pred
            .keys()
            .copied()
            .filter(|h| (lo..hi).contains(h) && gt.contains_key(h))
            .collect();
        if hours.is_empty() {
            return Err(invalid("no hours in range are present in both files"));
        }
        let p: Vec<f64> = hours.iter().map(|h| pred[h]).collect();
        let g: Vec<f64> = hours.iter().map(|h| gt[h]).collect();
        prepare_dir(&self.out, self.common.force)?;
        let (csv, svg) = emit_series_plot(&p, &g, &hours, self.node, &self.out)?;
        println!("{} hours -> {}, {}", hours.len(), csv.display(), svg.display());
        let manifest = RunManifest::new(
            "plot",
            json!({ "node": self.node, "from": self.from, "to": self.to }),
            BTreeMap::new(),
            &[&self.pred, &self.gt],
        )?;
        manifest.write(&self.out.join(MANIFEST_FILE), &[&self.out])
    }
}
