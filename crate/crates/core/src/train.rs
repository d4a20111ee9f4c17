//! Losses, initialization, Adam and the epoch loop.
//!
//! The total objective is `energy + 10 congest + 100 status` where, per
//! sample and over nodes, `energy = |d|_1 + |d|_2` on the energy price,
//! `congest = |d|_1 + 2 |d|_2` on the nodal congestion price and `status`
//! is the cross-entropy of the congestion logits. Per-sample norms are
//! averaged over the batch.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{compute_metrics, EvalError, MetricReport};
use crate::grid::{LaplacianWeighting, SpectralBasis};
use crate::market::{derive_seed, MarketDataset};
use crate::model::{save_checkpoint, CheckpointError, Model, ModelConfig, ModelError, ModelKind, Normalization, Prediction};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no usable {0} windows (need at least t_hist hours of history)")]
    NoWindows(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (hours {first_hour}..={last_hour}): {losses:?}; largest parameter norms: {param_norms:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        first_hour: usize,
        last_hour: usize,
        losses: [f64; 3],
        param_norms: Vec<(String, f64)>,
    },
}

/// `sqrt(6) / sqrt(fan_in + fan_out)`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    6f64.sqrt() / ((fan_in + fan_out) as f64).sqrt()
}

/// `count` uniform draws in `[-b, b]` with `b` the Xavier bound.
pub fn xavier_init(fan_in: usize, fan_out: usize, count: usize, seed: u64) -> Vec<f64> {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be positive");
    let b = xavier_bound(fan_in, fan_out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random_range(-b..=b)).collect()
}

fn residual_norms(tape: &mut Tape, pred: Var, gt: Var) -> Result<(Var, Var), TensorError> {
    let d = tape.sub(pred, gt)?;
    let l1 = tape.l1_norm(d)?;
    let l2 = tape.l2_norm(d)?;
    let l1 = tape.mean(l1);
    let l2 = tape.mean(l2);
    Ok((l1, l2))
}

/// `|d|_1 + |d|_2` per row of `[B, N]` residuals, averaged over rows.
pub fn loss_energy(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var, TensorError> {
    let (l1, l2) = residual_norms(tape, pred, gt)?;
    tape.add(l1, l2)
}

/// `|d|_1 + 2 |d|_2` per row, averaged over rows.
pub fn loss_congest(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var, TensorError> {
    let (l1, l2) = residual_norms(tape, pred, gt)?;
    let l2 = tape.scale(l2, 2.0);
    tape.add(l1, l2)
}

/// Mean cross-entropy of `[R, 2]` logits against 0/1 labels.
pub fn loss_status(tape: &mut Tape, logits: Var, gt: &[usize]) -> Result<Var, TensorError> {
    tape.cross_entropy(logits, gt)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub energy: f64,
    pub congest: f64,
    pub status: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            energy: 1.0,
            congest: 10.0,
            status: 100.0,
        }
    }
}

pub fn loss_total(tape: &mut Tape, e: Var, c: Var, s: Var, w: LossWeights) -> Result<Var, TensorError> {
    let c = tape.scale(c, w.congest);
    let s = tape.scale(s, w.status);
    let e = tape.scale(e, w.energy);
    let ec = tape.add(e, c)?;
    tape.add(ec, s)
}

/// Bias-corrected Adam with one moment pair per named parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update. Parameters without a gradient entry are left alone.
    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the initial rate towards zero over all steps.
    Cosine,
}

impl LrSchedule {
    /// Rate for step `step` (0-based) of `total`.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let progress = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(TrainError::Config(format!("unknown lr schedule {other:?} (constant, cosine)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub k: usize,
    pub t_hist: usize,
    pub channels: usize,
    pub mlp_hidden_layers: usize,
    pub mlp_width: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Evaluate on the test split every this many epochs (and always on the
    /// last one).
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            epochs: 100,
            batch_size: 32,
            k: 3,
            t_hist: 24,
            channels: 128,
            mlp_hidden_layers: 10,
            mlp_width: 128,
            seed: 0,
            weights: LossWeights::default(),
            eval_every: 1,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let w = &self.weights;
        if !(self.learning_rate > 0.0)
            || self.batch_size == 0
            || self.k == 0
            || self.t_hist == 0
            || self.channels == 0
            || self.eval_every == 0
            || self.eval_batch == 0
            || !(w.energy > 0.0 && w.congest > 0.0 && w.status > 0.0)
        {
            return Err(TrainError::Config(format!("all settings must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Model configuration for `kind`; GCN always uses a one-hour window.
    pub fn model_config(&self, kind: ModelKind, nodes: usize, mlp_nodes: &[usize]) -> ModelConfig {
        let mut c = ModelConfig::new(kind, nodes);
        c.t_hist = if kind == ModelKind::Gcn { 1 } else { self.t_hist };
        c.k = self.k;
        c.channels = self.channels;
        c.mlp_hidden_layers = self.mlp_hidden_layers;
        c.mlp_width = self.mlp_width;
        c.mlp_nodes = mlp_nodes.to_vec();
        c.seed = derive_seed(self.seed, "init");
        c
    }
}

/// Positions (into `data.hours`) whose target hour lies in `[start, end)`
/// and has `t_hist - 1` hours of history before it.
pub fn windows(data: &MarketDataset, t_hist: usize, start: usize, end: usize) -> Vec<usize> {
    data.hours
        .iter()
        .enumerate()
        .filter(|(_, &h)| h >= start && h < end && h + 1 >= t_hist && h < data.loads.hours())
        .map(|(p, _)| p)
        .collect()
}

/// Loads for hours `hour - t_hist + 1 ..= hour`, hour-major.
pub fn load_window(data: &MarketDataset, hour: usize, t_hist: usize) -> &[f64] {
    let n = data.loads.columns();
    &data.loads.values()[(hour + 1 - t_hist) * n..(hour + 1) * n]
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Normalization constants from the training positions.
pub fn fit_normalization(data: &MarketDataset, train: &[usize]) -> Normalization {
    let loads = train.iter().flat_map(|&p| data.loads.row(data.hours[p]).iter().copied());
    let (load_mean, load_std) = mean_std(loads);
    let (lambda_mean, lambda_std) = mean_std(train.iter().map(|&p| data.lambda[p]));
    let mu = train.iter().flat_map(|&p| data.nodal_mu(p));
    let (_, mu_std) = mean_std(mu);
    let positive = |v: f64| if v > 1e-9 { v } else { 1.0 };
    Normalization {
        load_mean,
        load_std: positive(load_std),
        lambda_mean,
        lambda_std: positive(lambda_std),
        mu_std: positive(mu_std),
    }
}

/// Inputs and targets for a set of positions.
pub struct Batch {
    pub input: Tensor,
    /// `[B, N_out]`
    pub lambda: Tensor,
    /// `[B, N_out]`
    pub mu: Tensor,
    /// `B * N_out`, sample-major.
    pub s: Vec<usize>,
}

pub fn make_batch(model: &Model, data: &MarketDataset, positions: &[usize]) -> Result<Batch, ModelError> {
    let t = model.config.t_hist;
    let nodes = model.config.output_nodes();
    let windows: Vec<&[f64]> = positions.iter().map(|&p| load_window(data, data.hours[p], t)).collect();
    let input = model.input_tensor(&windows)?;
    let b = positions.len();
    let mut lambda = Vec::with_capacity(b * nodes.len());
    let mut mu = Vec::with_capacity(b * nodes.len());
    let mut s = Vec::with_capacity(b * nodes.len());
    for &p in positions {
        let nodal = data.nodal_mu(p);
        for &i in &nodes {
            lambda.push(data.lambda[p]);
            mu.push(nodal[i]);
            s.push(data.s[p] as usize);
        }
    }
    Ok(Batch {
        input,
        lambda: Tensor::new(vec![b, nodes.len()], lambda)?,
        mu: Tensor::new(vec![b, nodes.len()], mu)?,
        s,
    })
}

/// Loss values of one batch: energy, congest, status, total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub energy: f64,
    pub congest: f64,
    pub status: f64,
    pub total: f64,
}

/// Builds the full objective on `tape`; returns the total and its parts.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &crate::model::Bound,
    batch: &Batch,
    weights: LossWeights,
) -> Result<(Var, [Var; 3]), TrainError> {
    let x = tape.leaf(batch.input.clone());
    let out = model.forward(tape, bound, x)?;
    let gl = tape.leaf(batch.lambda.clone());
    let gm = tape.leaf(batch.mu.clone());
    let e = loss_energy(tape, out.lambda, gl)?;
    let c = loss_congest(tape, out.mu, gm)?;
    let s = loss_status(tape, out.status_logits, &batch.s)?;
    let total = loss_total(tape, e, c, s, weights)?;
    Ok((total, [e, c, s]))
}

/// Forecasts for `positions`, in chunks of `chunk`.
pub fn predict_positions(
    model: &Model,
    data: &MarketDataset,
    positions: &[usize],
    chunk: usize,
) -> Result<Vec<Prediction>, ModelError> {
    let t = model.config.t_hist;
    let mut out = Vec::with_capacity(positions.len());
    for part in positions.chunks(chunk.max(1)) {
        let windows: Vec<&[f64]> = part.iter().map(|&p| load_window(data, data.hours[p], t)).collect();
        out.extend(model.predict(model.input_tensor(&windows)?)?);
    }
    Ok(out)
}

/// Metrics of `model` on `positions` over its output nodes.
pub fn evaluate_positions(
    model: &Model,
    data: &MarketDataset,
    positions: &[usize],
    chunk: usize,
) -> Result<(Vec<Prediction>, MetricReport), TrainError> {
    let preds = predict_positions(model, data, positions, chunk)?;
    let nodes = model.config.output_nodes();
    let pred: Vec<Vec<f64>> = preds.iter().map(|p| p.lmp.clone()).collect();
    let gt: Vec<Vec<f64>> = positions
        .iter()
        .map(|&p| nodes.iter().map(|&i| data.lmp[p][i]).collect())
        .collect();
    let s_pred: Vec<u8> = preds.iter().map(|p| p.s).collect();
    let s_gt: Vec<u8> = positions.iter().map(|&p| data.s[p]).collect();
    let report = compute_metrics(&pred, &gt, &s_pred, &s_gt)?;
    Ok((preds, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossParts,
    /// Test metrics when evaluated this epoch.
    pub test: Option<MetricReport>,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters with the lowest test RMSE seen (the initial model when
    /// no evaluation ran).
    pub best: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: [&str; 9] = [
    "epoch",
    "loss_energy",
    "loss_congest",
    "loss_status",
    "loss_total",
    "test_mae",
    "test_rmse",
    "test_mape",
    "test_s_accuracy",
];

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    let io_err = |e: csv::Error| TrainError::Io {
        path: path.display().to_string(),
        source: io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(HISTORY_HEADER).map_err(io_err)?;
    for r in history {
        let test = |f: fn(&MetricReport) -> f64| r.test.as_ref().map(|m| f(m).to_string()).unwrap_or_default();
        w.write_record([
            r.epoch.to_string(),
            r.loss.energy.to_string(),
            r.loss.congest.to_string(),
            r.loss.status.to_string(),
            r.loss.total.to_string(),
            test(|m| m.mae),
            test(|m| m.rmse),
            test(|m| m.mape),
            test(|m| m.s_accuracy),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn clone_model(m: &Model) -> Result<Model, ModelError> {
    Model::from_parts(m.config.clone(), m.params.clone(), m.basis.clone())
}

/// Builds the model for `kind` with normalization fitted on the training
/// split.
pub fn init_model(
    kind: ModelKind,
    data: &MarketDataset,
    cfg: &TrainConfig,
    mlp_nodes: &[usize],
) -> Result<Model, TrainError> {
    cfg.validate()?;
    let n = data.graph.node_count();
    let mut mc = cfg.model_config(kind, n, mlp_nodes);
    let train = windows(data, mc.t_hist, data.split.train.start, data.split.train.end);
    if train.is_empty() {
        return Err(TrainError::NoWindows("training"));
    }
    mc.norm = fit_normalization(data, &train);
    let basis = if kind == ModelKind::Mlp {
        None
    } else {
        Some(SpectralBasis::for_graph(&data.graph, LaplacianWeighting::Binary, cfg.k).map_err(ModelError::from)?)
    };
    Ok(Model::new(mc, basis)?)
}

/// Trains `model` on the dataset's training split. When `out_dir` is given,
/// writes `history.csv`, `best.ckpt` and `final.ckpt` there.
pub fn train(
    mut model: Model,
    data: &MarketDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let t = model.config.t_hist;
    let mut train_pos = windows(data, t, data.split.train.start, data.split.train.end);
    let test_pos = windows(data, t, data.split.test.start, data.split.test.end);
    if train_pos.is_empty() {
        return Err(TrainError::NoWindows("training"));
    }
    let mut adam = Adam::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = clone_model(&model)?;
    let mut best_epoch = 0;
    let mut best_rmse = f64::INFINITY;
    let shuffle_seed = derive_seed(cfg.seed, "shuffle");
    let steps_per_epoch = train_pos.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rng.set_stream(epoch as u64);
        train_pos.sort_unstable();
        train_pos.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut batches = 0usize;
        for (bi, chunk) in train_pos.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(&model, data, chunk)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let (total, parts) = batch_loss(&model, &mut tape, &bound, &batch, cfg.weights)?;
            let vals = parts.map(|v| tape.value(v).item());
            let total_v = tape.value(total).item();
            if !total_v.is_finite() {
                let mut norms: Vec<(String, f64)> = model.params.iter().map(|(k, v)| (k.clone(), v.norm())).collect();
                norms.sort_by(|a, b| b.1.total_cmp(&a.1));
                norms.truncate(5);
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    first_hour: data.hours[*chunk.iter().min().expect("non-empty")],
                    last_hour: data.hours[*chunk.iter().max().expect("non-empty")],
                    losses: vals,
                    param_norms: norms,
                });
            }
            let grads = tape.backward(total)?;
            let named: BTreeMap<String, Tensor> = bound.iter().map(|(k, v)| (k.clone(), grads.wrt(*v))).collect();
            let lr = cfg.lr_schedule.rate(cfg.learning_rate, step, total_steps);
            adam.update(&mut model.params, &named, lr);
            step += 1;
            sums.energy += vals[0];
            sums.congest += vals[1];
            sums.status += vals[2];
            sums.total += total_v;
            batches += 1;
        }
        let k = batches as f64;
        let loss = LossParts {
            energy: sums.energy / k,
            congest: sums.congest / k,
            status: sums.status / k,
            total: sums.total / k,
        };
        let evaluate = !test_pos.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let test = if evaluate {
            let (_, report) = evaluate_positions(&model, data, &test_pos, cfg.eval_batch)?;
            if report.rmse < best_rmse {
                best_rmse = report.rmse;
                best = clone_model(&model)?;
                best_epoch = epoch;
            }
            Some(report)
        } else {
            None
        };
        info!(
            "epoch {epoch}: loss {:.4} (e {:.4}, c {:.4}, s {:.4}){}",
            loss.total,
            loss.energy,
            loss.congest,
            loss.status,
            test.as_ref()
                .map(|m| format!(", test rmse {:.4} mape {:.3}% s-acc {:.2}%", m.rmse, m.mape, m.s_accuracy))
                .unwrap_or_default()
        );
        history.push(EpochRecord { epoch, loss, test });
    }

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        write_history(&dir.join("history.csv"), &history)?;
        let meta = |epoch: usize| {
            serde_json::json!({
                "epoch": epoch,
                "train": cfg,
            })
        };
        save_checkpoint(&dir.join("best.ckpt"), &best, &data.graph.node_ids, &meta(best_epoch))?;
        save_checkpoint(&dir.join("final.ckpt"), &model, &data.graph.node_ids, &meta(cfg.epochs))?;
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        history,
    })
}
