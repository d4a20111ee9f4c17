//! Three-branch forecasters: the attention-based ASTGCN, the attention-free
//! GCN and the per-node MLP baseline.
//!
//! Every variant has a `lambda` branch (system energy price, `q = 1`), a
//! `status` branch (congestion logits, `q = 2`) and a `mu` branch (nodal
//! congestion price as a sum over `q = 16` latent outputs). Predictions are
//! composed as `lmp_i = lambda + s * mu_i`.
//!
//! Graph variants work on activations laid out `[N, B, T, C]` so the graph
//! convolution can treat `B * T * C` as one dense block per node and the
//! temporal convolution can treat `N * B` as independent sequences.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::grid::{chebyshev_basis, GridError, SpectralBasis};
use crate::market::derive_seed;
use crate::tensor::{ChebOperators, Tape, Tensor, TensorError, Var};
use crate::train::xavier_init;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("no attention parameters: {0} has no attention layer")]
    NoAttention(ModelKind),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("input shape {got:?}, expected {expected:?}")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Astgcn,
    Gcn,
    Mlp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Astgcn => "astgcn",
            ModelKind::Gcn => "gcn",
            ModelKind::Mlp => "mlp",
        }
    }

    pub fn has_attention(self) -> bool {
        self == ModelKind::Astgcn
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s.to_ascii_lowercase().as_str() {
            "astgcn" => Ok(ModelKind::Astgcn),
            "gcn" => Ok(ModelKind::Gcn),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(ModelError::Config(format!("unknown model kind {other:?} (astgcn, gcn, mlp)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Branch {
    Lambda,
    Status,
    Mu,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Lambda, Branch::Status, Branch::Mu];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Lambda => "lambda",
            Branch::Status => "status",
            Branch::Mu => "mu",
        }
    }
}

/// Fixed affine maps between physical units and the network's scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub load_mean: f64,
    pub load_std: f64,
    pub lambda_mean: f64,
    pub lambda_std: f64,
    pub mu_std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            load_mean: 0.0,
            load_std: 1.0,
            lambda_mean: 0.0,
            lambda_std: 1.0,
            mu_std: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub nodes: usize,
    /// Input window in hours; forced to 1 for GCN.
    pub t_hist: usize,
    /// Chebyshev order.
    pub k: usize,
    pub channels: usize,
    pub temporal_kernel: usize,
    pub q_lambda: usize,
    pub q_status: usize,
    pub q_mu: usize,
    pub mlp_hidden_layers: usize,
    pub mlp_width: usize,
    /// Node indices modeled by the MLP; empty for graph variants.
    pub mlp_nodes: Vec<usize>,
    pub norm: Normalization,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, nodes: usize) -> Self {
        ModelConfig {
            kind,
            nodes,
            t_hist: if kind == ModelKind::Gcn { 1 } else { 24 },
            k: 3,
            channels: 128,
            temporal_kernel: 3,
            q_lambda: 1,
            q_status: 2,
            q_mu: 16,
            mlp_hidden_layers: 10,
            mlp_width: 128,
            mlp_nodes: Vec::new(),
            norm: Normalization::default(),
            seed: 0,
        }
    }

    pub fn q(&self, branch: Branch) -> usize {
        match branch {
            Branch::Lambda => self.q_lambda,
            Branch::Status => self.q_status,
            Branch::Mu => self.q_mu,
        }
    }

    /// Nodes covered by the outputs.
    pub fn output_nodes(&self) -> Vec<usize> {
        match self.kind {
            ModelKind::Mlp => self.mlp_nodes.clone(),
            _ => (0..self.nodes).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.nodes == 0 || self.t_hist == 0 {
            return bad("nodes and t_hist must be positive");
        }
        if self.kind == ModelKind::Gcn && self.t_hist != 1 {
            return bad("gcn takes only the latest loads (t_hist = 1)");
        }
        if self.q_status != 2 || self.q_lambda == 0 || self.q_mu == 0 {
            return bad("branch widths must be q_lambda >= 1, q_status = 2, q_mu >= 1");
        }
        match self.kind {
            ModelKind::Mlp => {
                if self.mlp_nodes.is_empty() {
                    return bad("mlp needs at least one node");
                }
                if let Some(n) = self.mlp_nodes.iter().find(|&&n| n >= self.nodes) {
                    return bad(&format!("mlp node index {n} outside 0..{}", self.nodes));
                }
                if self.mlp_width == 0 {
                    return bad("mlp_width must be positive");
                }
            }
            _ => {
                if self.k == 0 || self.channels == 0 {
                    return bad("k and channels must be positive");
                }
                if self.temporal_kernel.is_multiple_of(2) {
                    return bad("temporal_kernel must be odd");
                }
            }
        }
        if !(self.norm.load_std > 0.0 && self.norm.lambda_std > 0.0 && self.norm.mu_std > 0.0) {
            return bad("normalization scales must be positive");
        }
        Ok(())
    }
}

/// Named parameter arrays, ordered by name.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Parameters recorded on a tape for one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Binds caller-owned tape variables as parameters, e.g. to differentiate
/// with respect to perturbed copies.
impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Per-branch outputs of one forward pass, in physical units.
pub struct Outputs {
    /// `[B, N_out]` energy-price estimates per node.
    pub lambda: Var,
    /// `[B * N_out, 2]` congestion logits, rows ordered sample-major.
    pub status_logits: Var,
    /// `[B, N_out]` congestion price per node (sum over `q`).
    pub mu: Var,
}

/// Composed forecast for one hour.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub lambda: f64,
    pub s: u8,
    /// Mean probability of the congested class.
    pub s_prob: f64,
    pub mu: Vec<f64>,
    pub lmp: Vec<f64>,
}

/// `lmp_i = lambda + s * mu_i` with `lambda` the node mean of the energy
/// branch, `mu_i` the sum over `q` and `s` the thresholded mean congestion
/// probability.
pub fn compose_lmp(lambda_out: &[f64], s_logits: &[[f64; 2]], mu_out: &[Vec<f64>]) -> Prediction {
    let lambda = lambda_out.iter().sum::<f64>() / lambda_out.len().max(1) as f64;
    let s_prob = s_logits.iter().map(|l| class1_probability(*l)).sum::<f64>() / s_logits.len().max(1) as f64;
    let s = u8::from(s_prob > 0.5);
    let mu: Vec<f64> = mu_out.iter().map(|row| row.iter().sum()).collect();
    let lmp = mu
        .iter()
        .map(|m| if s == 1 { lambda + m } else { lambda })
        .collect();
    Prediction {
        lambda,
        s,
        s_prob,
        mu,
        lmp,
    }
}

fn class1_probability(logits: [f64; 2]) -> f64 {
    let d = logits[0] - logits[1];
    // 1 / (1 + e^(l0 - l1)) without overflow
    if d >= 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Spectral basis of the grid (graph variants only).
    pub basis: Option<SpectralBasis>,
    ops: Option<Arc<ChebOperators>>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("kind", &self.config.kind)
            .field("params", &self.params.len())
            .finish()
    }
}

fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let (n, t) = (cfg.nodes, cfg.t_hist);
    for branch in Branch::ALL {
        let b = branch.name();
        let q = cfg.q(branch);
        match cfg.kind {
            ModelKind::Mlp => {
                let m = cfg.mlp_nodes.len();
                let mut fan_in = t;
                for l in 0..=cfg.mlp_hidden_layers {
                    let fan_out = if l == cfg.mlp_hidden_layers { q } else { cfg.mlp_width };
                    out.push((format!("{b}.dense{l:02}.w"), vec![m, fan_in, fan_out], Init::Xavier(fan_in, fan_out)));
                    out.push((format!("{b}.dense{l:02}.b"), vec![m, 1, fan_out], Init::Zero));
                    fan_in = fan_out;
                }
            }
            kind => {
                if kind.has_attention() {
                    out.push((format!("{b}.att_s.w1"), vec![t, 1], Init::Xavier(t, 1)));
                    out.push((format!("{b}.att_s.w2"), vec![t, 1], Init::Xavier(t, 1)));
                    out.push((format!("{b}.att_s.b"), vec![n, n], Init::Zero));
                    out.push((format!("{b}.att_s.v"), vec![n, n], Init::Xavier(n, n)));
                    out.push((format!("{b}.att_t.w1"), vec![n, 1], Init::Xavier(n, 1)));
                    out.push((format!("{b}.att_t.w2"), vec![n, 1], Init::Xavier(n, 1)));
                    out.push((format!("{b}.att_t.b"), vec![t, t], Init::Zero));
                    out.push((format!("{b}.att_t.v"), vec![t, t], Init::Xavier(t, t)));
                }
                let c = cfg.channels;
                let kt = cfg.temporal_kernel;
                for (blk, cin) in [(1, 1), (2, c)] {
                    out.push((format!("{b}.block{blk}.theta"), vec![cfg.k, cin, c], Init::Xavier(cfg.k * cin, c)));
                    out.push((format!("{b}.block{blk}.theta_b"), vec![c], Init::Zero));
                    out.push((format!("{b}.block{blk}.phi"), vec![kt, c, c], Init::Xavier(kt * c, c)));
                    out.push((format!("{b}.block{blk}.phi_b"), vec![c], Init::Zero));
                }
                out.push((format!("{b}.fc.w"), vec![t * c, q], Init::Xavier(t * c, q)));
                out.push((format!("{b}.fc.b"), vec![q], Init::Zero));
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    Xavier(usize, usize),
}

impl Model {
    /// Fresh model with Xavier-initialized weights and zero biases. Each
    /// parameter draws from its own stream derived from the seed and its
    /// name.
    pub fn new(config: ModelConfig, basis: Option<SpectralBasis>) -> Result<Self, ModelError> {
        config.validate()?;
        let params = param_shapes(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zero => Tensor::zeros(&shape),
                    Init::Xavier(fi, fo) => {
                        let n = shape.iter().product();
                        let values = xavier_init(fi, fo, n, derive_seed(config.seed, &name));
                        Tensor::new(shape, values).expect("shape product")
                    }
                };
                (name, t)
            })
            .collect();
        Self::from_parts(config, params, basis)
    }

    /// Assembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        basis: Option<SpectralBasis>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            match params.get(name) {
                None => return Err(ModelError::MissingParam(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        let ops = if config.kind == ModelKind::Mlp {
            None
        } else {
            let basis = basis
                .as_ref()
                .ok_or_else(|| ModelError::Config("graph variants need a spectral basis".into()))?;
            if basis.order() != config.k || basis.node_count() != config.nodes {
                return Err(ModelError::Config(format!(
                    "basis has order {} on {} nodes, config wants {} on {}",
                    basis.order(),
                    basis.node_count(),
                    config.k,
                    config.nodes
                )));
            }
            Some(Arc::new(ChebOperators::new(&basis.cheb_polys)))
        };
        Ok(Model {
            config,
            params,
            basis,
            ops,
        })
    }

    /// Rebuilds the basis from a stored Laplacian.
    pub fn basis_from_laplacian(
        laplacian: &DMatrix<f64>,
        lambda_max: f64,
        k: usize,
    ) -> Result<SpectralBasis, ModelError> {
        Ok(chebyshev_basis(laplacian, lambda_max, k)?)
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize, ModelError> {
        let s = tape.shape(x);
        let expected = [s.first().copied().unwrap_or(0), self.config.nodes, self.config.t_hist];
        if s.len() != 3 || s[1..] != expected[1..] || s[0] == 0 {
            return Err(ModelError::InputShape {
                got: s.to_vec(),
                expected: expected.to_vec(),
            });
        }
        Ok(s[0])
    }

    /// Spatial and temporal masks for a `[B, N, T]` input: `[B, N, N]` and
    /// `[B, T, T]`, each row summing to 1.
    pub fn attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        branch: Branch,
        x: Var,
    ) -> Result<(Var, Var), ModelError> {
        if !self.config.kind.has_attention() {
            return Err(ModelError::NoAttention(self.config.kind));
        }
        let b = branch.name();
        let spatial = attention_mask(
            tape,
            x,
            p.get(&format!("{b}.att_s.w1"))?,
            p.get(&format!("{b}.att_s.w2"))?,
            p.get(&format!("{b}.att_s.b"))?,
            p.get(&format!("{b}.att_s.v"))?,
        )?;
        let xt = tape.transpose(x)?;
        let temporal = attention_mask(
            tape,
            xt,
            p.get(&format!("{b}.att_t.w1"))?,
            p.get(&format!("{b}.att_t.w2"))?,
            p.get(&format!("{b}.att_t.b"))?,
            p.get(&format!("{b}.att_t.v"))?,
        )?;
        Ok((spatial, temporal))
    }

    /// Raw branch output `[N, B, q]` (graph variants) or `[M, B, q]` (MLP)
    /// on the network's internal scale.
    pub fn branch_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        branch: Branch,
        x: Var,
    ) -> Result<Var, ModelError> {
        let batch = self.check_input(tape, x)?;
        if self.config.kind == ModelKind::Mlp {
            return self.mlp_forward(tape, p, branch, x, batch);
        }
        let mapped = if self.config.kind.has_attention() {
            let (s, e) = self.attention(tape, p, branch, x)?;
            apply_attention(tape, x, e, s)?
        } else {
            x
        };
        self.graph_branch(tape, p, branch, mapped, batch)
    }

    /// Graph branch fed through caller-supplied masks instead of learned
    /// ones; `s` is `[B, N, N]`, `e` is `[B, T, T]`.
    pub fn branch_forward_with_masks(
        &self,
        tape: &mut Tape,
        p: &Bound,
        branch: Branch,
        x: Var,
        s: Var,
        e: Var,
    ) -> Result<Var, ModelError> {
        let batch = self.check_input(tape, x)?;
        if self.config.kind == ModelKind::Mlp {
            return Err(ModelError::NoAttention(ModelKind::Mlp));
        }
        let mapped = apply_attention(tape, x, e, s)?;
        self.graph_branch(tape, p, branch, mapped, batch)
    }

    fn graph_branch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        branch: Branch,
        mapped: Var,
        batch: usize,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let (n, t, c) = (cfg.nodes, cfg.t_hist, cfg.channels);
        let b = branch.name();
        let ops = self.ops.as_ref().expect("graph variant has operators");
        // [B, N, T] -> [N, B*T, 1]
        let h = tape.permute(mapped, &[1, 0, 2])?;
        let mut h = tape.reshape(h, &[n, batch * t, 1])?;
        for blk in 1..=2 {
            h = st_conv_block(
                tape,
                h,
                p.get(&format!("{b}.block{blk}.theta"))?,
                p.get(&format!("{b}.block{blk}.theta_b"))?,
                p.get(&format!("{b}.block{blk}.phi"))?,
                p.get(&format!("{b}.block{blk}.phi_b"))?,
                ops,
                t,
            )?;
        }
        let flat = tape.reshape(h, &[n * batch, t * c])?;
        let y = tape.matmul(flat, p.get(&format!("{b}.fc.w"))?)?;
        let y = tape.add(y, p.get(&format!("{b}.fc.b"))?)?;
        Ok(tape.reshape(y, &[n, batch, cfg.q(branch)])?)
    }

    fn mlp_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        branch: Branch,
        x: Var,
        batch: usize,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let m = cfg.mlp_nodes.len();
        let t = cfg.t_hist;
        // gather the modeled nodes: [M, B, T]
        let xv = tape.value(x);
        let mut gathered = vec![0.0; m * batch * t];
        for (j, &node) in cfg.mlp_nodes.iter().enumerate() {
            for bi in 0..batch {
                let src = (bi * cfg.nodes + node) * t;
                let dst = (j * batch + bi) * t;
                gathered[dst..dst + t].copy_from_slice(&xv.data()[src..src + t]);
            }
        }
        let mut h = tape.leaf(Tensor::new(vec![m, batch, t], gathered)?);
        let ones = tape.leaf(Tensor::full(&[m, batch, 1], 1.0));
        let b = branch.name();
        for l in 0..=cfg.mlp_hidden_layers {
            let w = p.get(&format!("{b}.dense{l:02}.w"))?;
            let bias = p.get(&format!("{b}.dense{l:02}.b"))?;
            let z = tape.batch_matmul(h, w, false, false)?;
            let zb = tape.batch_matmul(ones, bias, false, false)?;
            h = tape.add(z, zb)?;
            if l < cfg.mlp_hidden_layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// All three branches in physical units.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Outputs, ModelError> {
        let norm = &self.config.norm;
        let raw_l = self.branch_forward(tape, p, Branch::Lambda, x)?;
        // [N, B, 1] -> [B, N]
        let l = tape.reduce_sum(raw_l, 2)?;
        let l = tape.transpose(l)?;
        let l = tape.scale(l, norm.lambda_std / self.config.q_lambda as f64);
        let lambda = tape.add_scalar(l, norm.lambda_mean);

        let raw_s = self.branch_forward(tape, p, Branch::Status, x)?;
        let s = tape.permute(raw_s, &[1, 0, 2])?;
        let rows = tape.shape(s)[0] * tape.shape(s)[1];
        let status_logits = tape.reshape(s, &[rows, 2])?;

        let raw_m = self.branch_forward(tape, p, Branch::Mu, x)?;
        let m = tape.reduce_sum(raw_m, 2)?;
        let m = tape.transpose(m)?;
        let mu = tape.scale(m, norm.mu_std);
        Ok(Outputs {
            lambda,
            status_logits,
            mu,
        })
    }

    /// Normalized input `[B, N, T]` from raw load windows, each `T x N`
    /// row-major (hour-major).
    pub fn input_tensor(&self, windows: &[&[f64]]) -> Result<Tensor, ModelError> {
        let (n, t) = (self.config.nodes, self.config.t_hist);
        let norm = &self.config.norm;
        let mut data = vec![0.0; windows.len() * n * t];
        for (bi, w) in windows.iter().enumerate() {
            if w.len() != n * t {
                return Err(ModelError::InputShape {
                    got: vec![w.len()],
                    expected: vec![n * t],
                });
            }
            for ti in 0..t {
                for i in 0..n {
                    data[(bi * n + i) * t + ti] = (w[ti * n + i] - norm.load_mean) / norm.load_std;
                }
            }
        }
        Ok(Tensor::new(vec![windows.len(), n, t], data)?)
    }

    /// Forecasts for a normalized `[B, N, T]` input.
    pub fn predict(&self, input: Tensor) -> Result<Vec<Prediction>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let x = tape.leaf(input);
        let out = self.forward(&mut tape, &p, x)?;
        let lambda = tape.value(out.lambda);
        let logits = tape.value(out.status_logits);
        let mu = tape.value(out.mu);
        let (batch, nout) = (lambda.shape()[0], lambda.shape()[1]);
        let mut preds = Vec::with_capacity(batch);
        for bi in 0..batch {
            let l = &lambda.data()[bi * nout..(bi + 1) * nout];
            let s: Vec<[f64; 2]> = (0..nout)
                .map(|i| {
                    let r = (bi * nout + i) * 2;
                    [logits.data()[r], logits.data()[r + 1]]
                })
                .collect();
            let m: Vec<Vec<f64>> = mu.data()[bi * nout..(bi + 1) * nout].iter().map(|v| vec![*v]).collect();
            let pred = if self.config.kind == ModelKind::Mlp {
                compose_per_node(l, &s, &m)
            } else {
                compose_lmp(l, &s, &m)
            };
            preds.push(pred);
        }
        Ok(preds)
    }

    /// Spatial and temporal masks for one normalized `[1, N, T]` input, per
    /// branch.
    pub fn attention_masks(&self, input: Tensor) -> Result<Vec<(Branch, Tensor, Tensor)>, ModelError> {
        if !self.config.kind.has_attention() {
            return Err(ModelError::NoAttention(self.config.kind));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let x = tape.leaf(input);
        self.check_input(&tape, x)?;
        let mut out = Vec::new();
        for branch in Branch::ALL {
            let (s, e) = self.attention(&mut tape, &p, branch, x)?;
            let (n, t) = (self.config.nodes, self.config.t_hist);
            let s = tape.value(s).data()[..n * n].to_vec();
            let e = tape.value(e).data()[..t * t].to_vec();
            out.push((branch, Tensor::new(vec![n, n], s)?, Tensor::new(vec![t, t], e)?));
        }
        Ok(out)
    }
}

/// MLP composition: each node combines its own three heads.
fn compose_per_node(lambda: &[f64], s_logits: &[[f64; 2]], mu: &[Vec<f64>]) -> Prediction {
    let parts: Vec<Prediction> = (0..lambda.len())
        .map(|i| compose_lmp(&lambda[i..=i], &s_logits[i..=i], &mu[i..=i]))
        .collect();
    let system = compose_lmp(lambda, s_logits, mu);
    Prediction {
        lmp: parts.iter().map(|p| p.lmp[0]).collect(),
        ..system
    }
}

/// `V o sigmoid((x w1)(x w2)' + b)`, row-normalized. `x` is `[B, R, F]`,
/// `w1`, `w2` are `[F, 1]`, `b` and `v` are `[R, R]`; output `[B, R, R]`.
pub fn attention_mask(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    w2: Var,
    b: Var,
    v: Var,
) -> Result<Var, TensorError> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(TensorError::Shape {
            op: "attention",
            shapes: vec![s],
        });
    }
    let (batch, rows, feat) = (s[0], s[1], s[2]);
    let flat = tape.reshape(x, &[batch * rows, feat])?;
    let u = tape.matmul(flat, w1)?;
    let u = tape.reshape(u, &[batch, rows, 1])?;
    let w = tape.matmul(flat, w2)?;
    let w = tape.reshape(w, &[batch, rows, 1])?;
    let outer = tape.batch_matmul(u, w, false, true)?;
    let pre = tape.add(outer, b)?;
    let gate = tape.sigmoid(pre);
    let scored = tape.mul(gate, v)?;
    tape.row_softmax(scored)
}

/// `S' x E'^T`: mixes time with the temporal mask, then nodes with the
/// spatial mask. `x` is `[B, N, T]`, `e` is `[B, T, T]`, `s` is `[B, N, N]`.
pub fn apply_attention(tape: &mut Tape, x: Var, e: Var, s: Var) -> Result<Var, TensorError> {
    let timed = tape.batch_matmul(x, e, false, true)?;
    tape.batch_matmul(s, timed, false, false)
}

/// `ReLU(sum_k T_k x theta_k + bias)` on `[N, M, C_in]`.
pub fn graph_conv(
    tape: &mut Tape,
    x: Var,
    theta: Var,
    bias: Option<Var>,
    ops: &Arc<ChebOperators>,
) -> Result<Var, TensorError> {
    let mut y = tape.cheb_conv(x, theta, ops)?;
    if let Some(b) = bias {
        y = tape.add(y, b)?;
    }
    Ok(tape.relu(y))
}

/// Graph convolution, then a same-padded temporal convolution, each
/// followed by ReLU. `x` is `[N, B*T, C_in]`; output `[N, B*T, C]`.
#[allow(clippy::too_many_arguments)]
pub fn st_conv_block(
    tape: &mut Tape,
    x: Var,
    theta: Var,
    theta_b: Var,
    phi: Var,
    phi_b: Var,
    ops: &Arc<ChebOperators>,
    t: usize,
) -> Result<Var, TensorError> {
    let g = graph_conv(tape, x, theta, Some(theta_b), ops)?;
    let s = tape.shape(g).to_vec();
    let (n, bt, c) = (s[0], s[1], s[2]);
    if bt % t != 0 {
        return Err(TensorError::Shape {
            op: "st_conv_block",
            shapes: vec![s, vec![t]],
        });
    }
    let seq = tape.reshape(g, &[n * (bt / t), t, c])?;
    let y = tape.conv1d_time(seq, phi)?;
    let y = tape.add(y, phi_b)?;
    let y = tape.relu(y);
    let cout = tape.shape(y)[2];
    tape.reshape(y, &[n, bt, cout])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_basis(n: usize, k: usize) -> SpectralBasis {
        let mut l = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            let j = (i + 1) % n;
            l[(i, j)] = -0.5;
            l[(j, i)] = -0.5;
        }
        chebyshev_basis(&l, 2.0, k).unwrap()
    }

    fn small(kind: ModelKind, n: usize, t: usize) -> ModelConfig {
        let mut c = ModelConfig::new(kind, n);
        c.t_hist = t;
        c.channels = 4;
        c.q_mu = 3;
        c.mlp_hidden_layers = 2;
        c.mlp_width = 5;
        if kind == ModelKind::Mlp {
            c.mlp_nodes = vec![0, 2];
        }
        c
    }

    #[test]
    fn compose_examples() {
        let p = compose_lmp(&[20.0, 20.0], &[[5.0, -5.0]; 2], &[vec![1.0], vec![-3.0]]);
        assert_eq!(p.s, 0);
        assert_eq!(p.lmp, vec![20.0, 20.0]);
        let p = compose_lmp(&[20.0; 4], &[[-5.0, 5.0]; 4], &[vec![0.0], vec![0.0], vec![-1.0, -1.5], vec![0.0]]);
        assert_eq!(p.s, 1);
        assert_eq!(p.lmp, vec![20.0, 20.0, 17.5, 20.0]);
    }

    #[test]
    fn branch_output_widths() {
        let mut c = small(ModelKind::Astgcn, 5, 3);
        c.q_mu = 16;
        let model = Model::new(c, Some(toy_basis(5, 3))).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let x = tape.leaf(Tensor::full(&[2, 5, 3], 0.3));
        for (branch, q) in [(Branch::Lambda, 1), (Branch::Status, 2), (Branch::Mu, 16)] {
            let y = model.branch_forward(&mut tape, &p, branch, x).unwrap();
            assert_eq!(tape.shape(y), &[5, 2, q]);
        }
        let preds = model.predict(Tensor::full(&[2, 5, 3], 0.3)).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].lmp.len(), 5);
    }

    #[test]
    fn zero_params_give_uniform_masks() {
        let c = small(ModelKind::Astgcn, 4, 3);
        let mut model = Model::new(c, Some(toy_basis(4, 3))).unwrap();
        for t in model.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let masks = model.attention_masks(Tensor::zeros(&[1, 4, 3])).unwrap();
        for (_, s, e) in masks {
            assert!(s.data().iter().all(|&v| v == 0.25));
            assert!(e.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn single_step_temporal_mask_is_one() {
        let c = small(ModelKind::Astgcn, 4, 1);
        let model = Model::new(c, Some(toy_basis(4, 3))).unwrap();
        let masks = model.attention_masks(Tensor::full(&[1, 4, 1], 0.7)).unwrap();
        for (_, _, e) in masks {
            assert_eq!(e.data(), &[1.0]);
        }
    }

    #[test]
    fn apply_attention_matches_dense_product() {
        // 3 nodes, 2 steps
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s = [0.2, 0.3, 0.5, 0.6, 0.1, 0.3, 0.0, 0.5, 0.5];
        let e = [0.9, 0.1, 0.4, 0.6];
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(vec![1, 3, 2], x.to_vec()).unwrap());
        let sv = tape.leaf(Tensor::new(vec![1, 3, 3], s.to_vec()).unwrap());
        let ev = tape.leaf(Tensor::new(vec![1, 2, 2], e.to_vec()).unwrap());
        let y = apply_attention(&mut tape, xv, ev, sv).unwrap();
        let xm = DMatrix::from_row_slice(3, 2, &x);
        let sm = DMatrix::from_row_slice(3, 3, &s);
        let em = DMatrix::from_row_slice(2, 2, &e);
        let want = sm * xm * em.transpose();
        for i in 0..3 {
            for j in 0..2 {
                assert!((tape.value(y).data()[i * 2 + j] - want[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn uniform_masks_average() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let s = tape.leaf(Tensor::full(&[1, 2, 2], 0.5));
        let e = tape.leaf(Tensor::full(&[1, 2, 2], 0.5));
        let y = apply_attention(&mut tape, x, e, s).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn mlp_zero_weights_output_biases() {
        let c = small(ModelKind::Mlp, 3, 4);
        let mut model = Model::new(c, None).unwrap();
        for (name, t) in model.params.iter_mut() {
            let fill = if name.ends_with(".b") { 0.5 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let x = tape.leaf(Tensor::full(&[2, 3, 4], 1.3));
        for (branch, q) in [(Branch::Lambda, 1), (Branch::Status, 2), (Branch::Mu, 3)] {
            let y = model.branch_forward(&mut tape, &p, branch, x).unwrap();
            assert_eq!(tape.shape(y), &[2, 2, q]);
            assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn gcn_requires_single_step() {
        let mut c = small(ModelKind::Gcn, 3, 1);
        c.t_hist = 2;
        assert!(Model::new(c, Some(toy_basis(3, 3))).is_err());
        let c = small(ModelKind::Gcn, 3, 1);
        let m = Model::new(c, Some(toy_basis(3, 3))).unwrap();
        assert!(matches!(
            m.attention_masks(Tensor::zeros(&[1, 3, 1])),
            Err(ModelError::NoAttention(ModelKind::Gcn))
        ));
    }

    #[test]
    fn gcn_equals_astgcn_with_identity_masks() {
        let basis = toy_basis(4, 3);
        let mut ac = small(ModelKind::Astgcn, 4, 1);
        ac.seed = 9;
        let mut gc = ac.clone();
        gc.kind = ModelKind::Gcn;
        let astgcn = Model::new(ac, Some(basis.clone())).unwrap();
        // share weights: GCN params are the attention-free subset
        let params: ParamStore = astgcn
            .params
            .iter()
            .filter(|(k, _)| !k.contains(".att_"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let gcn = Model::from_parts(gc, params, Some(basis)).unwrap();
        let x = Tensor::new(vec![2, 4, 1], vec![0.3, -1.0, 2.0, 0.5, 1.1, 0.0, -0.4, 0.9]).unwrap();
        let mut tape = Tape::new();
        let pa = astgcn.bind(&mut tape);
        let pg = gcn.bind(&mut tape);
        let xv = tape.leaf(x);
        let mut eye = vec![0.0; 2 * 16];
        for b in 0..2 {
            for i in 0..4 {
                eye[b * 16 + i * 5] = 1.0;
            }
        }
        let s = tape.leaf(Tensor::new(vec![2, 4, 4], eye).unwrap());
        let e = tape.leaf(Tensor::full(&[2, 1, 1], 1.0));
        for branch in Branch::ALL {
            let ya = astgcn.branch_forward_with_masks(&mut tape, &pa, branch, xv, s, e).unwrap();
            let yg = gcn.branch_forward(&mut tape, &pg, branch, xv).unwrap();
            assert_eq!(tape.value(ya), tape.value(yg));
        }
    }

    #[test]
    fn parameter_names_are_stable() {
        let c = small(ModelKind::Gcn, 3, 1);
        let m = Model::new(c, Some(toy_basis(3, 3))).unwrap();
        let names: Vec<&str> = m.params.keys().map(String::as_str).take(4).collect();
        assert_eq!(names, ["lambda.block1.phi", "lambda.block1.phi_b", "lambda.block1.theta", "lambda.block1.theta_b"]);
    }
}
