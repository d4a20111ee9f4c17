//! Hourly nodal loads: source-zone profiles (CSV or synthetic) and the
//! Dirichlet mixing that spreads them over the remaining nodes.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::MarketError;

/// Row-major `hours x columns` matrix of MW values.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadMatrix {
    hours: usize,
    columns: usize,
    values: Vec<f64>,
}

impl LoadMatrix {
    pub fn new(hours: usize, columns: usize, values: Vec<f64>) -> Result<Self, MarketError> {
        if values.len() != hours * columns {
            return Err(MarketError::Shape(format!(
                "load matrix expects {hours}x{columns} = {} values, got {}",
                hours * columns,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(MarketError::Invalid(format!(
                "load at hour {} column {} is {} (must be finite and nonnegative)",
                pos / columns.max(1),
                pos % columns.max(1),
                values[pos]
            )));
        }
        Ok(LoadMatrix {
            hours,
            columns,
            values,
        })
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn row(&self, hour: usize) -> &[f64] {
        &self.values[hour * self.columns..(hour + 1) * self.columns]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.hours).map(|t| self.values[t * self.columns + col]).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total(&self, hour: usize) -> f64 {
        self.row(hour).iter().sum()
    }
}

/// Row-stochastic `n_target x n_source` weights plus the additive noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletMixer {
    pub weights: Vec<Vec<f64>>,
    /// Standard deviation (MW) of the Gaussian noise added per synthetic load.
    pub noise_scale: f64,
}

impl DirichletMixer {
    pub fn n_target(&self) -> usize {
        self.weights.len()
    }

    pub fn n_source(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }
}

/// Draws each row from a symmetric Dirichlet(concentration) by normalizing
/// independent Gamma variates.
pub fn synthesize_weights(
    n_target: usize,
    n_source: usize,
    concentration: f64,
    seed: u64,
) -> Result<DirichletMixer, MarketError> {
    if n_source == 0 {
        return Err(MarketError::Invalid("n_source must be at least 1".into()));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(MarketError::Invalid(format!(
            "Dirichlet concentration must be positive, got {concentration}"
        )));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| MarketError::Invalid(format!("gamma distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(n_target);
    for _ in 0..n_target {
        let mut row: Vec<f64> = loop {
            let draw: Vec<f64> = (0..n_source).map(|_| gamma.sample(&mut rng)).collect();
            // All-zero draws underflow for tiny concentrations; redraw.
            if draw.iter().sum::<f64>() > 0.0 {
                break draw;
            }
        };
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= total);
        // Close the simplex exactly: the last weight absorbs the rounding so a
        // left-to-right sum of the row is 1.0 in floating point.
        let head: f64 = row[..n_source - 1].iter().sum();
        row[n_source - 1] = (1.0 - head).max(0.0);
        weights.push(row);
    }
    Ok(DirichletMixer {
        weights,
        noise_scale: 0.0,
    })
}

/// Produces the full nodal load matrix: `source_nodes[j]` receives source
/// column `j`; every other node (ascending index) receives one mixer row
/// `W d_t + alpha * N(0, 1)`, clipped at zero.
pub fn synthesize_loads(
    mixer: &DirichletMixer,
    source_loads: &LoadMatrix,
    source_nodes: &[usize],
    node_count: usize,
    seed: u64,
) -> Result<LoadMatrix, MarketError> {
    let n_source = source_loads.columns();
    if source_nodes.len() != n_source {
        return Err(MarketError::Shape(format!(
            "{} source nodes for {} source columns",
            source_nodes.len(),
            n_source
        )));
    }
    if mixer.n_target() > 0 && mixer.n_source() != n_source {
        return Err(MarketError::Shape(format!(
            "mixer expects {} source columns, loads have {}",
            mixer.n_source(),
            n_source
        )));
    }
    let mut is_source = vec![false; node_count];
    for &node in source_nodes {
        if node >= node_count || is_source[node] {
            return Err(MarketError::Invalid(format!(
                "source node index {node} out of range or repeated"
            )));
        }
        is_source[node] = true;
    }
    let targets: Vec<usize> = (0..node_count).filter(|&i| !is_source[i]).collect();
    if targets.len() != mixer.n_target() {
        return Err(MarketError::Shape(format!(
            "mixer has {} rows but {} nodes need synthetic loads",
            mixer.n_target(),
            targets.len()
        )));
    }
    let hours = source_loads.hours();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; hours * node_count];
    for t in 0..hours {
        let d = source_loads.row(t);
        let out = &mut values[t * node_count..(t + 1) * node_count];
        for (j, &node) in source_nodes.iter().enumerate() {
            out[node] = d[j];
        }
        for (row, &node) in mixer.weights.iter().zip(&targets) {
            let mixed: f64 = row.iter().zip(d).map(|(w, x)| w * x).sum();
            let noise: f64 = rng.sample(StandardNormal);
            out[node] = (mixed + mixer.noise_scale * noise).max(0.0);
        }
    }
    LoadMatrix::new(hours, node_count, values)
}

/// Smooth daily/weekly/annual profile with multiplicative noise, one column
/// per zone. Used when real zonal load data is unavailable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLoadConfig {
    pub zones: usize,
    pub hours: usize,
    /// Mean zonal load in MW.
    pub base_mw: f64,
    /// Spread of per-zone base multipliers: each zone's base is
    /// `base_mw * (1 + zone_spread * u)`, `u` uniform in [-1, 1].
    pub zone_spread: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub annual_amplitude: f64,
    /// Standard deviation of the multiplicative noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticLoadConfig {
    fn default() -> Self {
        SyntheticLoadConfig {
            zones: 26,
            hours: 24 * 14,
            base_mw: 36.0,
            zone_spread: 0.5,
            daily_amplitude: 0.2,
            weekly_amplitude: 0.06,
            annual_amplitude: 0.1,
            noise: 0.03,
            seed: 0,
        }
    }
}

pub fn synthetic_source_loads(cfg: &SyntheticLoadConfig) -> Result<LoadMatrix, MarketError> {
    if cfg.zones == 0 {
        return Err(MarketError::Invalid("synthetic source needs at least one zone".into()));
    }
    if !(cfg.base_mw >= 0.0) {
        return Err(MarketError::Invalid("base load must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zones: Vec<(f64, f64)> = (0..cfg.zones)
        .map(|_| {
            let u: f64 = rng.random_range(-1.0..=1.0);
            let phase: f64 = rng.random_range(-2.0..=2.0);
            (cfg.base_mw * (1.0 + cfg.zone_spread * u), phase)
        })
        .collect();
    let mut values = Vec::with_capacity(cfg.hours * cfg.zones);
    for t in 0..cfg.hours {
        for &(base, phase) in &zones {
            let h = t as f64 + phase;
            // Morning and evening peaks, a weekday/weekend swing, and a
            // winter/summer cycle.
            let daily = -(2.0 * PI * (h - 3.0) / 24.0).cos() * 0.7
                - (4.0 * PI * (h - 8.0) / 24.0).cos() * 0.3;
            let weekly = (2.0 * PI * h / 168.0).cos();
            let annual = (4.0 * PI * h / 8760.0).cos();
            let shape = 1.0
                + cfg.daily_amplitude * daily
                + cfg.weekly_amplitude * weekly
                + cfg.annual_amplitude * annual;
            let eps: f64 = rng.sample(StandardNormal);
            values.push((base * shape * (1.0 + cfg.noise * eps)).max(0.0));
        }
    }
    LoadMatrix::new(cfg.hours, cfg.zones, values)
}

/// Reads zonal loads from CSV: an `hour` column of consecutive integers
/// followed by one column per zone.
pub fn csv_source_loads(path: &Path, zones: usize) -> Result<LoadMatrix, MarketError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| MarketError::Io(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| MarketError::Io(format!("{}: {e}", path.display())))?
        .clone();
    if header.get(0) != Some("hour") {
        return Err(MarketError::Invalid(format!(
            "{}: first column must be `hour`",
            path.display()
        )));
    }
    if header.len() - 1 != zones {
        return Err(MarketError::Shape(format!(
            "{}: expected {zones} zone columns, found {}",
            path.display(),
            header.len() - 1
        )));
    }
    let mut hours = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| MarketError::Io(format!("{}:{line}: {e}", path.display())))?;
        let hour: i64 = rec[0].parse().map_err(|_| {
            MarketError::Invalid(format!("{}:{line}: bad hour `{}`", path.display(), &rec[0]))
        })?;
        hours.push(hour);
        for field in rec.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| {
                MarketError::Invalid(format!("{}:{line}: bad load `{field}`", path.display()))
            })?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(MarketError::Invalid(format!(
                    "{}:{line}: load {v} is negative or not finite",
                    path.display()
                )));
            }
            values.push(v);
        }
    }
    let mut gaps = Vec::new();
    for pair in hours.windows(2) {
        if pair[1] != pair[0] + 1 {
            gaps.push(format!("{}..{}", pair[0], pair[1]));
        }
    }
    if !gaps.is_empty() {
        return Err(MarketError::MissingHours(gaps));
    }
    LoadMatrix::new(hours.len(), zones, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SourceLoads {
    Csv { path: std::path::PathBuf },
    Synthetic(SyntheticLoadConfig),
}

/// Zonal source loads, `hours x zones`.
pub fn source_load_provider(
    mode: &SourceLoads,
    zones: usize,
    hours: usize,
) -> Result<LoadMatrix, MarketError> {
    match mode {
        SourceLoads::Csv { path } => {
            let loads = csv_source_loads(path, zones)?;
            if loads.hours() < hours {
                return Err(MarketError::Invalid(format!(
                    "{} holds {} hours, {hours} requested",
                    path.display(),
                    loads.hours()
                )));
            }
            let cut = loads.values()[..hours * zones].to_vec();
            LoadMatrix::new(hours, zones, cut)
        }
        SourceLoads::Synthetic(cfg) => synthetic_source_loads(&SyntheticLoadConfig {
            zones,
            hours,
            ..cfg.clone()
        }),
    }
}
