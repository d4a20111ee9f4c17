//! End-to-end dataset generation and the on-disk dataset directory.
//!
//! Directory layout (every CSV starts with an `hour` column):
//!
//! | file | columns |
//! |------|---------|
//! | `loads.csv` | one per node id, every generated hour |
//! | `lambda.csv` | `lambda` |
//! | `mu.csv` | one per monitored line, `line_<from>_<to>` |
//! | `s.csv` | `s` |
//! | `lmp.csv` | one per node id |
//! | `failures.csv` | `status`, `message` for hours excluded from the above |
//! | `split.json` | train/test hour ranges |
//! | `genconfig.json` | generation parameters, seeds and selected lines |
//! | `case/` | the grid case with the applied line limits |

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dispatch::{solve_dcopf, BidCurve, DispatchRecord, LineLimits, Network};
use super::loads::{
    source_load_provider, synthesize_loads, synthesize_weights, LoadMatrix, SourceLoads,
    SyntheticLoadConfig,
};
use super::{derive_seed, MarketError};
use crate::grid::{load_case, ptdf, write_case, GridGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub hours: usize,
    pub seed: u64,
    /// Noise scale (MW) of the synthesized loads.
    pub alpha: f64,
    /// Symmetric Dirichlet concentration for the mixing weights.
    pub concentration: f64,
    pub source: SourceLoads,
    /// Number of source zones; capped at the node count.
    pub source_zones: usize,
    /// Node ids receiving the source columns. Defaults to evenly spaced nodes.
    pub source_nodes: Option<Vec<i64>>,
    pub congested_lines: usize,
    /// Limit = fraction * (mean + std) of the unconstrained |flow|.
    pub limit_fraction: f64,
    /// Hours sampled (evenly) for congested-line selection.
    pub selection_sample_hours: usize,
    pub bid_noise: bool,
    pub train_fraction: f64,
    pub max_failure_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            hours: 24 * 14,
            seed: 0,
            alpha: 5.0,
            concentration: 1.0,
            source: SourceLoads::Synthetic(SyntheticLoadConfig::default()),
            source_zones: 26,
            source_nodes: None,
            congested_lines: 10,
            limit_fraction: 0.7,
            selection_sample_hours: 500,
            bid_noise: true,
            train_fraction: 2.0 / 3.0,
            max_failure_fraction: 0.01,
        }
    }
}

impl GenConfig {
    pub fn years(years: f64) -> usize {
        (years * 8760.0).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourRange {
    pub start: usize,
    pub end: usize,
}

impl HourRange {
    pub fn contains(&self, hour: usize) -> bool {
        (self.start..self.end).contains(&hour)
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: HourRange,
    pub test: HourRange,
}

impl Split {
    /// First `fraction` of the hours for training, the rest for testing.
    pub fn chronological(hours: usize, fraction: f64) -> Self {
        let cut = ((hours as f64) * fraction).round() as usize;
        let cut = cut.min(hours);
        Split {
            train: HourRange { start: 0, end: cut },
            test: HourRange {
                start: cut,
                end: hours,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedLine {
    pub line: usize,
    pub mean_flow: f64,
    pub std_flow: f64,
    pub limit: f64,
}

/// Solved market data aligned by hour.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketDataset {
    /// Grid with every applied line limit.
    pub graph: GridGraph,
    /// Loads for every generated hour (including failed solves).
    pub loads: LoadMatrix,
    /// Hours with a solved market, ascending.
    pub hours: Vec<usize>,
    pub lambda: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub s: Vec<u8>,
    pub lmp: Vec<Vec<f64>>,
    pub monitored: LineLimits,
    pub split: Split,
}

impl MarketDataset {
    pub fn len(&self) -> usize {
        self.hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }

    /// Position of `hour` among the solved hours.
    pub fn position(&self, hour: usize) -> Option<usize> {
        self.hours.binary_search(&hour).ok()
    }

    /// Nodal congestion component `lmp_i - lambda`.
    pub fn nodal_mu(&self, pos: usize) -> Vec<f64> {
        self.lmp[pos].iter().map(|p| p - self.lambda[pos]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub data: MarketDataset,
    pub records: Vec<DispatchRecord>,
    pub failures: Vec<DispatchRecord>,
    pub selected: Vec<SelectedLine>,
    pub config: GenConfig,
    pub source_nodes: Vec<usize>,
}

fn default_source_nodes(n: usize, zones: usize) -> Vec<usize> {
    (0..zones).map(|j| j * n / zones).collect()
}

fn hour_bids(graph: &GridGraph, seed: u64, hour: usize, total: f64, noise: bool) -> BidCurve {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bids"));
    rng.set_stream(hour as u64);
    if noise {
        BidCurve::for_hour(graph, total, Some(&mut rng))
    } else {
        BidCurve::for_hour::<ChaCha8Rng>(graph, total, None)
    }
}

/// Ranks lines by mean |flow| in an unconstrained dispatch over a sample of
/// hours and assigns limits to the top `count`.
pub fn select_congested_lines(
    graph: &GridGraph,
    loads: &LoadMatrix,
    config: &GenConfig,
    count: usize,
) -> Result<Vec<SelectedLine>, MarketError> {
    if count == 0 || loads.hours() == 0 {
        return Ok(Vec::new());
    }
    let p = ptdf(graph)?;
    let all = LineLimits::none();
    let net = Network::new(graph.clone(), p.clone(), all);
    let step = loads.hours().div_ceil(config.selection_sample_hours.max(1));
    let sample: Vec<usize> = (0..loads.hours()).step_by(step.max(1)).collect();
    let flows: Vec<Vec<f64>> = sample
        .par_iter()
        .map(|&t| {
            let d = loads.row(t);
            let bids = hour_bids(graph, config.seed, t, d.iter().sum(), config.bid_noise);
            let r = solve_dcopf(&net, t, d, &bids);
            if !r.is_optimal() {
                return Err(MarketError::Unsolvable {
                    hour: t,
                    msg: r.diagnostics.unwrap_or_default(),
                });
            }
            let mut inj: Vec<f64> = d.iter().map(|x| -x).collect();
            for (i, g) in graph.generators.iter().enumerate() {
                inj[g.node] += r.generation[i];
            }
            Ok(p.flows(&inj))
        })
        .collect::<Result<_, _>>()?;
    let n = flows.len() as f64;
    let mut stats: Vec<SelectedLine> = (0..graph.edge_count())
        .filter(|&k| graph.edges[k].flow_limit.is_none())
        .map(|k| {
            let abs: Vec<f64> = flows.iter().map(|f| f[k].abs()).collect();
            let mean = abs.iter().sum::<f64>() / n;
            let var = abs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            SelectedLine {
                line: k,
                mean_flow: mean,
                std_flow: std,
                limit: config.limit_fraction * (mean + std),
            }
        })
        .collect();
    stats.sort_by(|a, b| b.mean_flow.total_cmp(&a.mean_flow).then(a.line.cmp(&b.line)));
    stats.truncate(count);
    Ok(stats)
}

/// Generates loads, congestion limits and hourly market solutions.
pub fn generate_dataset(graph: &GridGraph, config: &GenConfig) -> Result<Generated, MarketError> {
    let n = graph.node_count();
    let zones = config.source_zones.min(n).max(1);
    let source_nodes = match &config.source_nodes {
        Some(ids) => ids
            .iter()
            .map(|&id| {
                graph
                    .index_of(id)
                    .ok_or_else(|| MarketError::Invalid(format!("unknown source node id {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => default_source_nodes(n, zones),
    };
    let zones = source_nodes.len();
    let source = match &config.source {
        SourceLoads::Synthetic(cfg) => SourceLoads::Synthetic(SyntheticLoadConfig {
            seed: derive_seed(config.seed, "source"),
            ..cfg.clone()
        }),
        other => other.clone(),
    };
    let source_loads = source_load_provider(&source, zones, config.hours)?;
    let mut mixer = synthesize_weights(
        n - zones,
        zones,
        config.concentration,
        derive_seed(config.seed, "weights"),
    )?;
    mixer.noise_scale = config.alpha;
    let loads = synthesize_loads(
        &mixer,
        &source_loads,
        &source_nodes,
        n,
        derive_seed(config.seed, "load-noise"),
    )?;

    let selected = select_congested_lines(graph, &loads, config, config.congested_lines)?;
    let mut limited = graph.clone();
    for sel in &selected {
        limited.edges[sel.line].flow_limit = Some(sel.limit);
    }
    let limits = LineLimits::from_graph(&limited);
    info!(
        "generating {} hours on {} with {} monitored lines",
        config.hours,
        limited,
        limits.len()
    );
    let net = Network::new(limited.clone(), ptdf(&limited)?, limits.clone());

    let solved: Vec<DispatchRecord> = (0..config.hours)
        .into_par_iter()
        .map(|t| {
            let d = loads.row(t);
            let bids = hour_bids(&limited, config.seed, t, d.iter().sum(), config.bid_noise);
            solve_dcopf(&net, t, d, &bids)
        })
        .collect();
    let (records, failures): (Vec<_>, Vec<_>) =
        solved.into_iter().partition(DispatchRecord::is_optimal);
    if !failures.is_empty() {
        warn!("{} of {} hours failed to solve", failures.len(), config.hours);
        if failures.len() as f64 > config.max_failure_fraction * config.hours as f64 {
            let first = &failures[0];
            return Err(MarketError::TooManyFailures {
                failed: failures.len(),
                total: config.hours,
                first: format!(
                    "hour {} {:?}: {}",
                    first.hour,
                    first.solver_status,
                    first.diagnostics.clone().unwrap_or_default()
                ),
            });
        }
    }

    let data = MarketDataset {
        graph: limited,
        loads,
        hours: records.iter().map(|r| r.hour).collect(),
        lambda: records.iter().map(|r| r.lambda).collect(),
        mu: records.iter().map(|r| r.mu.clone()).collect(),
        s: records.iter().map(|r| r.s).collect(),
        lmp: records.iter().map(|r| r.lmp.clone()).collect(),
        monitored: limits,
        split: Split::chronological(config.hours, config.train_fraction),
    };
    Ok(Generated {
        data,
        records,
        failures,
        selected,
        config: config.clone(),
        source_nodes,
    })
}

#[derive(Serialize, Deserialize)]
struct GenConfigFile {
    config: GenConfig,
    derived_seeds: Vec<(String, u64)>,
    source_nodes: Vec<i64>,
    selected_lines: Vec<SelectedLineFile>,
    solved_hours: usize,
    failed_hours: usize,
}

#[derive(Serialize, Deserialize)]
struct SelectedLineFile {
    from: i64,
    to: i64,
    #[serde(flatten)]
    stats: SelectedLine,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> MarketError {
    MarketError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, body: &str) -> Result<(), MarketError> {
    fs::write(path, body).map_err(|e| io_err(path, e))
}

fn header(first: &str, names: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from(first);
    for n in names {
        s.push(',');
        s.push_str(&n);
    }
    s.push('\n');
    s
}

fn push_row(out: &mut String, hour: usize, values: &[f64]) {
    write!(out, "{hour}").unwrap();
    for v in values {
        write!(out, ",{v}").unwrap();
    }
    out.push('\n');
}

pub fn line_name(graph: &GridGraph, line: usize) -> String {
    let e = &graph.edges[line];
    format!("line_{}_{}", graph.node_ids[e.from], graph.node_ids[e.to])
}

/// Writes the dataset directory. Output bytes depend only on the inputs.
pub fn write_dataset(gen: &Generated, dir: &Path) -> Result<(), MarketError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let data = &gen.data;
    let g = &data.graph;
    let ids = || g.node_ids.iter().map(|i| i.to_string());

    let mut loads = header("hour", ids());
    for t in 0..data.loads.hours() {
        push_row(&mut loads, t, data.loads.row(t));
    }
    write_file(&dir.join("loads.csv"), &loads)?;

    let mut lambda = String::from("hour,lambda\n");
    let mut mu = header("hour", data.monitored.lines.iter().map(|&k| line_name(g, k)));
    let mut s = String::from("hour,s\n");
    let mut lmp = header("hour", ids());
    for (pos, &t) in data.hours.iter().enumerate() {
        push_row(&mut lambda, t, &[data.lambda[pos]]);
        push_row(&mut mu, t, &data.mu[pos]);
        writeln!(s, "{t},{}", data.s[pos]).unwrap();
        push_row(&mut lmp, t, &data.lmp[pos]);
    }
    write_file(&dir.join("lambda.csv"), &lambda)?;
    write_file(&dir.join("mu.csv"), &mu)?;
    write_file(&dir.join("s.csv"), &s)?;
    write_file(&dir.join("lmp.csv"), &lmp)?;

    let mut failures = String::from("hour,status,message\n");
    for f in &gen.failures {
        let msg = f.diagnostics.clone().unwrap_or_default().replace([',', '\n'], ";");
        writeln!(failures, "{},{:?},{}", f.hour, f.solver_status, msg).unwrap();
    }
    write_file(&dir.join("failures.csv"), &failures)?;

    let split = serde_json::to_string_pretty(&data.split).expect("split serializes");
    write_file(&dir.join("split.json"), &(split + "\n"))?;

    let cfg = &gen.config;
    let file = GenConfigFile {
        config: cfg.clone(),
        derived_seeds: ["source", "weights", "load-noise", "bids"]
            .iter()
            .map(|l| (l.to_string(), derive_seed(cfg.seed, l)))
            .collect(),
        source_nodes: gen.source_nodes.iter().map(|&i| g.node_ids[i]).collect(),
        selected_lines: gen
            .selected
            .iter()
            .map(|s| SelectedLineFile {
                from: g.node_ids[g.edges[s.line].from],
                to: g.node_ids[g.edges[s.line].to],
                stats: s.clone(),
            })
            .collect(),
        solved_hours: gen.records.len(),
        failed_hours: gen.failures.len(),
    };
    let json = serde_json::to_string_pretty(&file).expect("config serializes");
    write_file(&dir.join("genconfig.json"), &(json + "\n"))?;
    write_case(g, dir.join("case"))?;
    Ok(())
}

struct Table {
    header: Vec<String>,
    hours: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table, MarketError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("hour") {
        return Err(MarketError::Invalid(format!(
            "{}: first column must be `hour`",
            path.display()
        )));
    }
    let mut hours = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let bad = |f: &str| MarketError::Invalid(format!("{}:{}: bad value `{f}`", path.display(), i + 2));
        hours.push(rec[0].parse().map_err(|_| bad(&rec[0]))?);
        rows.push(
            rec.iter()
                .skip(1)
                .map(|f| f.parse::<f64>().map_err(|_| bad(f)))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok(Table {
        header: header[1..].to_vec(),
        hours,
        rows,
    })
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<MarketDataset, MarketError> {
    let graph = load_case(dir.join("case"))?;
    let loads_t = read_table(&dir.join("loads.csv"))?;
    let ids: Vec<String> = graph.node_ids.iter().map(|i| i.to_string()).collect();
    if loads_t.header != ids {
        return Err(MarketError::Shape("loads.csv columns do not match case nodes".into()));
    }
    if loads_t.hours.iter().enumerate().any(|(i, &h)| i != h) {
        return Err(MarketError::Invalid("loads.csv hours must be 0, 1, 2, ...".into()));
    }
    let loads = LoadMatrix::new(
        loads_t.rows.len(),
        ids.len(),
        loads_t.rows.into_iter().flatten().collect(),
    )?;
    let lambda_t = read_table(&dir.join("lambda.csv"))?;
    let mu_t = read_table(&dir.join("mu.csv"))?;
    let s_t = read_table(&dir.join("s.csv"))?;
    let lmp_t = read_table(&dir.join("lmp.csv"))?;
    for t in [&mu_t, &s_t, &lmp_t] {
        if t.hours != lambda_t.hours {
            return Err(MarketError::Shape("target files disagree on solved hours".into()));
        }
    }
    if lmp_t.header != ids {
        return Err(MarketError::Shape("lmp.csv columns do not match case nodes".into()));
    }
    let monitored = LineLimits::from_graph(&graph);
    let names: Vec<String> = monitored.lines.iter().map(|&k| line_name(&graph, k)).collect();
    if mu_t.header != names {
        return Err(MarketError::Shape("mu.csv columns do not match monitored lines".into()));
    }
    let split_path = dir.join("split.json");
    let split: Split = serde_json::from_str(
        &fs::read_to_string(&split_path).map_err(|e| io_err(&split_path, e))?,
    )
    .map_err(|e| io_err(&split_path, e))?;
    Ok(MarketDataset {
        graph,
        loads,
        hours: lambda_t.hours,
        lambda: lambda_t.rows.iter().map(|r| r[0]).collect(),
        mu: mu_t.rows,
        s: s_t.rows.iter().map(|r| u8::from(r[0] != 0.0)).collect(),
        lmp: lmp_t.rows,
        monitored,
        split,
    })
}
