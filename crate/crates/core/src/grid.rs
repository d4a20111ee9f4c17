//! Grid topology: case ingestion, Laplacians, the Chebyshev basis used by
//! graph convolution, and DC power transfer distribution factors.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid case: {0}")]
    Invalid(String),
    #[error("node {0} has degree zero")]
    IsolatedNode(usize),
    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    NoConvergence { iterations: usize, estimate: f64 },
    #[error("lambda_max must be positive, got {0}")]
    NonPositiveLambdaMax(f64),
    #[error("Chebyshev order K must be at least 1")]
    ZeroOrder,
    #[error("reduced susceptance matrix is singular; network is disconnected")]
    SingularSusceptance,
    #[error("expected a square matrix, got {0}x{1}")]
    NotSquare(usize, usize),
}

/// Transmission line between two nodes. Orientation is `from -> to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Per-unit susceptance (1/x).
    pub susceptance: f64,
    /// MW; `None` means unlimited.
    pub flow_limit: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub node: usize,
    pub g_min: f64,
    pub g_max: f64,
    /// Base quadratic bid coefficient, $/MWh^2.
    pub c20: f64,
    /// Base linear bid coefficient, $/MWh.
    pub c10: f64,
}

/// Validated grid. Node indices are dense `0..node_count`; `node_ids` keeps the
/// identifiers used in the case files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGraph {
    pub node_ids: Vec<i64>,
    pub base_loads: Option<Vec<f64>>,
    pub edges: Vec<Edge>,
    pub generators: Vec<Generator>,
    pub slack_node: usize,
}

impl GridGraph {
    /// Builds and validates a graph over nodes `0..node_count`.
    pub fn new(
        node_count: usize,
        edges: Vec<Edge>,
        generators: Vec<Generator>,
        slack_node: usize,
    ) -> Result<Self, GridError> {
        let graph = GridGraph {
            node_ids: (1..=node_count as i64).collect(),
            base_loads: None,
            edges,
            generators,
            slack_node,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn index_of(&self, node_id: i64) -> Option<usize> {
        self.node_ids.iter().position(|&id| id == node_id)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let n = self.node_count();
        if n == 0 {
            return Err(GridError::Invalid("graph has no nodes".into()));
        }
        let ids: BTreeSet<i64> = self.node_ids.iter().copied().collect();
        if ids.len() != n {
            return Err(GridError::Invalid("duplicate node id".into()));
        }
        let mut seen = BTreeSet::new();
        for (k, e) in self.edges.iter().enumerate() {
            if e.from >= n || e.to >= n {
                return Err(GridError::Invalid(format!(
                    "edge {k} references node outside [0, {n})"
                )));
            }
            if e.from == e.to {
                return Err(GridError::Invalid(format!("edge {k} is a self-loop")));
            }
            if !(e.susceptance.is_finite() && e.susceptance > 0.0) {
                return Err(GridError::Invalid(format!(
                    "edge {k} has non-positive susceptance {}",
                    e.susceptance
                )));
            }
            if let Some(limit) = e.flow_limit {
                if !(limit.is_finite() && limit > 0.0) {
                    return Err(GridError::Invalid(format!(
                        "edge {k} has non-positive flow limit {limit}"
                    )));
                }
            }
            let key = (e.from.min(e.to), e.from.max(e.to));
            if !seen.insert(key) {
                return Err(GridError::Invalid(format!(
                    "duplicate undirected edge between nodes {} and {}",
                    self.node_ids[key.0], self.node_ids[key.1]
                )));
            }
        }
        if self.generators.is_empty() {
            return Err(GridError::Invalid("at least one generator is required".into()));
        }
        for (i, g) in self.generators.iter().enumerate() {
            if g.node >= n {
                return Err(GridError::Invalid(format!(
                    "generator {i} references node outside [0, {n})"
                )));
            }
            if !(g.g_min <= g.g_max) {
                return Err(GridError::Invalid(format!(
                    "generator {i} violates g_min <= g_max ({} > {})",
                    g.g_min, g.g_max
                )));
            }
        }
        if self.slack_node >= n {
            return Err(GridError::Invalid(format!(
                "slack node index {} outside [0, {n})",
                self.slack_node
            )));
        }
        if !self.is_connected() {
            return Err(GridError::Invalid("graph is not connected".into()));
        }
        Ok(())
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for e in &self.edges {
            adj[e.from].push(e.to);
            adj[e.to].push(e.from);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        let adj = self.neighbors();
        let mut visited = vec![false; n];
        let mut queue = VecDeque::from([0]);
        visited[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == n
    }

    /// Symmetric adjacency with either unit or susceptance weights.
    pub fn adjacency(&self, weighting: LaplacianWeighting) -> DMatrix<f64> {
        let n = self.node_count();
        let mut a = DMatrix::zeros(n, n);
        for e in &self.edges {
            let w = match weighting {
                LaplacianWeighting::Binary => 1.0,
                LaplacianWeighting::Susceptance => e.susceptance,
            };
            a[(e.from, e.to)] += w;
            a[(e.to, e.from)] += w;
        }
        a
    }

    /// DC susceptance matrix `B` (weighted Laplacian over susceptances).
    pub fn susceptance_matrix(&self) -> DMatrix<f64> {
        let n = self.node_count();
        let mut b = DMatrix::zeros(n, n);
        for e in &self.edges {
            b[(e.from, e.from)] += e.susceptance;
            b[(e.to, e.to)] += e.susceptance;
            b[(e.from, e.to)] -= e.susceptance;
            b[(e.to, e.from)] -= e.susceptance;
        }
        b
    }

    /// Indices of lines carrying a finite flow limit.
    pub fn monitored_lines(&self) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter_map(|(k, e)| e.flow_limit.map(|_| k))
            .collect()
    }
}

impl fmt::Display for GridGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} nodes, {} edges, {} generators, slack node {}",
            self.node_count(),
            self.edge_count(),
            self.generators.len(),
            self.node_ids[self.slack_node]
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaplacianWeighting {
    #[default]
    Binary,
    Susceptance,
}

struct CsvTable {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

impl CsvTable {
    fn read(path: &Path) -> Result<Self, GridError> {
        let text = fs::read_to_string(path).map_err(|source| GridError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let header = match lines.next() {
            Some((_, l)) => l.split(',').map(|s| s.trim().to_string()).collect(),
            None => {
                return Err(GridError::Parse {
                    file: path.to_owned(),
                    line: 1,
                    msg: "missing header".into(),
                })
            }
        };
        let rows = lines
            .map(|(i, l)| (i, l.split(',').map(|s| s.trim().to_string()).collect()))
            .collect();
        Ok(CsvTable {
            path: path.to_owned(),
            header,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize, GridError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GridError::Parse {
                file: self.path.clone(),
                line: 1,
                msg: format!("missing column `{name}`"),
            })
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> GridError {
        GridError::Parse {
            file: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn field<'a>(&self, line: usize, row: &'a [String], col: usize) -> Result<&'a str, GridError> {
        row.get(col)
            .map(String::as_str)
            .ok_or_else(|| self.err(line, format!("expected at least {} fields", col + 1)))
    }

    fn float(&self, line: usize, row: &[String], col: usize) -> Result<f64, GridError> {
        let raw = self.field(line, row, col)?;
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(line, format!("`{}` is not a finite number", raw)))
    }

    fn int(&self, line: usize, row: &[String], col: usize) -> Result<i64, GridError> {
        let raw = self.field(line, row, col)?;
        raw.parse::<i64>()
            .map_err(|_| self.err(line, format!("`{}` is not an integer", raw)))
    }
}

/// Reads a case directory holding `nodes.csv`, `edges.csv`, `generators.csv`
/// and `meta.csv`.
pub fn load_case(dir: impl AsRef<Path>) -> Result<GridGraph, GridError> {
    let dir = dir.as_ref();
    let nodes = CsvTable::read(&dir.join("nodes.csv"))?;
    let id_col = nodes.column("node_id")?;
    let load_col = nodes.header.iter().position(|h| h == "base_load_mw");
    let mut node_ids = Vec::new();
    let mut base_loads = Vec::new();
    let mut index = HashMap::new();
    for (line, row) in &nodes.rows {
        let id = nodes.int(*line, row, id_col)?;
        if index.insert(id, node_ids.len()).is_some() {
            return Err(nodes.err(*line, format!("duplicate node id {id}")));
        }
        node_ids.push(id);
        if let Some(c) = load_col {
            base_loads.push(nodes.float(*line, row, c)?);
        }
    }
    let lookup = |table: &CsvTable, line: usize, id: i64| {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| table.err(line, format!("unknown node id {id}")))
    };

    let edges_t = CsvTable::read(&dir.join("edges.csv"))?;
    let (cf, ct, cb, cl) = (
        edges_t.column("from")?,
        edges_t.column("to")?,
        edges_t.column("susceptance_pu")?,
        edges_t.column("flow_limit_mw")?,
    );
    let mut edges = Vec::new();
    for (line, row) in &edges_t.rows {
        let from = lookup(&edges_t, *line, edges_t.int(*line, row, cf)?)?;
        let to = lookup(&edges_t, *line, edges_t.int(*line, row, ct)?)?;
        let susceptance = edges_t.float(*line, row, cb)?;
        let flow_limit = match row.get(cl).map(String::as_str) {
            None | Some("") => None,
            Some(_) => Some(edges_t.float(*line, row, cl)?),
        };
        edges.push(Edge {
            from,
            to,
            susceptance,
            flow_limit,
        });
    }

    let gens_t = CsvTable::read(&dir.join("generators.csv"))?;
    let cols = [
        gens_t.column("node")?,
        gens_t.column("g_min_mw")?,
        gens_t.column("g_max_mw")?,
        gens_t.column("c20")?,
        gens_t.column("c10")?,
    ];
    let mut generators = Vec::new();
    for (line, row) in &gens_t.rows {
        generators.push(Generator {
            node: lookup(&gens_t, *line, gens_t.int(*line, row, cols[0])?)?,
            g_min: gens_t.float(*line, row, cols[1])?,
            g_max: gens_t.float(*line, row, cols[2])?,
            c20: gens_t.float(*line, row, cols[3])?,
            c10: gens_t.float(*line, row, cols[4])?,
        });
    }

    let meta = CsvTable::read(&dir.join("meta.csv"))?;
    let sc = meta.column("slack_node")?;
    let (line, row) = meta
        .rows
        .first()
        .ok_or_else(|| meta.err(2, "missing slack_node row"))?;
    let slack_node = lookup(&meta, *line, meta.int(*line, row, sc)?)?;

    let graph = GridGraph {
        node_ids,
        base_loads: load_col.map(|_| base_loads),
        edges,
        generators,
        slack_node,
    };
    graph.validate()?;
    Ok(graph)
}

/// Writes `graph` in the case directory format read by [`load_case`].
pub fn write_case(graph: &GridGraph, dir: impl AsRef<Path>) -> Result<(), GridError> {
    let dir = dir.as_ref();
    let io = |path: PathBuf| move |source| GridError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_owned()))?;
    let mut nodes = String::from("node_id");
    if graph.base_loads.is_some() {
        nodes.push_str(",base_load_mw");
    }
    nodes.push('\n');
    for (i, id) in graph.node_ids.iter().enumerate() {
        nodes.push_str(&id.to_string());
        if let Some(loads) = &graph.base_loads {
            nodes.push_str(&format!(",{}", loads[i]));
        }
        nodes.push('\n');
    }
    let mut edges = String::from("from,to,susceptance_pu,flow_limit_mw\n");
    for e in &graph.edges {
        let limit = e.flow_limit.map(|l| l.to_string()).unwrap_or_default();
        edges.push_str(&format!(
            "{},{},{},{}\n",
            graph.node_ids[e.from], graph.node_ids[e.to], e.susceptance, limit
        ));
    }
    let mut gens = String::from("node,g_min_mw,g_max_mw,c20,c10\n");
    for g in &graph.generators {
        gens.push_str(&format!(
            "{},{},{},{},{}\n",
            graph.node_ids[g.node], g.g_min, g.g_max, g.c20, g.c10
        ));
    }
    let meta = format!("slack_node\n{}\n", graph.node_ids[graph.slack_node]);
    for (name, body) in [
        ("nodes.csv", nodes),
        ("edges.csv", edges),
        ("generators.csv", gens),
        ("meta.csv", meta),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io(path.clone()))?;
    }
    Ok(())
}

/// Symmetric normalized Laplacian `I - D^-1/2 A D^-1/2`.
pub fn normalized_laplacian(
    graph: &GridGraph,
    weighting: LaplacianWeighting,
) -> Result<DMatrix<f64>, GridError> {
    let a = graph.adjacency(weighting);
    let n = a.nrows();
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(GridError::IsolatedNode(i));
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - inv_sqrt[i] * a[(i, j)] * inv_sqrt[j]
    }))
}

pub const POWER_ITERATION_TOL: f64 = 1e-9;
pub const POWER_ITERATION_CAP: usize = 10_000;

/// Largest-magnitude eigenvalue of a symmetric matrix by power iteration,
/// stopping once the eigen-residual `|Av - rho v|` falls below `tol * |rho|`.
/// A Rayleigh-quotient-change test would stop early when the top two
/// eigenvalues are close, leaving the estimate far less accurate than `tol`.
pub fn max_eigenvalue(matrix: &DMatrix<f64>, tol: f64) -> Result<f64, GridError> {
    max_eigenvalue_capped(matrix, tol, POWER_ITERATION_CAP)
}

pub fn max_eigenvalue_capped(
    matrix: &DMatrix<f64>,
    tol: f64,
    cap: usize,
) -> Result<f64, GridError> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(GridError::NotSquare(n, matrix.ncols()));
    }
    // Ones plus a fixed ramp, so the start is never orthogonal to a
    // constant-vector or alternating eigenvector.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i + 1) as f64 / n as f64));
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..cap {
        let w = matrix * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let residual = (&w - &v * next).norm();
        v = w / norm;
        if residual <= tol * next.abs().max(f64::MIN_POSITIVE) {
            return Ok(next);
        }
        estimate = next;
    }
    Err(GridError::NoConvergence {
        iterations: cap,
        estimate,
    })
}

/// `T_0(L~) .. T_{K-1}(L~)` for `L~ = 2L/lambda_max - I`.
#[derive(Clone, Debug)]
pub struct SpectralBasis {
    pub laplacian: DMatrix<f64>,
    pub lambda_max: f64,
    pub scaled_laplacian: DMatrix<f64>,
    pub cheb_polys: Vec<DMatrix<f64>>,
}

impl SpectralBasis {
    pub fn order(&self) -> usize {
        self.cheb_polys.len()
    }

    pub fn node_count(&self) -> usize {
        self.laplacian.nrows()
    }

    /// Normalized binary Laplacian, power-iteration `lambda_max`, order `k`.
    pub fn for_graph(
        graph: &GridGraph,
        weighting: LaplacianWeighting,
        k: usize,
    ) -> Result<Self, GridError> {
        let l = normalized_laplacian(graph, weighting)?;
        let lambda_max = max_eigenvalue(&l, POWER_ITERATION_TOL)?;
        chebyshev_basis(&l, lambda_max, k)
    }
}

pub fn chebyshev_basis(
    laplacian: &DMatrix<f64>,
    lambda_max: f64,
    k: usize,
) -> Result<SpectralBasis, GridError> {
    if k == 0 {
        return Err(GridError::ZeroOrder);
    }
    if !(lambda_max > 0.0) {
        return Err(GridError::NonPositiveLambdaMax(lambda_max));
    }
    let n = laplacian.nrows();
    if n != laplacian.ncols() {
        return Err(GridError::NotSquare(n, laplacian.ncols()));
    }
    let identity = DMatrix::<f64>::identity(n, n);
    let scaled = laplacian * (2.0 / lambda_max) - &identity;
    let mut polys = vec![identity];
    if k >= 2 {
        polys.push(scaled.clone());
    }
    for i in 2..k {
        let next = (&scaled * &polys[i - 1]) * 2.0 - &polys[i - 2];
        polys.push(next);
    }
    Ok(SpectralBasis {
        laplacian: laplacian.clone(),
        lambda_max,
        scaled_laplacian: scaled,
        cheb_polys: polys,
    })
}

/// Line-flow sensitivities to nodal injection, referenced to the slack node.
#[derive(Clone, Debug, PartialEq)]
pub struct PtdfMatrix {
    /// One row per edge of the graph, one column per node.
    pub values: DMatrix<f64>,
    pub slack_node: usize,
}

impl PtdfMatrix {
    /// Flows (MW) for a nodal injection vector.
    pub fn flows(&self, injection: &[f64]) -> Vec<f64> {
        let p = DVector::from_column_slice(injection);
        (&self.values * p).iter().copied().collect()
    }

    /// Rows restricted to the given lines.
    pub fn rows(&self, lines: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(lines.len(), self.values.ncols(), |r, c| {
            self.values[(lines[r], c)]
        })
    }
}

pub fn ptdf(graph: &GridGraph) -> Result<PtdfMatrix, GridError> {
    let n = graph.node_count();
    let slack = graph.slack_node;
    let b = graph.susceptance_matrix();
    let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let reduced = DMatrix::from_fn(keep.len(), keep.len(), |r, c| b[(keep[r], keep[c])]);
    let inv = if keep.is_empty() {
        DMatrix::zeros(0, 0)
    } else {
        reduced
            .cholesky()
            .ok_or(GridError::SingularSusceptance)?
            .inverse()
    };
    // Node-angle sensitivities with the slack row/column re-inserted as zeros.
    let mut x = DMatrix::zeros(n, n);
    for (r, &i) in keep.iter().enumerate() {
        for (c, &j) in keep.iter().enumerate() {
            x[(i, j)] = inv[(r, c)];
        }
    }
    let values = DMatrix::from_fn(graph.edge_count(), n, |k, i| {
        let e = &graph.edges[k];
        e.susceptance * (x[(e.from, i)] - x[(e.to, i)])
    });
    Ok(PtdfMatrix {
        values,
        slack_node: slack,
    })
}
