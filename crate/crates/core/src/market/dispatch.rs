//! Hourly quadratic bids and the DC optimal power flow whose duals give the
//! energy and congestion components of nodal prices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::qp::{solve_qp, QpOptions, QpProblem, QpStatus};
use crate::grid::{GridGraph, PtdfMatrix};

/// Threshold above which a line dual counts as congestion.
pub const DUAL_TOL: f64 = 1e-6;
pub const C2_FLOOR: f64 = 1e-4;
pub const C1_FLOOR: f64 = 0.0;

/// Per-generator quadratic bid coefficients for one hour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidCurve {
    /// $/MWh^2
    pub c2: Vec<f64>,
    /// $/MWh
    pub c1: Vec<f64>,
}

impl BidCurve {
    /// Time-dependent bids for every generator given the hour's system load.
    pub fn for_hour<R: Rng + ?Sized>(
        graph: &GridGraph,
        total_load: f64,
        mut noise: Option<&mut R>,
    ) -> Self {
        let (c2, c1) = graph
            .generators
            .iter()
            .map(|g| bid_coefficients(total_load, g.c20, g.c10, noise.as_deref_mut()))
            .unzip();
        BidCurve { c2, c1 }
    }

    pub fn marginal_cost(&self, gen: usize, output: f64) -> f64 {
        2.0 * self.c2[gen] * output + self.c1[gen]
    }
}

/// `c2 = (D/1000) c20 + 0.001 N(0,1)`, `c1 = (0.5 + D/50000) c10 + 0.5 N(0,1)`,
/// floored at [`C2_FLOOR`] and [`C1_FLOOR`].
pub fn bid_coefficients<R: Rng + ?Sized>(
    total_load: f64,
    c20: f64,
    c10: f64,
    noise: Option<&mut R>,
) -> (f64, f64) {
    let (e2, e1): (f64, f64) = match noise {
        Some(rng) => (rng.sample(StandardNormal), rng.sample(StandardNormal)),
        None => (0.0, 0.0),
    };
    let c2 = total_load / 1000.0 * c20 + 0.001 * e2;
    let c1 = (0.5 + total_load / 50000.0) * c10 + 0.5 * e1;
    (c2.max(C2_FLOOR), c1.max(C1_FLOOR))
}

/// Monitored lines and their MW limits, parallel vectors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LineLimits {
    pub lines: Vec<usize>,
    pub limits: Vec<f64>,
}

impl LineLimits {
    pub fn none() -> Self {
        Self::default()
    }

    /// The finite limits already present in the case.
    pub fn from_graph(graph: &GridGraph) -> Self {
        let mut out = Self::default();
        for (k, e) in graph.edges.iter().enumerate() {
            if let Some(l) = e.flow_limit {
                out.lines.push(k);
                out.limits.push(l);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// One solved market hour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub hour: usize,
    pub generation: Vec<f64>,
    /// Energy component, $/MWh.
    pub lambda: f64,
    /// Signed line duals, one per monitored line: `mu_k = z_k^- - z_k^+` where
    /// `z^+`/`z^-` are the nonnegative multipliers of the forward and reverse
    /// flow limits. With this sign `lmp = lambda + PTDF' mu`.
    pub mu: Vec<f64>,
    /// Flows on the monitored lines (MW, positive `from -> to`).
    pub flows: Vec<f64>,
    pub s: u8,
    pub lmp: Vec<f64>,
    pub solver_status: SolverStatus,
    pub kkt_max_residual: f64,
    pub diagnostics: Option<String>,
}

impl DispatchRecord {
    pub fn is_optimal(&self) -> bool {
        self.solver_status == SolverStatus::Optimal
    }
}

/// Precomputed network data shared by every hour.
#[derive(Clone, Debug)]
pub struct Network {
    pub graph: GridGraph,
    pub ptdf: PtdfMatrix,
    /// Rows of the PTDF for the monitored lines, `m x N`.
    pub monitored: DMatrix<f64>,
    pub limits: LineLimits,
}

impl Network {
    pub fn new(graph: GridGraph, ptdf: PtdfMatrix, limits: LineLimits) -> Self {
        let monitored = ptdf.rows(&limits.lines);
        Network {
            graph,
            ptdf,
            monitored,
            limits,
        }
    }
}

/// Economic dispatch with DC line limits.
///
/// Minimizes `sum_i c2_i g_i^2 + c1_i g_i` subject to power balance,
/// generator bounds and `|PTDF (A g - d)| <= limit` on monitored lines.
pub fn solve_dcopf(net: &Network, hour: usize, loads: &[f64], bids: &BidCurve) -> DispatchRecord {
    let graph = &net.graph;
    let n = graph.node_count();
    let ng = graph.generators.len();
    let m = net.limits.len();
    let total: f64 = loads.iter().sum();
    let gmin: f64 = graph.generators.iter().map(|g| g.g_min).sum();
    let gmax: f64 = graph.generators.iter().map(|g| g.g_max).sum();

    let fail = |status, msg: String| DispatchRecord {
        hour,
        generation: vec![f64::NAN; ng],
        lambda: f64::NAN,
        mu: vec![f64::NAN; m],
        flows: vec![f64::NAN; m],
        s: 0,
        lmp: vec![f64::NAN; n],
        solver_status: status,
        kkt_max_residual: f64::INFINITY,
        diagnostics: Some(msg),
    };
    if total < gmin - 1e-9 || total > gmax + 1e-9 {
        return fail(
            SolverStatus::Infeasible,
            format!("power balance: load {total} MW outside generation range [{gmin}, {gmax}]"),
        );
    }

    let q = DMatrix::from_diagonal(&DVector::from_iterator(ng, bids.c2.iter().map(|c| 2.0 * c)));
    let c = DVector::from_column_slice(&bids.c1);
    let a = DMatrix::from_element(1, ng, 1.0);
    let b = DVector::from_element(1, total);
    // Rows: lower bounds, upper bounds, forward limits, reverse limits.
    let rows = 2 * ng + 2 * m;
    let mut g = DMatrix::zeros(rows, ng);
    let mut h = DVector::zeros(rows);
    for (i, gen) in graph.generators.iter().enumerate() {
        g[(i, i)] = -1.0;
        h[i] = -gen.g_min;
        g[(ng + i, i)] = 1.0;
        h[ng + i] = gen.g_max;
    }
    let d = DVector::from_column_slice(loads);
    let withdrawal = &net.monitored * &d;
    for k in 0..m {
        for (i, gen) in graph.generators.iter().enumerate() {
            let sens = net.monitored[(k, gen.node)];
            g[(2 * ng + k, i)] = sens;
            g[(2 * ng + m + k, i)] = -sens;
        }
        h[2 * ng + k] = net.limits.limits[k] + withdrawal[k];
        h[2 * ng + m + k] = net.limits.limits[k] - withdrawal[k];
    }
    let problem = QpProblem { q, c, a, b, g, h };
    let sol = solve_qp(&problem, &QpOptions::default());
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => {
            let viol = violation_report(&problem, &sol.x);
            return fail(SolverStatus::Infeasible, viol);
        }
        QpStatus::MaxIter => {
            return fail(
                SolverStatus::MaxIter,
                format!("iteration cap reached; residuals {:?}", sol.residuals),
            )
        }
    }

    let lambda = -sol.y[0];
    let mu: Vec<f64> = (0..m)
        .map(|k| sol.z[2 * ng + m + k] - sol.z[2 * ng + k])
        .collect();
    let generation: Vec<f64> = sol.x.iter().copied().collect();
    let mut injection = -d;
    for (i, gen) in graph.generators.iter().enumerate() {
        injection[gen.node] += generation[i];
    }
    let flows: Vec<f64> = (&net.monitored * &injection).iter().copied().collect();
    let lmp: Vec<f64> = (0..n)
        .map(|i| lambda + (0..m).map(|k| net.monitored[(k, i)] * mu[k]).sum::<f64>())
        .collect();
    let s = u8::from(mu.iter().any(|v| v.abs() > DUAL_TOL));
    DispatchRecord {
        hour,
        generation,
        lambda,
        mu,
        flows,
        s,
        lmp,
        solver_status: SolverStatus::Optimal,
        kkt_max_residual: sol.residuals.max(),
        diagnostics: None,
    }
}

fn violation_report(problem: &QpProblem, x: &DVector<f64>) -> String {
    let slack = &problem.h - &problem.g * x;
    let (idx, worst) = slack
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let eq = (&problem.a * x - &problem.b).amax();
    format!("most violated inequality row {idx} by {:.3e}; balance residual {eq:.3e}", -worst)
}
