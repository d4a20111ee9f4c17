//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p lmpcast-cli --test acceptance`. Set
//! `ACCEPTANCE_ONLY=1,5,9` to run a subset while iterating.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lmpcast::eval::MetricReport;
use lmpcast::grid::{load_case, ptdf, Edge, Generator, GridGraph, LaplacianWeighting, SpectralBasis};
use lmpcast::market::{
    generate_dataset, solve_dcopf, synthesize_loads, synthesize_weights, BidCurve, GenConfig, Generated, LineLimits,
    LoadMatrix, MarketDataset, Network,
};
use lmpcast::model::{
    apply_attention, attention_mask, graph_conv, st_conv_block, Bound, Branch, Model, ModelConfig, ModelKind,
};
use lmpcast::tensor::{gradient_check, ChebOperators, GradCheckReport, Tape, Tensor, TensorError, Var};
use lmpcast::train::{
    batch_loss, evaluate_positions, init_model, loss_congest, loss_energy, loss_status, train, windows,
    LrSchedule, TrainConfig,
};

// Desk-scale setup shared by criteria 6 to 8: about four months of training
// hours followed by one month of test hours.
const DESK_HOURS: usize = 24 * 152;
const DESK_TRAIN_FRACTION: f64 = 0.8;
const DESK_CHANNELS: usize = 16;
const DESK_LR: f64 = 1e-3;
const DESK_T_HIST: usize = 4;
const GCN_EPOCHS: usize = 30;
const ASTGCN_EPOCHS: usize = 12;
const MLP_EPOCHS: usize = 20;
const SAMPLED_NODES: [i64; 6] = [21, 49, 52, 76, 85, 101];

fn case(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cases").join(name)
}

type Criterion = Box<dyn FnMut(&mut Desk) -> Verdict>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Lazily built desk dataset and the seed-0 GCN, shared by 6, 7 and 8.
#[derive(Default)]
struct Desk {
    data: Option<MarketDataset>,
    gcn0: Option<Trained>,
}

struct Trained {
    report: MetricReport,
    ids: Vec<i64>,
}

fn desk_data(limit_fraction: f64) -> MarketDataset {
    let graph = load_case(case("ieee118")).expect("ieee118 case");
    let cfg = GenConfig {
        hours: DESK_HOURS,
        train_fraction: DESK_TRAIN_FRACTION,
        congested_lines: 10,
        limit_fraction,
        ..GenConfig::default()
    };
    generate_dataset(&graph, &cfg).expect("desk dataset").data
}

impl Desk {
    fn data(&mut self) -> &MarketDataset {
        self.data.get_or_insert_with(|| desk_data(GenConfig::default().limit_fraction))
    }

    fn gcn0(&mut self) -> &Trained {
        if self.gcn0.is_none() {
            let t = train_desk(self.data(), ModelKind::Gcn, 0, GCN_EPOCHS, &[]);
            self.gcn0 = Some(t);
        }
        self.gcn0.as_ref().unwrap()
    }
}

fn desk_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: DESK_LR,
        lr_schedule: LrSchedule::Cosine,
        channels: DESK_CHANNELS,
        t_hist: DESK_T_HIST,
        seed,
        // only the final model is scored; no test-set model selection
        eval_every: epochs,
        ..TrainConfig::default()
    }
}

/// Trains to the last epoch and scores the final parameters on the test
/// hours every variant can forecast.
fn train_desk(data: &MarketDataset, kind: ModelKind, seed: u64, epochs: usize, mlp_ids: &[i64]) -> Trained {
    let tc = desk_config(seed, epochs);
    let nodes: Vec<usize> = mlp_ids.iter().map(|&id| data.graph.index_of(id).expect("node")).collect();
    let model = init_model(kind, data, &tc, &nodes).expect("init");
    let model = train(model, data, &tc, None).expect("train").model;
    let positions = windows(data, DESK_T_HIST, data.split.test.start, data.split.test.end);
    let (_, report) = evaluate_positions(&model, data, &positions, 64).expect("evaluate");
    let ids = model.config.output_nodes().iter().map(|&i| data.graph.node_ids[i]).collect();
    Trained { report, ids }
}

// ---------------------------------------------------------------- criterion 1

/// PTDF from an LU inverse of the reduced susceptance matrix.
fn oracle_ptdf(g: &GridGraph) -> DMatrix<f64> {
    let n = g.node_count();
    let mut b = DMatrix::<f64>::zeros(n, n);
    for e in &g.edges {
        b[(e.from, e.from)] += e.susceptance;
        b[(e.to, e.to)] += e.susceptance;
        b[(e.from, e.to)] -= e.susceptance;
        b[(e.to, e.from)] -= e.susceptance;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| i != g.slack_node).collect();
    let inv = DMatrix::from_fn(keep.len(), keep.len(), |r, c| b[(keep[r], keep[c])])
        .lu()
        .try_inverse()
        .expect("connected grid");
    let mut x = DMatrix::<f64>::zeros(n, n);
    for (r, &i) in keep.iter().enumerate() {
        for (c, &j) in keep.iter().enumerate() {
            x[(i, j)] = inv[(r, c)];
        }
    }
    DMatrix::from_fn(g.edge_count(), n, |k, i| {
        let e = &g.edges[k];
        e.susceptance * (x[(e.from, i)] - x[(e.to, i)])
    })
}

/// Worst LMP identity and complementary-slackness residuals over all records.
fn decomposition_residuals(gen: &Generated) -> (f64, f64, usize) {
    let data = &gen.data;
    let g = &data.graph;
    let p = oracle_ptdf(g);
    let mon = &data.monitored;
    let (mut worst_lmp, mut worst_cs) = (0.0f64, 0.0f64);
    for r in &gen.records {
        assert!(r.is_optimal(), "hour {} not optimal", r.hour);
        let d = data.loads.row(r.hour);
        let mut inj: Vec<f64> = d.iter().map(|x| -x).collect();
        for (gi, gn) in g.generators.iter().enumerate() {
            inj[gn.node] += r.generation[gi];
        }
        for i in 0..g.node_count() {
            let congestion: f64 = mon.lines.iter().zip(&r.mu).map(|(&k, m)| p[(k, i)] * m).sum();
            worst_lmp = worst_lmp.max((r.lmp[i] - (r.lambda + congestion)).abs());
        }
        for (j, (&k, &limit)) in mon.lines.iter().zip(&mon.limits).enumerate() {
            let flow: f64 = (0..g.node_count()).map(|i| p[(k, i)] * inj[i]).sum();
            assert!(flow.abs() <= limit + 1e-6, "hour {} line {k}: |{flow}| > {limit}", r.hour);
            worst_cs = worst_cs.max((r.mu[j] * (limit - flow.abs())).abs());
        }
        let congested = r.mu.iter().any(|m| m.abs() > 1e-6);
        assert_eq!(r.s == 1, congested, "hour {} flag", r.hour);
    }
    (worst_lmp, worst_cs, gen.records.len())
}

fn c1_decomposition() -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for name in ["toy3", "ieee118"] {
        let graph = load_case(case(name)).expect("case");
        let gen = generate_dataset(&graph, &GenConfig::default()).expect("two-week dataset");
        let (lmp, cs, n) = decomposition_residuals(&gen);
        let congested = gen.records.iter().filter(|r| r.s == 1).count();
        pass &= lmp <= 1e-6 && cs <= 1e-6 && n == 336 && gen.failures.is_empty();
        parts.push(format!("{name}: {n} hours ({congested} congested), max |LMP - (λ + PTDFᵀμ)| {lmp:.1e}, max |μ·slack| {cs:.1e}"));
    }
    verdict(pass, parts.join("; "))
}

// ---------------------------------------------------------------- criterion 2

fn two_bus(limit: f64, second_gen: bool) -> (Network, BidCurve) {
    let mut gens = vec![Generator {
        node: 0,
        g_min: 0.0,
        g_max: 1000.0,
        c20: 0.01,
        c10: 10.0,
    }];
    let mut bids = BidCurve {
        c2: vec![0.01],
        c1: vec![10.0],
    };
    if second_gen {
        gens.push(Generator {
            node: 1,
            g_min: 0.0,
            g_max: 1000.0,
            c20: 0.05,
            c10: 30.0,
        });
        bids.c2.push(0.05);
        bids.c1.push(30.0);
    }
    let edge = Edge {
        from: 0,
        to: 1,
        susceptance: 10.0,
        flow_limit: Some(limit),
    };
    let graph = GridGraph::new(2, vec![edge], gens, 0).expect("2-bus");
    let p = ptdf(&graph).expect("ptdf");
    let limits = LineLimits::from_graph(&graph);
    (Network::new(graph, p, limits), bids)
}

fn c2_two_bus() -> Verdict {
    let (net, bids) = two_bus(150.0, false);
    let free = solve_dcopf(&net, 0, &[0.0, 100.0], &bids);
    // 10 + 2 * 0.01 * 100
    let ok_free = free.is_optimal()
        && (free.lambda - 12.0).abs() <= 1e-6
        && free.lmp.iter().all(|p| (p - 12.0).abs() <= 1e-6)
        && free.s == 0;

    // Hand KKT: the line carries its 60 MW limit, bus 1 serves the other 40.
    // LMP_0 = 10 + 2(0.01)(60) = 11.2, LMP_1 = 30 + 2(0.05)(40) = 34.
    let (net, bids) = two_bus(60.0, true);
    let cong = solve_dcopf(&net, 0, &[0.0, 100.0], &bids);
    let ok_cong = cong.is_optimal()
        && (cong.lmp[0] - 11.2).abs() <= 1e-6
        && (cong.lmp[1] - 34.0).abs() <= 1e-6
        && cong.mu[0].abs() > 1e-6
        && cong.s == 1;
    verdict(
        ok_free && ok_cong,
        format!(
            "uncongested λ = {:.9}, LMP = [{:.9}, {:.9}]; congested LMP = [{:.6}, {:.6}] (hand KKT 11.2, 34), line dual magnitude {:.6}",
            free.lambda,
            free.lmp[0],
            free.lmp[1],
            cong.lmp[0],
            cong.lmp[1],
            cong.mu[0].abs()
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> GridGraph {
    let mut pairs = BTreeSet::new();
    // random spanning tree keeps it connected
    for i in 1..n {
        let j = rng.random_range(0..i);
        pairs.insert((j, i));
    }
    let extra = rng.random_range(0..=n);
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(from, to)| Edge {
            from,
            to,
            susceptance: rng.random_range(1.0..10.0),
            flow_limit: None,
        })
        .collect();
    let gen = Generator {
        node: 0,
        g_min: 0.0,
        g_max: 100.0,
        c20: 0.01,
        c10: 10.0,
    };
    GridGraph::new(n, edges, vec![gen], 0).expect("random graph")
}

fn c3_spectral() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=12);
        let g = random_graph(&mut rng, n);
        let k = rng.random_range(1..=4);
        let (m, cin, cout) = (3, 2, 2);

        // oracle: U g(Λ) Uᵀ with g_k(λ) = T_k(2λ/λ_max - 1) on the eigenvalues
        let mut a = DMatrix::<f64>::zeros(n, n);
        for e in &g.edges {
            a[(e.from, e.to)] = 1.0;
            a[(e.to, e.from)] = 1.0;
        }
        let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
        let lap = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - a[(i, j)] / (deg[i] * deg[j]).sqrt());
        let eig = SymmetricEigen::new(lap);
        let lmax = eig.eigenvalues.max();
        let filters: Vec<DMatrix<f64>> = (0..k)
            .map(|order| {
                let gk: Vec<f64> = eig
                    .eigenvalues
                    .iter()
                    .map(|&l| {
                        let x = 2.0 * l / lmax - 1.0;
                        let (mut t0, mut t1) = (1.0, x);
                        if order == 0 {
                            return 1.0;
                        }
                        for _ in 1..order {
                            (t0, t1) = (t1, 2.0 * x * t1 - t0);
                        }
                        t1
                    })
                    .collect();
                let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(gk));
                &eig.eigenvectors * d * eig.eigenvectors.transpose()
            })
            .collect();

        let x: Vec<f64> = (0..n * m * cin).map(|_| rng.random_range(-1.0..1.0)).collect();
        let theta: Vec<f64> = (0..k * cin * cout).map(|_| rng.random_range(-1.0..1.0)).collect();

        let basis = SpectralBasis::for_graph(&g, LaplacianWeighting::Binary, k).expect("basis");
        let ops = Arc::new(ChebOperators::new(&basis.cheb_polys));
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(vec![n, m, cin], x.clone()).unwrap());
        let tv = tape.leaf(Tensor::new(vec![k, cin, cout], theta.clone()).unwrap());
        let y = tape.cheb_conv(xv, tv, &ops).expect("cheb_conv");
        let y = tape.value(y).data().to_vec();

        for mi in 0..m {
            for co in 0..cout {
                for i in 0..n {
                    let mut want = 0.0;
                    for (order, f) in filters.iter().enumerate() {
                        for ci in 0..cin {
                            let th = theta[(order * cin + ci) * cout + co];
                            let fx: f64 = (0..n).map(|j| f[(i, j)] * x[(j * m + mi) * cin + ci]).sum();
                            want += th * fx;
                        }
                    }
                    worst = worst.max((y[(i * m + mi) * cout + co] - want).abs());
                }
            }
        }
    }
    verdict(worst <= 1e-8, format!("50 random graphs (N ≤ 12, K ≤ 4), max |Δ| {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 4

type Scalar<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + 'a;

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `sum(w ∘ y)` for a fixed pseudo-random `w`: every output coordinate
/// contributes with its own weight.
fn contract(t: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, t.shape(y), 1.0);
    let w = t.leaf(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn model_err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid {
        op: "model",
        msg: e.to_string(),
    }
}

fn toy6_basis(k: usize) -> SpectralBasis {
    let ring = (0..6).map(|i| (i, (i + 1) % 6)).chain([(0, 3), (1, 4)]);
    let edges = ring
        .map(|(from, to)| Edge {
            from,
            to,
            susceptance: 5.0,
            flow_limit: None,
        })
        .collect();
    let gen = Generator {
        node: 0,
        g_min: 0.0,
        g_max: 100.0,
        c20: 0.01,
        c10: 10.0,
    };
    let g = GridGraph::new(6, edges, vec![gen], 0).unwrap();
    SpectralBasis::for_graph(&g, LaplacianWeighting::Binary, k).unwrap()
}

fn toy6_model(kind: ModelKind, rng: &mut ChaCha8Rng) -> Model {
    let mut c = ModelConfig::new(kind, 6);
    c.t_hist = if kind == ModelKind::Gcn { 1 } else { 4 };
    c.channels = 3;
    c.k = 3;
    c.mlp_hidden_layers = 2;
    c.mlp_width = 5;
    c.mlp_nodes = vec![1, 4];
    let basis = (kind != ModelKind::Mlp).then(|| toy6_basis(3));
    let mut m = Model::new(c, basis).unwrap();
    // attention biases and V start at zero; randomize everything
    for t in m.params.values_mut() {
        let shape = t.shape().to_vec();
        *t = random_tensor(rng, &shape, 0.6);
    }
    m
}

fn c4_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut results: Vec<(String, GradCheckReport)> = Vec::new();
    let mut check = |name: &str, inputs: Vec<Tensor>, f: &Scalar<'_>| {
        let r = gradient_check(&inputs, f, GRAD_EPS).unwrap_or_else(|e| panic!("{name}: {e}"));
        results.push((name.to_string(), r));
    };
    let (b, n, t, c) = (2, 6, 4, 3);
    let ops = Arc::new(ChebOperators::new(&toy6_basis(3).cheb_polys));

    let x = random_tensor(&mut rng, &[b, n, t], 1.0);
    let att = |rng: &mut ChaCha8Rng, rows: usize, feat: usize| {
        vec![
            random_tensor(rng, &[feat, 1], 0.5),
            random_tensor(rng, &[feat, 1], 0.5),
            random_tensor(rng, &[rows, rows], 0.5),
            random_tensor(rng, &[rows, rows], 1.0),
        ]
    };
    let mut inputs = vec![x.clone()];
    inputs.extend(att(&mut rng, n, t));
    check("spatial attention", inputs, &|tp, v| {
        let m = attention_mask(tp, v[0], v[1], v[2], v[3], v[4])?;
        contract(tp, m, 1)
    });
    let mut inputs = vec![x.clone()];
    inputs.extend(att(&mut rng, t, n));
    check("temporal attention", inputs, &|tp, v| {
        let xt = tp.transpose(v[0])?;
        let m = attention_mask(tp, xt, v[1], v[2], v[3], v[4])?;
        contract(tp, m, 2)
    });
    let inputs = vec![
        x.clone(),
        random_tensor(&mut rng, &[b, t, t], 1.0),
        random_tensor(&mut rng, &[b, n, n], 1.0),
    ];
    check("apply attention", inputs, &|tp, v| {
        let y = apply_attention(tp, v[0], v[1], v[2])?;
        contract(tp, y, 3)
    });
    let inputs = vec![
        random_tensor(&mut rng, &[n, b * t, 2], 1.0),
        random_tensor(&mut rng, &[3, 2, c], 1.0),
        random_tensor(&mut rng, &[c], 0.5),
    ];
    check("graph conv", inputs, &|tp, v| {
        let y = graph_conv(tp, v[0], v[1], Some(v[2]), &ops)?;
        contract(tp, y, 4)
    });
    let inputs = vec![
        random_tensor(&mut rng, &[n, b * t, 2], 1.0),
        random_tensor(&mut rng, &[3, 2, c], 1.0),
        random_tensor(&mut rng, &[c], 0.5),
        random_tensor(&mut rng, &[3, c, c], 1.0),
        random_tensor(&mut rng, &[c], 0.5),
    ];
    check("st-conv block", inputs, &|tp, v| {
        let y = st_conv_block(tp, v[0], v[1], v[2], v[3], v[4], &ops, t)?;
        contract(tp, y, 5)
    });
    let inputs = vec![
        random_tensor(&mut rng, &[n * b, t * c], 1.0),
        random_tensor(&mut rng, &[t * c, 16], 1.0),
        random_tensor(&mut rng, &[16], 1.0),
    ];
    check("fully connected", inputs, &|tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        let y = tp.add(y, v[2])?;
        contract(tp, y, 6)
    });
    let inputs = vec![random_tensor(&mut rng, &[b, n], 2.0), random_tensor(&mut rng, &[b, n], 2.0)];
    check("energy + congest losses", inputs, &|tp, v| {
        let e = loss_energy(tp, v[0], v[1])?;
        let c = loss_congest(tp, v[0], v[1])?;
        let s = tp.add(e, c)?;
        Ok(tp.sum(s))
    });
    let labels: Vec<usize> = (0..b * n).map(|i| i % 2).collect();
    check("status loss", vec![random_tensor(&mut rng, &[b * n, 2], 3.0)], &|tp, v| {
        loss_status(tp, v[0], &labels)
    });

    for kind in [ModelKind::Astgcn, ModelKind::Gcn, ModelKind::Mlp] {
        let model = toy6_model(kind, &mut rng);
        let x = random_tensor(&mut rng, &[b, n, model.config.t_hist], 1.0);
        let names: Vec<String> = model.params.keys().cloned().collect();
        // the MLP gathers its nodes from the input values; data, not a parameter
        let with_x = kind != ModelKind::Mlp;
        let offset = usize::from(with_x);
        for branch in Branch::ALL {
            let mut inputs = if with_x { vec![x.clone()] } else { Vec::new() };
            inputs.extend(model.params.values().cloned());
            let xx = x.clone();
            check(&format!("{kind} {} branch", branch.name()), inputs, &|tp, v| {
                let xv = if with_x { v[0] } else { tp.leaf(xx.clone()) };
                let p: Bound = names.iter().cloned().zip(v[offset..].iter().copied()).collect();
                let y = model.branch_forward(tp, &p, branch, xv).map_err(model_err)?;
                contract(tp, y, 7)
            });
        }
    }

    // whole objective of a model on a toy batch
    let model = toy6_model(ModelKind::Astgcn, &mut rng);
    let names: Vec<String> = model.params.keys().cloned().collect();
    let lambda = random_tensor(&mut rng, &[b, n], 2.0);
    let mu = random_tensor(&mut rng, &[b, n], 1.0);
    let batch = lmpcast::train::Batch {
        input: x.clone(),
        lambda,
        mu,
        s: labels.clone(),
    };
    // Roundoff in the summed objective dominates central differences below
    // eps 1e-5 (error grows 10x per decade of eps), so this one uses 1e-5.
    let inputs: Vec<Tensor> = model.params.values().cloned().collect();
    let r = gradient_check(
        &inputs,
        |tp, v| {
            let p: Bound = names.iter().cloned().zip(v.iter().copied()).collect();
            let (total, _) = batch_loss(&model, tp, &p, &batch, Default::default()).map_err(model_err)?;
            Ok(total)
        },
        1e-5,
    )
    .expect("total loss");
    results.push(("astgcn total loss (eps 1e-5)".into(), r));

    let (worst_name, worst) = results
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .map(|(n, r)| (n.clone(), r.max_rel_error))
        .unwrap();
    let checked: usize = results.iter().map(|(_, r)| r.checked).sum();
    let skipped: usize = results.iter().map(|(_, r)| r.skipped).sum();
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, r)| !r.passes(GRAD_TOL))
        .map(|(n, r)| format!("{n} at {:?} ({:.2e})", r.worst, r.max_rel_error))
        .collect();
    verdict(
        failing.is_empty(),
        format!(
            "{} checks, {checked} coordinates ({skipped} kinks skipped), worst relative error {worst:.2e} ({worst_name}){}",
            results.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failing.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn c5_masks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut negative, mut rows) = (0.0f64, 0usize, 0usize);
    for _ in 0..1000 {
        let (b, n, t) = (rng.random_range(1..=3), rng.random_range(1..=12), rng.random_range(1..=24));
        let scale = 10f64.powf(rng.random_range(-1.0..1.5));
        let x = random_tensor(&mut rng, &[b, n, t], scale);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let xt = tape.transpose(xv).unwrap();
        for (input, r, f) in [(xv, n, t), (xt, t, n)] {
            let w1 = tape.leaf(random_tensor(&mut rng, &[f, 1], 1.0));
            let w2 = tape.leaf(random_tensor(&mut rng, &[f, 1], 1.0));
            let bb = tape.leaf(random_tensor(&mut rng, &[r, r], 2.0));
            let v = tape.leaf(random_tensor(&mut rng, &[r, r], 5.0));
            let m = attention_mask(&mut tape, input, w1, w2, bb, v).unwrap();
            for row in tape.value(m).data().chunks(r) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                negative += row.iter().filter(|&&p| p < 0.0).count();
                rows += 1;
            }
        }
    }
    verdict(
        worst <= 1e-12 && negative == 0,
        format!("1000 random inputs, {rows} spatial and temporal rows, max |row sum - 1| {worst:.2e}, {negative} negative entries"),
    )
}

// ---------------------------------------------------------------- criteria 6-8

fn c6_desk_accuracy(desk: &mut Desk) -> Verdict {
    let congested = {
        let d = desk.data();
        let test = windows(d, DESK_T_HIST, d.split.test.start, d.split.test.end);
        100.0 * test.iter().filter(|&&p| d.s[p] == 1).count() as f64 / test.len() as f64
    };
    let r = &desk.gcn0().report;
    verdict(
        r.mape <= 5.0 && r.s_accuracy >= 85.0,
        format!(
            "GCN after {GCN_EPOCHS} epochs: test MAPE {:.3}% (≤ 5%), flag accuracy {:.2}% (≥ 85%); MAE {:.3}, RMSE {:.3} $/MWh; {congested:.1}% of test hours congested at the default line limits, so always predicting congestion scores {congested:.1}%",
            r.mape, r.s_accuracy, r.mae, r.rmse
        ),
    )
}

/// Flag accuracy where congestion is intermittent. Reported, not gated.
fn info_intermittent_congestion() -> String {
    let d = desk_data(1.1);
    let test = windows(&d, DESK_T_HIST, d.split.test.start, d.split.test.end);
    let share = 100.0 * test.iter().filter(|&&p| d.s[p] == 1).count() as f64 / test.len() as f64;
    let r = train_desk(&d, ModelKind::Gcn, 0, GCN_EPOCHS, &[]).report;
    format!(
        "limit fraction 1.1: {share:.1}% of test hours congested (always-uncongested scores {:.1}%), GCN flag accuracy {:.2}%, MAPE {:.3}%",
        100.0 - share,
        r.s_accuracy,
        r.mape
    )
}

fn c7_astgcn_vs_gcn(desk: &mut Desk) -> Verdict {
    let mut wins = 0;
    let mut runs = Vec::new();
    for seed in 0..3u64 {
        let gcn = if seed == 0 {
            desk.gcn0().report.rmse
        } else {
            train_desk(desk.data(), ModelKind::Gcn, seed, GCN_EPOCHS, &[]).report.rmse
        };
        let ast = train_desk(desk.data(), ModelKind::Astgcn, seed, ASTGCN_EPOCHS, &[]).report.rmse;
        wins += usize::from(ast <= gcn);
        runs.push(format!("seed {seed}: {ast:.3} vs {gcn:.3}"));
    }
    verdict(
        wins >= 2,
        format!(
            "ASTGCN ({ASTGCN_EPOCHS} epochs, T = {DESK_T_HIST}) vs GCN ({GCN_EPOCHS} epochs) test RMSE: {}; ASTGCN ≤ GCN in {wins}/3",
            runs.join(", ")
        ),
    )
}

fn c8_gcn_vs_mlp(desk: &mut Desk) -> Verdict {
    let mlp = train_desk(desk.data(), ModelKind::Mlp, 0, MLP_EPOCHS, &SAMPLED_NODES);
    let gcn = desk.gcn0();
    let mut wins = 0;
    let mut rows = Vec::new();
    for (j, id) in SAMPLED_NODES.iter().enumerate() {
        let gi = gcn.ids.iter().position(|x| x == id).expect("gcn forecasts every node");
        assert_eq!(mlp.ids[j], *id);
        let (g, m) = (gcn.report.per_node[gi].mae, mlp.report.per_node[j].mae);
        wins += usize::from(g < m);
        rows.push(format!("{id}: {g:.3}/{m:.3}"));
    }
    verdict(
        wins >= 4,
        format!(
            "per-node test MAE GCN/MLP ({MLP_EPOCHS} MLP epochs): {}; GCN better on {wins}/6",
            rows.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn run_cli(cwd: &Path, args: &[&str], threads: Option<&str>) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lmpcast"));
    cmd.args(args)
        .current_dir(cwd)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env("RUST_LOG", "warn");
    if let Some(t) = threads {
        cmd.env("LMPCAST_THREADS", t);
    }
    let out = cmd.output().expect("lmpcast runs");
    assert!(
        out.status.success(),
        "lmpcast {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c9_determinism() -> Verdict {
    let case = case("ieee118");
    let case = case.to_str().unwrap();
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for (i, dir) in runs.iter().enumerate() {
        // the second run also caps the solver pool at one thread
        let threads = (i == 1).then_some("1");
        let cwd = dir.path();
        run_cli(
            cwd,
            &["gen-data", "--case", case, "--hours", "120", "--seed", "9", "--out", "data"],
            threads,
        );
        run_cli(
            cwd,
            &["train", "--data", "data", "--model", "gcn", "--epochs", "2", "--channels", "4", "--lr", "0.001", "--seed", "9", "--out", "gcn"],
            threads,
        );
        run_cli(
            cwd,
            &[
                "train", "--data", "data", "--model", "astgcn", "--epochs", "1", "--t-hist", "3", "--channels", "4",
                "--seed", "9", "--out", "astgcn",
            ],
            threads,
        );
    }
    let (a, b) = (tree(runs[0].path()), tree(runs[1].path()));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let bytes: usize = a.iter().map(|(_, d)| d.len()).sum();
    verdict(
        a.len() == b.len() && differing.is_empty() && names.iter().any(|n| n.ends_with("final.ckpt")),
        format!(
            "gen-data + train (gcn, astgcn) twice: {} files, {bytes} bytes, {} differing{}",
            a.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- criterion 10

fn c10_dataset_stats() -> Verdict {
    let mut worst = 0.0f64;
    for (seed, conc) in [(0u64, 1.0), (1, 0.1), (2, 5.0), (3, 0.02)] {
        let m = synthesize_weights(92, 26, conc, seed).unwrap();
        for row in &m.weights {
            assert!(row.iter().all(|&w| w >= 0.0));
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let mixer = synthesize_weights(92, 26, 1.0, 7).unwrap();
    assert_eq!(mixer.noise_scale, 0.0);
    let ones = LoadMatrix::new(48, 26, vec![1.0; 48 * 26]).unwrap();
    let sources: Vec<usize> = (0..26).map(|j| j * 118 / 26).collect();
    let loads = synthesize_loads(&mixer, &ones, &sources, 118, 7).unwrap();
    let not_one = loads.values().iter().filter(|&&v| v != 1.0).count();
    verdict(
        worst <= 1e-12 && not_one == 0,
        format!(
            "Dirichlet 92 x 26 rows over 4 seeds/concentrations: max |row sum - 1| {worst:.1e}; noise-free unit sources: {} of {} loads differ from 1",
            not_one,
            loads.values().len()
        ),
    )
}

// ----------------------------------------------------------------------------

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|s| s.contains(&id));
    let mut desk = Desk::default();

    let criteria: Vec<(u32, &str, Criterion)> = vec![
        (1, "LMP decomposition oracle", Box::new(|_| c1_decomposition())),
        (2, "analytic KKT check", Box::new(|_| c2_two_bus())),
        (3, "spectral equivalence", Box::new(|_| c3_spectral())),
        (4, "gradient suite", Box::new(|_| c4_gradients())),
        (5, "attention normalization", Box::new(|_| c5_masks())),
        (6, "desk-scale accuracy", Box::new(c6_desk_accuracy)),
        (7, "ASTGCN vs GCN direction", Box::new(c7_astgcn_vs_gcn)),
        (8, "GCN vs per-node MLP direction", Box::new(c8_gcn_vs_mlp)),
        (9, "determinism", Box::new(|_| c9_determinism())),
        (10, "dataset statistics", Box::new(|_| c10_dataset_stats())),
    ];

    let mut failed = Vec::new();
    for (id, name, mut run) in criteria {
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(|| run(&mut desk))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            verdict(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(id);
        }
        if id == 6 && std::env::var_os("ACCEPTANCE_SKIP_INFO").is_none() {
            let start = Instant::now();
            match catch_unwind(info_intermittent_congestion) {
                Ok(s) => println!("     note (not a criterion): {s} [{:.1}s]", start.elapsed().as_secs_f64()),
                Err(_) => println!("     note (not a criterion): intermittent-congestion run panicked"),
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
