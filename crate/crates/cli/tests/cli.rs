use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lmpcast::market::read_dataset;
use lmpcast::model::{save_checkpoint, ModelKind};
use lmpcast::train::{init_model, TrainConfig};

fn toy_case() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cases/toy3")
}

fn lmpcast(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmpcast"))
        .args(args)
        .current_dir(cwd)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[track_caller]
fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_toy(cwd: &Path, out: &str, extra: &[&str]) -> Output {
    let case = toy_case();
    let mut args = vec!["gen-data", "--case", case.to_str().unwrap(), "--out", out];
    args.extend_from_slice(extra);
    lmpcast(cwd, &args)
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn gen_data_span_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(&gen_toy(dir.path(), "d", &["--years", "0.05", "--seed", "3"]));
    let d = dir.path().join("d");
    // 0.05 * 8760 = 438 hours
    assert_eq!(data_rows(&d.join("loads.csv")), 438);
    assert_eq!(data_rows(&d.join("lmp.csv")), 438);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["config"]["hours"], 438);
    assert_eq!(manifest["seeds"]["seed"], 3);
    assert_eq!(manifest["created_unix"], 1700000000u64);
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|f| f["path"] == "d/lmp.csv"));
}

#[test]
fn no_congested_lines_means_no_flags() {
    let dir = tempfile::tempdir().unwrap();
    ok(&gen_toy(dir.path(), "d", &["--hours", "48", "--congested-lines", "0"]));
    let s = fs::read_to_string(dir.path().join("d/s.csv")).unwrap();
    assert!(s.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        ok(&gen_toy(d.path(), "d", &["--hours", "72", "--seed", "11"]));
    }
    let ma = fs::read(a.path().join("d/manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.path().join("d/manifest.json")).unwrap());
    assert_eq!(
        fs::read(a.path().join("d/lmp.csv")).unwrap(),
        fs::read(b.path().join("d/lmp.csv")).unwrap()
    );
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    ok(&gen_toy(dir.path(), "d", &["--hours", "24"]));
    let again = gen_toy(dir.path(), "d", &["--hours", "24"]);
    assert_eq!(again.status.code(), Some(2));
    ok(&gen_toy(dir.path(), "d", &["--hours", "24", "--force"]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    assert_eq!(lmpcast(cwd, &["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(gen_toy(cwd, "x", &["--source", "pjm"]).status.code(), Some(1));
    assert_eq!(gen_toy(cwd, "y", &["--train-fraction", "1.5"]).status.code(), Some(2));

    // 3 x 1000 MW against 700 MW of generation
    let mut csv = String::from("hour,z1,z2,z3\n");
    for h in 0..24 {
        csv.push_str(&format!("{h},1000,1000,1000\n"));
    }
    fs::write(cwd.join("big.csv"), csv).unwrap();
    let solver = gen_toy(cwd, "z", &["--hours", "24", "--source", "csv:big.csv"]);
    assert_eq!(solver.status.code(), Some(3), "{}", String::from_utf8_lossy(&solver.stderr));

    ok(&gen_toy(cwd, "d", &["--hours", "48"]));
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--data", "d", "--out", "t", "--epochs", "1"];
        args.extend_from_slice(extra);
        lmpcast(cwd, &args)
    };
    let mlp = train(&["--model", "mlp"]);
    assert_eq!(mlp.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mlp.stderr).contains("--nodes"));
    assert_eq!(train(&["--model", "lstm"]).status.code(), Some(1));
    assert_eq!(train(&["--model", "gcn", "--nodes", "1"]).status.code(), Some(1));
    assert_eq!(train(&["--model", "mlp", "--nodes", "99"]).status.code(), Some(2));
}

#[test]
fn config_file_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fs::write(cwd.join("run.conf"), "# toy run\nhours = 30\nseed = 4\ncongested_lines = 0\n").unwrap();
    ok(&gen_toy(cwd, "a", &["--config", "run.conf"]));
    assert_eq!(data_rows(&cwd.join("a/lmp.csv")), 30);
    ok(&gen_toy(cwd, "b", &["--config", "run.conf", "--hours", "20"]));
    assert_eq!(data_rows(&cwd.join("b/lmp.csv")), 20);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(cwd.join("b/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["seed"], 4);
    fs::write(cwd.join("bad.conf"), "hours = 30\nepochs = 3\n").unwrap();
    assert_eq!(gen_toy(cwd, "c", &["--config", "bad.conf"]).status.code(), Some(2));
}

#[test]
fn train_eval_predict_plot_round() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    ok(&gen_toy(cwd, "d", &["--hours", "96", "--seed", "2"]));
    for (kind, out, extra) in [
        ("gcn", "gcn", vec![]),
        ("astgcn", "ast", vec!["--t-hist", "3"]),
        ("mlp", "mlp", vec!["--nodes", "2,3", "--mlp-layers", "1"]),
    ] {
        let mut args = vec![
            "train", "--data", "d", "--model", kind, "--epochs", "2", "--channels", "4", "--mlp-width", "8", "--out",
            out,
        ];
        args.extend(extra);
        let stdout = ok(&lmpcast(cwd, &args));
        assert!(stdout.contains("best epoch"));
        for f in ["history.csv", "best.ckpt", "final.ckpt", "manifest.json"] {
            assert!(cwd.join(out).join(f).exists(), "{out}/{f}");
        }
        assert_eq!(data_rows(&cwd.join(out).join("history.csv")), 2);
    }

    let table = ok(&lmpcast(
        cwd,
        &["eval", "--data", "d", "--ckpt", "gcn/final.ckpt", "--compare", "mlp/final.ckpt", "--out", "e"],
    ));
    assert!(table.contains("RMSE") && table.contains("baseline"));
    let e = cwd.join("e");
    assert_eq!(data_rows(&e.join("metrics.csv")), 2);
    assert_eq!(data_rows(&e.join("per_node.csv")), 3);
    // nodes forecast by both models
    assert_eq!(data_rows(&e.join("comparison.csv")), 2);
    assert_eq!(data_rows(&e.join("per_node_rmse.csv")), 2);

    // last 3 hours of loads -> one row of 3 LMPs for the 3-hour model
    let loads = fs::read_to_string(cwd.join("d/loads.csv")).unwrap();
    let lines: Vec<&str> = loads.lines().collect();
    let window = format!("{}\n{}\n", lines[0], lines[lines.len() - 3..].join("\n"));
    fs::write(cwd.join("window.csv"), window).unwrap();
    ok(&lmpcast(cwd, &["predict", "--ckpt", "ast/final.ckpt", "--loads", "window.csv", "--out", "p.csv"]));
    let pred = fs::read_to_string(cwd.join("p.csv")).unwrap();
    let rows: Vec<&str> = pred.lines().collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], "hour,1,2,3");
    assert_eq!(rows[1].split(',').count(), 4);
    assert!(cwd.join("p.manifest.json").exists());
    let short = lmpcast(cwd, &["predict", "--ckpt", "ast/final.ckpt", "--loads", "d/lambda.csv", "--out", "q.csv"]);
    assert_eq!(short.status.code(), Some(2));

    ok(&lmpcast(cwd, &["export-attention", "--ckpt", "ast/final.ckpt", "--data", "d", "--sample", "80", "--out", "att"]));
    let spatial = lmpcast::eval::read_matrix_csv(&cwd.join("att/mu_spatial.csv")).unwrap();
    for row in spatial.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let no_att = lmpcast(cwd, &["export-attention", "--ckpt", "gcn/final.ckpt", "--data", "d", "--sample", "80", "--out", "g"]);
    assert_eq!(no_att.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_att.stderr).contains("no attention parameters"));

    ok(&lmpcast(cwd, &["plot", "--pred", "e/predictions.csv", "--gt", "d/lmp.csv", "--node", "3", "--out", "pl"]));
    let series = fs::read_to_string(cwd.join("pl/series_node3.csv")).unwrap();
    assert_eq!(series.lines().count() - 1, data_rows(&e.join("predictions.csv")));
    assert!(fs::read_to_string(cwd.join("pl/series_node3.svg")).unwrap().starts_with("<svg"));
    let one = lmpcast(
        cwd,
        &["plot", "--pred", "e/predictions.csv", "--gt", "d/lmp.csv", "--node", "3", "--from", "90", "--to", "91", "--out", "one"],
    );
    ok(&one);
    assert_eq!(data_rows(&cwd.join("one/series_node3.csv")), 1);
}

#[test]
fn eval_of_exact_model_reports_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    // constant loads and bids: every hour clears at the same price
    let mut csv = String::from("hour,z1,z2,z3\n");
    for h in 0..60 {
        csv.push_str(&format!("{h},30,40,50\n"));
    }
    fs::write(cwd.join("flat.csv"), csv).unwrap();
    ok(&gen_toy(
        cwd,
        "d",
        &["--hours", "60", "--source", "csv:flat.csv", "--alpha", "0", "--bid-noise", "false", "--congested-lines", "0"],
    ));
    let data = read_dataset(&cwd.join("d")).unwrap();
    let tc = TrainConfig {
        channels: 2,
        ..TrainConfig::default()
    };
    // all-zero parameters predict the training mean price with no congestion
    let mut model = init_model(ModelKind::Gcn, &data, &tc, &[]).unwrap();
    for t in model.params.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    save_checkpoint(&cwd.join("zero.ckpt"), &model, &data.graph.node_ids, &serde_json::Value::Null).unwrap();
    ok(&lmpcast(cwd, &["eval", "--data", "d", "--ckpt", "zero.ckpt", "--out", "e"]));
    let metrics = fs::read_to_string(cwd.join("e/metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    let mae: f64 = row[2].parse().unwrap();
    let acc: f64 = row[5].parse().unwrap();
    assert!(mae < 1e-9, "{metrics}");
    assert_eq!(acc, 100.0);
}
