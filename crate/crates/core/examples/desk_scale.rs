//! Generates the desk-scale IEEE-118 dataset and trains one model on it.
//!
//! ```text
//! cargo run --release -p lmpcast --example desk_scale -- gcn 20 [limit-fraction] [seed]
//! ```
//!
//! Prints test metrics after every epoch.

use std::path::Path;
use std::time::Instant;

use lmpcast::grid::load_case;
use lmpcast::market::{generate_dataset, GenConfig};
use lmpcast::model::ModelKind;
use lmpcast::train::{init_model, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let kind: ModelKind = args.get(1).map(String::as_str).unwrap_or("gcn").parse()?;
    let epochs: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let case = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cases/ieee118");
    let graph = load_case(&case)?;
    let cfg = GenConfig {
        hours: 24 * 152,
        train_fraction: 0.8,
        limit_fraction: args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(0.7),
        ..GenConfig::default()
    };
    let t0 = Instant::now();
    let gen = generate_dataset(&graph, &cfg)?;
    let data = gen.data;
    let congested = data.s.iter().filter(|&&s| s == 1).count();
    println!(
        "generated {} hours in {:.1}s, congested {:.1}%, lambda {:.2}..{:.2}",
        data.len(),
        t0.elapsed().as_secs_f64(),
        100.0 * congested as f64 / data.len() as f64,
        data.lambda.iter().cloned().fold(f64::INFINITY, f64::min),
        data.lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let tc = TrainConfig {
        epochs,
        learning_rate: 1e-3,
        lr_schedule: lmpcast::train::LrSchedule::Cosine,
        channels: 16,
        seed: args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(0),
        t_hist: 4,
        eval_every: 1,
        ..TrainConfig::default()
    };
    let nodes: Vec<usize> = [21, 49, 52, 76, 85, 101]
        .iter()
        .map(|id| data.graph.index_of(*id).expect("node"))
        .collect();
    let model = init_model(kind, &data, &tc, &nodes)?;
    println!("{} parameters", model.parameter_count());
    let t1 = Instant::now();
    let out = train(model, &data, &tc, None)?;
    for r in &out.history {
        if let Some(m) = &r.test {
            println!(
                "epoch {:3} loss {:9.3} e {:7.3} c {:7.3} s {:6.4} | mae {:.3} rmse {:.3} mape {:.3}% s {:.2}%",
                r.epoch, r.loss.total, r.loss.energy, r.loss.congest, r.loss.status, m.mae, m.rmse, m.mape, m.s_accuracy
            );
        }
    }
    println!("trained in {:.1}s", t1.elapsed().as_secs_f64());
    Ok(())
}
