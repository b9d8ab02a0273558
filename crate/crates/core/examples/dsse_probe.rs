//! Trains the state estimator on synth34 with overridable hyperparameters
//! and prints held-out metrics.
//!
//! cargo run --release -p gridpilot-core --example dsse_probe -- [lr] [dropout] [epochs] [batch_norm 0|1] [lr_decay] [action_half_range]

use std::time::Instant;

use gridpilot_core::dsse::{build_training_pairs_with, evaluate_dsse, train_dsse, DsseConfig, PairOptions};
use gridpilot_core::feeder::load_feeder;
use gridpilot_core::scenario::{generate_scenarios, split, GenConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).map(|s| s.parse().unwrap()).unwrap_or(d);
    let feeder = load_feeder("feeders/synth34.json")?;
    let set = generate_scenarios(
        &feeder,
        &GenConfig {
            count: 2500,
            ..GenConfig::default()
        },
        11,
    )?;
    let (train, test) = split(&set, 0.8, 12)?;
    let cfg = DsseConfig {
        learning_rate: arg(0, 0.095),
        dropout_rate: arg(1, 0.5),
        epochs: arg(2, 100.0) as usize,
        batch_norm: arg(3, 1.0) != 0.0,
        lr_decay: arg(4, 1.0),
        ..DsseConfig::default()
    };
    let ar: f64 = arg(5, 1.0);
    let cfg = DsseConfig {
        action_range: [-ar, ar],
        ..cfg
    };
    let opts = |seed| PairOptions {
        noise_pct: cfg.noise_pct,
        action_range: cfg.action_range,
        seed,
    };
    let start = Instant::now();
    let tr = build_training_pairs_with(&train, &feeder, &opts(1))?;
    let te = build_training_pairs_with(&test, &feeder, &opts(2))?;
    println!("pairs {} / {} in {:?}", tr.pairs.len(), te.pairs.len(), start.elapsed());
    let start = Instant::now();
    let (model, hist) = train_dsse(&tr.pairs, &feeder, &cfg)?;
    println!(
        "trained in {:?}; loss {:.5} -> {:.5}",
        start.elapsed(),
        hist[0],
        hist.last().unwrap()
    );
    for (e, l) in hist.iter().enumerate().step_by(10) {
        println!("  epoch {e}: {l:.5}");
    }
    println!("train {:?}", evaluate_dsse(&model, &tr.pairs)?);
    println!("test  {:?}", evaluate_dsse(&model, &te.pairs)?);
    Ok(())
}
