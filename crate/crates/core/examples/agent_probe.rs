//! Trains a DDPG agent on a feeder (perfect-state observations) and prints
//! the learning trend and controlled in-band fraction on held-out scenarios.
//!
//! cargo run --release -p gridpilot-core --example agent_probe -- [feeder] [episodes] [seed] [lr] [horizon]

use std::time::Instant;

use gridpilot_core::ddpg::{train, TrainConfig};
use gridpilot_core::env::{EnvConfig, Environment};
use gridpilot_core::feeder::load_feeder;
use gridpilot_core::scenario::{generate_scenarios, split, GenConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().cloned().unwrap_or_else(|| "feeders/synth34.json".into());
    let arg = |i: usize, d: f64| args.get(i).map(|s| s.parse().unwrap()).unwrap_or(d);
    let feeder = load_feeder(&path)?;
    let set = generate_scenarios(
        &feeder,
        &GenConfig {
            count: 1200,
            ..GenConfig::default()
        },
        5,
    )?;
    let (train_set, test_set) = split(&set, 0.8, 6)?;
    let env = Environment::new(
        feeder,
        EnvConfig {
            perfect_state: true,
            ..EnvConfig::default()
        },
        None,
    )?;
    let cfg = TrainConfig {
        episodes: arg(1, 100.0) as usize,
        seed: arg(2, 0.0) as u64,
        actor_lr: arg(3, 1e-3),
        critic_lr: arg(3, 1e-3),
        horizon: arg(4, 20.0) as usize,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (nets, hist) = train(&env, &train_set.scenarios, &cfg)?;
    let mean =
        |s: &[gridpilot_core::ddpg::EpisodeRecord]| s.iter().map(|r| r.cumulative_reward).sum::<f64>() / s.len() as f64;
    let n = hist.len();
    println!(
        "trained {n} episodes in {:?}: first10 {:.3} last10 {:.3}",
        start.elapsed(),
        mean(&hist[..10]),
        mean(&hist[n - 10..])
    );

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut over, mut under) = (0usize, 0usize);
    let (mut pairs, mut inband, mut base_viol, mut dev_b, mut dev_c, mut actions) = (0, 0, 0, 0.0, 0.0, Vec::new());
    for sc in test_set.scenarios.iter().take(200) {
        let base = env.reset(sc, &mut rng)?;
        let a = nets.act(&base.state, 0.0, &mut rng)?;
        let out = env.step(sc, &a, &mut rng)?;
        pairs += out.info.v_true.len();
        inband += out.info.v_true.len() - out.info.violations;
        base_viol += (base.info.max_v > 1.05) as usize;
        dev_b += base.info.deviation;
        dev_c += out.info.deviation;
        actions.push(a.coefficients[0]);
        over += out.info.v_true.iter().filter(|v| **v > 1.05).count();
        under += out.info.v_true.iter().filter(|v| **v < 0.95).count();
    }
    println!("over {over} under {under}");
    actions.sort_by(f64::total_cmp);
    println!(
        "test: baseline over-voltage scenarios {base_viol}/200, controlled in-band {:.3}%, deviation {:.3} -> {:.3}, action range [{:.3}, {:.3}] median {:.3}",
        100.0 * inband as f64 / pairs as f64, dev_b / 200.0, dev_c / 200.0, actions[0], actions[actions.len() - 1], actions[actions.len() / 2]
    );
    Ok(())
}
