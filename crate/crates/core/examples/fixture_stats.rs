//! Prints uncontrolled/fully-absorbing voltage statistics for a feeder.
//!
//! cargo run --release -p gridpilot-core --example fixture_stats -- feeders/synth34.json [count] [seed]

use gridpilot_core::feeder::{build_admittance, load_feeder};
use gridpilot_core::powerflow::solve_power_flow;
use gridpilot_core::scenario::{generate_scenarios, GenConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "feeders/synth34.json".into());
    let count: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(500);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let feeder = load_feeder(&path)?;
    let y = build_admittance(&feeder)?;
    let cfg = GenConfig {
        count,
        ..GenConfig::default()
    };
    let set = generate_scenarios(&feeder, &cfg, seed)?;
    let slack = feeder.slack_voltage();
    let q_rated: Vec<f64> = feeder.pv_units().iter().map(|u| u.q_rated).collect();

    let start = std::time::Instant::now();
    for a in [0.0, -0.25, -0.5, -0.75, -1.0, 1.0] {
        let (mut viol_scen, mut out_pairs, mut vmax, mut vmin) = (0, 0, 0.0f64, 2.0f64);
        let mut iters = 0;
        for s in &set.scenarios {
            let q: Vec<f64> = q_rated.iter().map(|q| a * q).collect();
            let sol = solve_power_flow(&feeder, &y, &s.injections(&feeder, &q)?, slack)?;
            iters = iters.max(sol.iterations);
            if sol.v_mag.iter().any(|&v| v > 1.05) {
                viol_scen += 1;
            }
            out_pairs += sol.v_mag.iter().filter(|&&v| !(0.95..=1.05).contains(&v)).count();
            vmax = vmax.max(sol.max_v());
            vmin = vmin.min(sol.min_v());
        }
        println!(
            "a={a:+.2}: scenarios with V>1.05: {:.1}%  out-of-band pairs: {:.2}%  V in [{vmin:.4}, {vmax:.4}]  max iters {iters}",
            100.0 * viol_scen as f64 / count as f64,
            100.0 * out_pairs as f64 / (count * feeder.node_phase_count()) as f64
        );
    }
    println!("elapsed {:?}", start.elapsed());
    Ok(())
}
