mod common;

use common::{load_fixture, random_feeder, random_injections, sweep_solve};
use gridpilot_core::feeder::{build_admittance, Complex64};
use gridpilot_core::powerflow::solve_power_flow;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn newton_matches_sweep_on_random_feeders() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let buses = rng.random_range(2..=8);
        let feeder = random_feeder(buses, &mut rng);
        let y = build_admittance(&feeder).unwrap();
        let inj = random_injections(&feeder, &mut rng);
        let slack = feeder.slack_voltage();
        let newton = solve_power_flow(&feeder, &y, &inj, slack).unwrap();
        let sweep = sweep_solve(&feeder, &inj, slack).expect("sweep converges");
        for (i, (n, s)) in newton.voltages().iter().zip(&sweep).enumerate() {
            let err = (n - s).norm();
            worst = worst.max(err);
            assert!(err < 1e-7, "case {case}, node-phase {i}: newton {n} vs sweep {s}");
        }
    }
    assert!(worst < 1e-7);
}

#[test]
fn admittance_reproduces_branch_currents() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let buses = rng.random_range(2..=8);
        let feeder = random_feeder(buses, &mut rng);
        let y = build_admittance(&feeder).unwrap();
        let n = y.dim();
        let v: Vec<Complex64> = (0..n)
            .map(|_| Complex64::from_polar(rng.random_range(0.9..1.1), rng.random_range(-3.0..3.0)))
            .collect();
        let mut expected = vec![Complex64::new(0.0, 0.0); n];
        for line in 0..feeder.lines().len() {
            let current = y.branch_current(line, &v);
            let (from, to) = &y.line_nodes[line];
            for (k, c) in current.iter().enumerate() {
                expected[from[k]] += c;
                expected[to[k]] -= c;
            }
        }
        let got = y.injection_currents(&v);
        for i in 0..n {
            assert!((got[i] - expected[i]).norm() < 1e-9);
            for j in 0..n {
                assert_eq!(y.get(i, j), y.get(j, i), "Y must be symmetric");
            }
        }
    }
}

#[test]
fn feeder_head_power_covers_demand_and_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let buses = rng.random_range(2..=8);
        let feeder = random_feeder(buses, &mut rng);
        let y = build_admittance(&feeder).unwrap();
        let inj = random_injections(&feeder, &mut rng);
        let sol = solve_power_flow(&feeder, &y, &inj, feeder.slack_voltage()).unwrap();
        let v = sol.voltages();
        let demand = Complex64::new(inj.p.iter().sum(), inj.q.iter().sum());
        let losses: Complex64 = (0..feeder.lines().len()).map(|l| y.branch_loss(l, &v)).sum();
        let head = Complex64::new(sol.feeder_head_p, sol.feeder_head_q);
        assert!(
            (head - demand - losses).norm() < 1e-7,
            "head {head} demand {demand} losses {losses}"
        );
        assert!(losses.re >= -1e-12);
    }
}

#[test]
fn fixtures_agree_with_sweep() {
    for name in ["2bus.json", "4bus.json", "synth34.json"] {
        let feeder = load_fixture(name);
        let y = build_admittance(&feeder).unwrap();
        let p_load: Vec<f64> = feeder.loads().iter().map(|l| l.p_nominal).collect();
        let q_load: Vec<f64> = feeder.loads().iter().map(|l| l.q_nominal).collect();
        let p_pv: Vec<f64> = feeder.pv_units().iter().map(|u| 0.5 * u.p_rated).collect();
        let q_pv = vec![0.0; p_pv.len()];
        let inj = gridpilot_core::powerflow::InjectionSet::from_parts(&feeder, &p_load, &q_load, &p_pv, &q_pv).unwrap();
        let sol = solve_power_flow(&feeder, &y, &inj, feeder.slack_voltage()).unwrap();
        let sweep = sweep_solve(&feeder, &inj, feeder.slack_voltage()).unwrap();
        for (n, s) in sol.voltages().iter().zip(&sweep) {
            assert!((n - s).norm() < 1e-7, "{name}");
        }
    }
}
