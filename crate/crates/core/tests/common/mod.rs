#![allow(dead_code)]

pub mod gradcheck;

use std::path::PathBuf;

use gridpilot_core::feeder::{
    BusData, Complex64, ComplexValue, Feeder, FeederData, LineData, LoadData, Phase, PhaseSet, PvData,
};
use gridpilot_core::powerflow::InjectionSet;
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../feeders")
        .join(name)
}

pub fn load_fixture(name: &str) -> Feeder {
    gridpilot_core::feeder::load_feeder(fixture(name)).expect("fixture loads")
}

fn random_subset<R: Rng>(parent: PhaseSet, rng: &mut R) -> PhaseSet {
    let phases: Vec<Phase> = parent.iter().collect();
    loop {
        let mut set = PhaseSet::default();
        for &p in &phases {
            if rng.random_bool(0.6) {
                set.insert(p);
            }
        }
        if !set.is_empty() {
            return set;
        }
    }
}

/// Random radial feeder with `buses` buses on a 1 kV / 1000 kVA base, so
/// ohms and kW/1000 equal per-unit values. Source bus is three-phase.
pub fn random_feeder<R: Rng>(buses: usize, rng: &mut R) -> Feeder {
    let mut phase_sets = vec![PhaseSet::default()];
    for p in Phase::ALL {
        phase_sets[0].insert(p);
    }
    let mut bus_data = vec![BusData {
        id: "b0".into(),
        phases: phase_sets[0],
    }];
    let mut lines = Vec::new();
    let mut loads = Vec::new();
    let mut pv_units = Vec::new();
    for i in 1..buses {
        let parent = rng.random_range(0..i);
        let phases = random_subset(phase_sets[parent], rng);
        phase_sets.push(phases);
        bus_data.push(BusData {
            id: format!("b{i}"),
            phases,
        });
        let k = phases.len();
        let self_z: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.random_range(0.01..0.06), rng.random_range(0.02..0.12)))
            .collect();
        let mut z = vec![vec![ComplexValue { re: 0.0, im: 0.0 }; k]; k];
        for a in 0..k {
            z[a][a] = ComplexValue {
                re: self_z[a].0,
                im: self_z[a].1,
            };
            for b in 0..a {
                let m = ComplexValue {
                    re: 0.2 * self_z[a].0.min(self_z[b].0),
                    im: 0.3 * self_z[a].1.min(self_z[b].1),
                };
                z[a][b] = m;
                z[b][a] = m;
            }
        }
        lines.push(LineData {
            id: None,
            from_bus: format!("b{parent}"),
            to_bus: format!("b{i}"),
            impedance: z,
        });
        for phase in phases.iter() {
            if rng.random_bool(0.7) {
                let p = rng.random_range(0.0..0.25);
                loads.push(LoadData {
                    bus_id: format!("b{i}"),
                    phase,
                    p_kw: 1000.0 * p,
                    q_kvar: 1000.0 * p * rng.random_range(0.0..0.5),
                });
            }
            if rng.random_bool(0.25) {
                let p_rated = rng.random_range(0.05..0.3);
                pv_units.push(PvData {
                    bus_id: format!("b{i}"),
                    phase,
                    s_rated_kva: 1000.0 * p_rated * 1.2,
                    p_rated_kw: 1000.0 * p_rated,
                    q_rated_kvar: None,
                });
            }
        }
    }
    let data = FeederData {
        source_bus_id: "b0".into(),
        base_voltage_kv: 1.0,
        base_power_kva: 1000.0,
        source_voltage_pu: rng.random_range(0.98..1.04),
        buses: bus_data,
        lines,
        loads,
        pv_units,
    };
    Feeder::from_data(data).expect("random feeder is valid")
}

/// Nominal demand with PV at a random fraction of its rating and random
/// reactive setpoints.
pub fn random_injections<R: Rng>(feeder: &Feeder, rng: &mut R) -> InjectionSet {
    let p_load: Vec<f64> = feeder.loads().iter().map(|l| l.p_nominal).collect();
    let q_load: Vec<f64> = feeder.loads().iter().map(|l| l.q_nominal).collect();
    let p_pv: Vec<f64> = feeder
        .pv_units()
        .iter()
        .map(|u| u.p_rated * rng.random_range(0.0..1.0))
        .collect();
    let q_pv: Vec<f64> = feeder
        .pv_units()
        .iter()
        .map(|u| u.q_rated * rng.random_range(-1.0..1.0))
        .collect();
    InjectionSet::from_parts(feeder, &p_load, &q_load, &p_pv, &q_pv).unwrap()
}

/// Backward/forward sweep with constant-power loads. Independent of the
/// admittance matrix: uses only line impedances and the tree structure.
pub fn sweep_solve(feeder: &Feeder, inj: &InjectionSet, slack: [Complex64; 3]) -> Option<Vec<Complex64>> {
    let index = feeder.node_index();
    let topo = feeder.topology();
    let buses = feeder.buses();
    let node = |bus: usize, phase: Phase| index.get(bus, phase).unwrap();
    let mut v = vec![Complex64::new(0.0, 0.0); index.len()];
    for (i, np) in index.entries().iter().enumerate() {
        v[i] = slack[np.phase.index()];
    }
    for _ in 0..500 {
        let mut branch = vec![[Complex64::new(0.0, 0.0); 3]; buses.len()];
        for &bus in topo.order.iter().rev() {
            for phase in buses[bus].phases.iter() {
                let i = node(bus, phase);
                let s = Complex64::new(inj.p[i], inj.q[i]);
                branch[bus][phase.index()] += (s / v[i]).conj();
            }
            if let Some(parent) = topo.parent[bus] {
                let current = branch[bus];
                for phase in buses[bus].phases.iter() {
                    branch[parent][phase.index()] += current[phase.index()];
                }
            }
        }
        let mut change: f64 = 0.0;
        for &bus in &topo.order {
            let Some(line) = topo.parent_line[bus] else {
                continue;
            };
            let line = &feeder.lines()[line];
            let parent = topo.parent[bus].unwrap();
            let phases: Vec<Phase> = line.phases.iter().collect();
            for (a, &pa) in phases.iter().enumerate() {
                let drop: Complex64 = phases
                    .iter()
                    .enumerate()
                    .map(|(b, &pb)| line.impedance[a][b] * branch[bus][pb.index()])
                    .sum();
                let new = v[node(parent, pa)] - drop;
                let i = node(bus, pa);
                change = change.max((new - v[i]).norm());
                v[i] = new;
            }
        }
        if !change.is_finite() {
            return None;
        }
        if change < 1e-13 {
            return Some(v);
        }
    }
    None
}

pub mod setup {
    use gridpilot_core::ddpg::TrainConfig;
    use gridpilot_core::env::{EnvConfig, Environment};
    use gridpilot_core::feeder::Feeder;
    use gridpilot_core::scenario::{generate_scenarios, split, GenConfig, ScenarioSet};

    pub fn scenarios(feeder: &Feeder, count: usize, seed: u64) -> (ScenarioSet, ScenarioSet) {
        let set = generate_scenarios(
            feeder,
            &GenConfig {
                count,
                ..GenConfig::default()
            },
            seed,
        )
        .unwrap();
        split(&set, 0.8, seed + 1).unwrap()
    }

    pub fn perfect_env(feeder: &Feeder) -> Environment {
        let cfg = EnvConfig {
            perfect_state: true,
            ..EnvConfig::default()
        };
        Environment::new(feeder.clone(), cfg, None).unwrap()
    }

    /// Small networks for fast tests.
    pub fn small_train(episodes: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            episodes,
            seed,
            batch_size: 16,
            actor_hidden: [32, 24],
            critic_hidden: [32, 24],
            ..TrainConfig::default()
        }
    }
}
