//! The control MDP: inverter reactive-power setpoints in, node voltages out.

use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsse::DsseModel;
use crate::error::{Error, Result};
use crate::feeder::{build_admittance, AdmittanceMatrix, Feeder, PvUnit};
use crate::powerflow::{feeder_head_measurement, solve_power_flow};
use crate::scenario::Scenario;

/// Observation: one voltage magnitude per node-phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpState {
    pub v_mag: Vec<f64>,
}

/// One reactive-power coefficient per zone, nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpAction {
    pub coefficients: Vec<f64>,
}

impl MdpAction {
    pub fn uniform(zones: usize, a: f64) -> Self {
        MdpAction {
            coefficients: vec![a; zones],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda_weight: f64,
    pub eta_weight: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub v_nominal: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_weight: 1.0,
            eta_weight: 0.5,
            v_min: 0.95,
            v_max: 1.05,
            v_nominal: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_min < self.v_nominal && self.v_nominal < self.v_max) {
            return Err(Error::Config(format!(
                "voltage band must satisfy v_min < v_nominal < v_max, got {} / {} / {}",
                self.v_min, self.v_nominal, self.v_max
            )));
        }
        if !(self.lambda_weight >= 0.0 && self.eta_weight >= 0.0) {
            return Err(Error::Config("reward weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn in_band(&self, v: f64) -> bool {
        self.v_min <= v && v <= self.v_max
    }
}

/// Assignment of PV units to agent zones.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoneMap {
    assignment: Vec<usize>,
    zones: usize,
}

impl ZoneMap {
    pub fn single(pv_units: usize) -> Self {
        ZoneMap {
            assignment: vec![0; pv_units],
            zones: 1,
        }
    }

    /// Zones are numbered `0..n`; every zone must own at least one unit.
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        let zones = assignment.iter().max().map_or(0, |m| m + 1);
        for z in 0..zones {
            if !assignment.contains(&z) {
                return Err(Error::Config(format!("zone {z} has no PV unit")));
            }
        }
        Ok(ZoneMap { assignment, zones })
    }

    pub fn zones(&self) -> usize {
        self.zones
    }

    pub fn zone_of(&self, unit: usize) -> usize {
        self.assignment[unit]
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Per-unit reactive setpoints `a_zone · Q_rated`, bounded by `±Q_rated`.
pub fn map_action(action: &MdpAction, pv_units: &[PvUnit], zone_map: &ZoneMap) -> Result<Vec<f64>> {
    if action.coefficients.len() != zone_map.zones() {
        return Err(Error::Shape(format!(
            "action has {} coefficients for {} zones",
            action.coefficients.len(),
            zone_map.zones()
        )));
    }
    if zone_map.len() != pv_units.len() {
        return Err(Error::Shape(format!(
            "zone map covers {} units, feeder has {}",
            zone_map.len(),
            pv_units.len()
        )));
    }
    let coefficients: Vec<f64> = action
        .coefficients
        .iter()
        .map(|&c| {
            let clamped = if c.is_nan() { 0.0 } else { c.clamp(-1.0, 1.0) };
            if clamped != c {
                debug!("action coefficient {c} clamped to {clamped}");
            }
            clamped
        })
        .collect();
    Ok(pv_units
        .iter()
        .enumerate()
        .map(|(k, unit)| {
            let q = coefficients[zone_map.zone_of(k)] * unit.q_rated;
            q.clamp(-unit.q_rated, unit.q_rated)
        })
        .collect())
}

/// Reactive headroom left once the PV unit delivers `p_pv`.
pub fn q_max_no_curtailment(s_rated: f64, p_pv: f64) -> Result<f64> {
    if !(0.0..=s_rated).contains(&p_pv) {
        return Err(Error::Domain(format!("active output {p_pv} outside [0, {s_rated}]")));
    }
    Ok((s_rated * s_rated - p_pv * p_pv).sqrt())
}

/// Quadratic inside the band (edges inclusive), absolute deviation outside.
pub fn voltage_barrier(v: f64, cfg: &RewardConfig) -> f64 {
    let d = v - cfg.v_nominal;
    if cfg.v_min <= v && v <= cfg.v_max {
        d * d
    } else {
        d.abs()
    }
}

pub fn curtailment_barrier(q_k: f64, q_max_k: f64) -> f64 {
    if q_k.abs() <= q_max_k {
        0.0
    } else {
        q_k.abs() - q_max_k
    }
}

pub fn reward(v_mags: &[f64], q_setpoints: &[f64], q_max_values: &[f64], cfg: &RewardConfig) -> Result<f64> {
    if q_setpoints.len() != q_max_values.len() {
        return Err(Error::Shape(format!(
            "{} setpoints vs {} limits",
            q_setpoints.len(),
            q_max_values.len()
        )));
    }
    let voltage: f64 = v_mags.iter().map(|&v| voltage_barrier(v, cfg)).sum();
    let curtailment: f64 = q_setpoints
        .iter()
        .zip(q_max_values)
        .map(|(&q, &m)| curtailment_barrier(q, m))
        .sum();
    Ok(-(cfg.lambda_weight * voltage + cfg.eta_weight * curtailment))
}

/// `Σ |V − V_nominal|` for one snapshot.
pub fn objective_deviation(v_mags: &[f64], v_nominal: f64) -> f64 {
    v_mags.iter().map(|v| (v - v_nominal).abs()).sum()
}

/// Reward assigned to a step whose power flow fails, per node-phase.
pub const DIVERGENCE_PENALTY_PER_NODE: f64 = -10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Steps per episode; the scenario is held fixed within an episode.
    pub horizon: usize,
    pub measurement_noise_pct: f64,
    /// Observe true voltages instead of state estimates.
    pub perfect_state: bool,
    /// Zone per PV unit; empty means a single global zone.
    pub zone_map: Vec<usize>,
    pub reward: RewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 20,
            measurement_noise_pct: 1.0,
            perfect_state: false,
            zone_map: Vec::new(),
            reward: RewardConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(self.measurement_noise_pct >= 0.0) {
            return Err(Error::Config("measurement_noise_pct must be >= 0".into()));
        }
        self.reward.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    /// Solver voltages; empty when the power flow diverged.
    pub v_true: Vec<f64>,
    pub feeder_head_p: f64,
    pub feeder_head_q: f64,
    pub q_setpoints: Vec<f64>,
    pub q_max: Vec<f64>,
    pub max_v: f64,
    pub min_v: f64,
    pub violations: usize,
    pub deviation: f64,
    pub diverged: bool,
    pub estimate_latency: Option<Duration>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: MdpState,
    pub reward: f64,
    pub terminal: bool,
    pub info: StepInfo,
}

/// A feeder with its admittance, reward settings and observation model.
#[derive(Clone, Debug)]
pub struct Environment {
    feeder: Feeder,
    admittance: AdmittanceMatrix,
    config: EnvConfig,
    zone_map: ZoneMap,
    estimator: Option<Arc<DsseModel>>,
}

impl Environment {
    /// `estimator` is required unless `config.perfect_state` is set.
    pub fn new(feeder: Feeder, config: EnvConfig, estimator: Option<Arc<DsseModel>>) -> Result<Self> {
        config.validate()?;
        let admittance = build_admittance(&feeder)?;
        let zone_map = if config.zone_map.is_empty() {
            ZoneMap::single(feeder.pv_units().len())
        } else {
            ZoneMap::new(config.zone_map.clone())?
        };
        if zone_map.len() != feeder.pv_units().len() || zone_map.zones() == 0 {
            return Err(Error::Config(format!(
                "zone map must cover all {} PV units",
                feeder.pv_units().len()
            )));
        }
        match (&estimator, config.perfect_state) {
            (None, false) => {
                return Err(Error::Config(
                    "a state estimator is required unless perfect_state is set".into(),
                ))
            }
            (Some(model), _) => model.check_feeder(&feeder)?,
            _ => {}
        }
        Ok(Environment {
            feeder,
            admittance,
            config,
            zone_map,
            estimator,
        })
    }

    pub fn feeder(&self) -> &Feeder {
        &self.feeder
    }

    pub fn admittance(&self) -> &AdmittanceMatrix {
        &self.admittance
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn zone_map(&self) -> &ZoneMap {
        &self.zone_map
    }

    pub fn estimator(&self) -> Option<&Arc<DsseModel>> {
        self.estimator.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.feeder.node_phase_count()
    }

    pub fn action_dim(&self) -> usize {
        self.zone_map.zones()
    }

    /// First observation of an episode: the scenario with all inverters at
    /// unity power factor.
    pub fn reset<R: Rng + ?Sized>(&self, scenario: &Scenario, rng: &mut R) -> Result<StepOutcome> {
        self.step(scenario, &MdpAction::uniform(self.action_dim(), 0.0), rng)
    }

    /// Applies `action` to `scenario`, solves the network and observes it.
    /// The reward always uses solver voltages.
    pub fn step<R: Rng + ?Sized>(&self, scenario: &Scenario, action: &MdpAction, rng: &mut R) -> Result<StepOutcome> {
        let q_setpoints = map_action(action, self.feeder.pv_units(), &self.zone_map)?;
        let q_max = self
            .feeder
            .pv_units()
            .iter()
            .zip(&scenario.p_pv)
            .map(|(unit, &p)| q_max_no_curtailment(unit.s_rated, p))
            .collect::<Result<Vec<_>>>()?;
        let injections = scenario.injections(&self.feeder, &q_setpoints)?;
        let n = self.state_dim();
        let cfg = &self.config.reward;

        let solution = match solve_power_flow(&self.feeder, &self.admittance, &injections, self.feeder.slack_voltage())
        {
            Ok(s) => s,
            Err(err @ (Error::Diverged { .. } | Error::Numerical(_))) => {
                warn!(
                    "scenario {}: power flow failed under action {:?}: {err}",
                    scenario.id, action.coefficients
                );
                return Ok(StepOutcome {
                    state: MdpState {
                        v_mag: vec![cfg.v_nominal; n],
                    },
                    reward: DIVERGENCE_PENALTY_PER_NODE * n as f64,
                    terminal: true,
                    info: StepInfo {
                        v_true: Vec::new(),
                        feeder_head_p: f64::NAN,
                        feeder_head_q: f64::NAN,
                        q_setpoints,
                        q_max,
                        max_v: f64::NAN,
                        min_v: f64::NAN,
                        violations: n,
                        deviation: f64::NAN,
                        diverged: true,
                        estimate_latency: None,
                    },
                });
            }
            Err(e) => return Err(e),
        };

        let r = reward(&solution.v_mag, &q_setpoints, &q_max, cfg)?;
        let (observed, latency) = match (&self.estimator, self.config.perfect_state) {
            (Some(model), false) => {
                let m = feeder_head_measurement(
                    &solution,
                    &self.feeder,
                    &self.admittance,
                    self.config.measurement_noise_pct,
                    rng,
                )?;
                let start = Instant::now();
                let est = model.estimate(&m)?;
                (est.v_mag, Some(start.elapsed()))
            }
            _ => (solution.v_mag.clone(), None),
        };
        let info = StepInfo {
            feeder_head_p: solution.feeder_head_p,
            feeder_head_q: solution.feeder_head_q,
            max_v: solution.max_v(),
            min_v: solution.min_v(),
            violations: solution.v_mag.iter().filter(|&&v| !cfg.in_band(v)).count(),
            deviation: objective_deviation(&solution.v_mag, cfg.v_nominal),
            q_setpoints,
            q_max,
            diverged: false,
            estimate_latency: latency,
            v_true: solution.v_mag,
        };
        Ok(StepOutcome {
            state: MdpState { v_mag: observed },
            reward: r,
            terminal: false,
            info,
        })
    }
}

/// One line of a step log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub episode: usize,
    pub step: usize,
    pub scenario_id: usize,
    pub action: Vec<f64>,
    pub reward: f64,
    pub max_v: f64,
    pub min_v: f64,
    pub feeder_head_p: f64,
    pub feeder_head_q: f64,
    pub violations: usize,
}

impl StepRecord {
    pub fn new(episode: usize, step: usize, scenario_id: usize, action: &MdpAction, out: &StepOutcome) -> Self {
        StepRecord {
            episode,
            step,
            scenario_id,
            action: action.coefficients.clone(),
            reward: out.reward,
            max_v: out.info.max_v,
            min_v: out.info.min_v,
            feeder_head_p: out.info.feeder_head_p,
            feeder_head_q: out.info.feeder_head_q,
            violations: out.info.violations,
        }
    }
}

/// Writes step records as CSV with one `action_<zone>` column per zone.
pub fn write_step_log(records: &[StepRecord], zones: usize, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["episode".to_string(), "step".into(), "scenario_id".into()];
    header.extend((0..zones).map(|z| format!("action_{z}")));
    header.extend(
        ["reward", "max_v", "min_v", "pf_p", "pf_q", "violation_count"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.episode.to_string(), r.step.to_string(), r.scenario_id.to_string()];
        row.extend(r.action.iter().map(|a| a.to_string()));
        row.extend([
            r.reward.to_string(),
            r.max_v.to_string(),
            r.min_v.to_string(),
            r.feeder_head_p.to_string(),
            r.feeder_head_q.to_string(),
            r.violations.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn env_step<R: Rng + ?Sized>(
    env: &Environment,
    scenario: &Scenario,
    action: &MdpAction,
    rng: &mut R,
) -> Result<StepOutcome> {
    env.step(scenario, action, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::Phase;

    fn unit(q_rated: f64) -> PvUnit {
        PvUnit {
            bus: 1,
            phase: Phase::A,
            s_rated: 1.0,
            p_rated: 0.5,
            q_rated,
        }
    }

    #[test]
    fn map_action_examples() {
        let zones = ZoneMap::single(1);
        let q = |a: f64, qr: f64| map_action(&MdpAction::uniform(1, a), &[unit(qr)], &zones).unwrap()[0];
        assert_eq!(q(0.0, 0.3), 0.0);
        assert_eq!(q(1.0, 0.3), 0.3);
        assert_eq!(q(-0.5, 0.4), -0.2);
        assert_eq!(q(-7.0, 0.4), -0.4);
        assert!(map_action(&MdpAction::uniform(2, 0.0), &[unit(0.3)], &zones).is_err());
    }

    #[test]
    fn multi_zone_mapping() {
        let zones = ZoneMap::new(vec![0, 1, 0]).unwrap();
        let units = [unit(0.2), unit(0.4), unit(0.6)];
        let q = map_action(
            &MdpAction {
                coefficients: vec![0.5, -1.0],
            },
            &units,
            &zones,
        )
        .unwrap();
        assert_eq!(q, vec![0.1, -0.4, 0.3]);
        assert!(ZoneMap::new(vec![0, 2]).is_err());
    }

    #[test]
    fn q_max_examples() {
        assert!((q_max_no_curtailment(1.0, 0.6).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(q_max_no_curtailment(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(q_max_no_curtailment(1.0, 0.0).unwrap(), 1.0);
        assert!(matches!(q_max_no_curtailment(1.0, 1.1), Err(Error::Domain(_))));
    }

    #[test]
    fn barrier_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(voltage_barrier(1.0, &cfg), 0.0);
        assert!((voltage_barrier(1.03, &cfg) - 0.0009).abs() < 1e-15);
        assert!((voltage_barrier(1.07, &cfg) - 0.07).abs() < 1e-15);
        assert_eq!(voltage_barrier(cfg.v_max, &cfg), (cfg.v_max - cfg.v_nominal).powi(2));
        assert_eq!(curtailment_barrier(0.5, 0.8), 0.0);
        assert!((curtailment_barrier(-1.2, 1.0) - 0.2).abs() < 1e-15);
        assert_eq!(curtailment_barrier(0.8, 0.8), 0.0);
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(reward(&[1.0; 5], &[0.0; 2], &[0.3; 2], &cfg).unwrap(), 0.0);
        let r = reward(&[1.0, 1.07, 1.0], &[0.1], &[0.3], &cfg).unwrap();
        assert!((r + 0.07).abs() < 1e-15);
        assert!(reward(&[1.0], &[0.0], &[], &cfg).is_err());
    }

    #[test]
    fn deviation_examples() {
        assert_eq!(objective_deviation(&[1.0; 4], 1.0), 0.0);
        assert!((objective_deviation(&[1.02, 0.98], 1.0) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn bad_band_is_rejected() {
        let cfg = RewardConfig {
            v_min: 1.0,
            ..RewardConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
