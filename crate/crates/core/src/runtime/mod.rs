//! Online execution with performance monitoring, the grid-search oracle,
//! evaluation sweeps and the command pipeline.

pub mod commands;
pub mod config;

use std::time::{Duration, Instant};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddpg::{AgentNets, Learner, ReplayBuffer, Transition};
use crate::env::{Environment, MdpAction, RewardConfig, StepRecord};
use crate::error::{Error, Result};
use crate::scenario::Scenario;

/// Agent performance recorder settings. Unset reference and threshold are
/// derived from the agent's training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AprConfig {
    pub enabled: bool,
    pub window: usize,
    pub degradation_threshold: Option<f64>,
    /// Threshold as a fraction of `|reference_reward|` when none is given.
    pub threshold_fraction: f64,
    pub reference_reward: Option<f64>,
    pub fine_tune_episodes: usize,
}

impl Default for AprConfig {
    fn default() -> Self {
        AprConfig {
            enabled: true,
            window: 50,
            degradation_threshold: None,
            threshold_fraction: 0.25,
            reference_reward: None,
            fine_tune_episodes: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedApr {
    pub window: usize,
    pub degradation_threshold: f64,
    pub reference_reward: f64,
    pub fine_tune_episodes: usize,
}

impl AprConfig {
    pub fn resolve(&self, learner: &Learner) -> Result<ResolvedApr> {
        if self.window == 0 || self.fine_tune_episodes == 0 {
            return Err(Error::Config("apr window and fine_tune_episodes must be >= 1".into()));
        }
        let reference = match self.reference_reward {
            Some(r) => r,
            None => reference_from_history(learner)?,
        };
        let threshold = self
            .degradation_threshold
            .unwrap_or(self.threshold_fraction * reference.abs());
        if !(threshold >= 0.0) {
            return Err(Error::Config("degradation threshold must be >= 0".into()));
        }
        Ok(ResolvedApr {
            window: self.window,
            degradation_threshold: threshold,
            reference_reward: reference,
            fine_tune_episodes: self.fine_tune_episodes,
        })
    }
}

/// Mean per-step reward over the last ten training episodes.
pub fn reference_from_history(learner: &Learner) -> Result<f64> {
    let h = &learner.history;
    if h.is_empty() {
        return Err(Error::Config(
            "apr reference_reward not set and the agent has no training history".into(),
        ));
    }
    let tail = &h[h.len().saturating_sub(10)..];
    let horizon = learner.config.horizon as f64;
    Ok(tail.iter().map(|r| r.cumulative_reward / horizon).sum::<f64>() / tail.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AprDecision {
    Ok,
    FineTune,
}

/// Fine-tune when the trailing-window mean drops below
/// `reference − threshold`; fewer than `window` samples is always ok.
pub fn apr_check(trailing: &[f64], apr: &ResolvedApr) -> AprDecision {
    if trailing.len() < apr.window || apr.window == 0 {
        return AprDecision::Ok;
    }
    let recent = &trailing[trailing.len() - apr.window..];
    let mean = recent.iter().sum::<f64>() / apr.window as f64;
    if mean < apr.reference_reward - apr.degradation_threshold {
        AprDecision::FineTune
    } else {
        AprDecision::Ok
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneOutcome {
    pub learner: Learner,
    /// Training diverged and the input agent was returned unchanged.
    pub reverted: bool,
    /// The tuned agent scored worse on the fine-tune scenarios than the
    /// input agent, which was returned unchanged.
    pub rejected: bool,
}

/// Mean one-step reward of the noise-free policy over `scenarios`, each
/// observed at unity power factor first.
pub fn policy_score(nets: &AgentNets, env: &Environment, scenarios: &[Scenario]) -> Result<f64> {
    if scenarios.is_empty() {
        return Err(Error::Dataset("no scenarios to score".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let zero = vec![0.0; env.action_dim()];
    let mut total = 0.0;
    for sc in scenarios {
        let obs = env.reset(sc, &mut rng)?;
        let action = nets.act_with_noise(&obs.state, &zero)?;
        total += env.step(sc, &action, &mut rng)?.reward;
    }
    Ok(total / scenarios.len() as f64)
}

/// Continues training on recent experience with the final (small)
/// exploration noise. The critic stays frozen for the first 20% of updates.
/// The tuned agent is kept only if it scores at least as well as the input
/// agent on `scenarios`.
pub fn fine_tune(
    learner: &Learner,
    env: &Environment,
    transitions: &[Transition],
    scenarios: &[Scenario],
    episodes: usize,
) -> Result<FineTuneOutcome> {
    if episodes == 0 {
        return Ok(FineTuneOutcome {
            learner: learner.clone(),
            reverted: false,
            rejected: false,
        });
    }
    if transitions.is_empty() {
        return Err(Error::Usage("fine-tuning needs recent transitions".into()));
    }
    let mut tuned = learner.clone();
    let mut buffer = ReplayBuffer::new(tuned.config.buffer_capacity)?;
    for t in transitions {
        buffer.push(t.clone());
    }
    tuned.buffer = buffer;
    tuned.fixed_sigma = Some(tuned.config.noise_sigma_end);
    let planned = (episodes * tuned.config.horizon) as u64;
    tuned.critic_frozen_until = tuned.updates + planned.div_ceil(5);
    tuned.config.episodes = tuned.episodes_done + episodes;
    match tuned.train(env, scenarios) {
        Ok(()) => {
            let before = policy_score(&learner.nets, env, scenarios)?;
            let after = policy_score(&tuned.nets, env, scenarios)?;
            if after < before {
                info!("fine-tuned agent scored {after:.6} vs {before:.6}, keeping the previous agent");
                return Ok(FineTuneOutcome {
                    learner: learner.clone(),
                    reverted: false,
                    rejected: true,
                });
            }
            Ok(FineTuneOutcome {
                learner: tuned,
                reverted: false,
                rejected: false,
            })
        }
        Err(e @ Error::Training { .. }) => {
            warn!("fine-tuning diverged, keeping the previous agent: {e}");
            Ok(FineTuneOutcome {
                learner: learner.clone(),
                reverted: true,
                rejected: false,
            })
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneEvent {
    pub step: usize,
    pub trailing_mean: f64,
    pub reverted: bool,
    pub rejected: bool,
}

#[derive(Clone, Debug)]
pub struct OnlineRun {
    pub records: Vec<StepRecord>,
    /// Estimate + act time per step.
    pub latencies: Vec<Duration>,
    pub events: Vec<FineTuneEvent>,
    /// The agent after any fine-tuning.
    pub learner: Learner,
}

/// Online loop: each step observes the new scenario under the setpoints
/// currently applied, acts without exploration and applies the action.
pub fn run_online<R: Rng + ?Sized>(
    learner: &Learner,
    env: &Environment,
    stream: &[Scenario],
    apr: Option<&ResolvedApr>,
    rng: &mut R,
) -> Result<OnlineRun> {
    learner.check_env(env)?;
    if env.estimator().is_none() && !env.config().perfect_state {
        return Err(Error::Config("online execution needs a state estimator".into()));
    }
    let mut learner = learner.clone();
    let k = env.action_dim();
    let zero_noise = vec![0.0; k];
    let mut applied = MdpAction::uniform(k, 0.0);
    let mut records = Vec::with_capacity(stream.len());
    let mut latencies = Vec::with_capacity(stream.len());
    let mut events = Vec::new();
    let mut trailing: Vec<f64> = Vec::new();
    let mut recent: Vec<(Transition, usize)> = Vec::new();

    for (t, scenario) in stream.iter().enumerate() {
        let observed = env.step(scenario, &applied, rng)?;
        let start = Instant::now();
        let action = learner.nets.act_with_noise(&observed.state, &zero_noise)?;
        let latency = start.elapsed() + observed.info.estimate_latency.unwrap_or_default();
        let out = env.step(scenario, &action, rng)?;
        records.push(StepRecord::new(0, t, scenario.id, &action, &out));
        latencies.push(latency);
        trailing.push(out.reward);
        recent.push((
            Transition {
                state: observed.state.v_mag,
                action: action.coefficients.clone(),
                reward: out.reward,
                next_state: out.state.v_mag,
                terminal: out.terminal,
            },
            t,
        ));
        applied = action;

        if let Some(apr) = apr {
            if recent.len() > apr.window {
                recent.remove(0);
            }
            if apr_check(&trailing, apr) == AprDecision::FineTune {
                let mean = trailing[trailing.len() - apr.window..].iter().sum::<f64>() / apr.window as f64;
                info!("step {t}: trailing reward {mean:.4} below reference, fine-tuning");
                let transitions: Vec<Transition> = recent.iter().map(|(tr, _)| tr.clone()).collect();
                let scenarios: Vec<Scenario> = recent.iter().map(|&(_, i)| stream[i].clone()).collect();
                let outcome = fine_tune(&learner, env, &transitions, &scenarios, apr.fine_tune_episodes)?;
                events.push(FineTuneEvent {
                    step: t,
                    trailing_mean: mean,
                    reverted: outcome.reverted,
                    rejected: outcome.rejected,
                });
                learner = outcome.learner;
                trailing.clear();
            }
        }
    }
    Ok(OnlineRun {
        records,
        latencies,
        events,
        learner,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub action: f64,
    pub reward: f64,
}

/// Grid point `i` of `points` evenly spaced values on [−1, 1].
pub fn grid_value(i: usize, points: usize) -> f64 {
    let m = (points - 1) as f64;
    (2.0 * i as f64 - m) / m
}

/// Exhaustive search over a single global coefficient on a uniform grid of
/// `points` values in [−1, 1]. Ties go to the smaller `|a|`.
pub fn oracle_best_action(env: &Environment, scenario: &Scenario, points: usize) -> Result<OracleResult> {
    if env.action_dim() != 1 {
        return Err(Error::Config("the oracle supports single-zone control only".into()));
    }
    if points < 3 {
        return Err(Error::Config("oracle grid needs at least 3 points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut best: Option<OracleResult> = None;
    for i in 0..points {
        let a = grid_value(i, points);
        let out = env.step(scenario, &MdpAction::uniform(1, a), &mut rng)?;
        if out.info.diverged {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => out.reward > b.reward || (out.reward == b.reward && a.abs() < b.action.abs()),
        };
        if better {
            best = Some(OracleResult {
                action: a,
                reward: out.reward,
            });
        }
    }
    best.ok_or_else(|| Error::Infeasible(format!("scenario {}: every grid point diverged", scenario.id)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub scenario_id: usize,
    pub action: Vec<f64>,
    pub baseline_v: Vec<f64>,
    /// Empty if the controlled power flow diverged.
    pub controlled_v: Vec<f64>,
    pub baseline_reward: f64,
    pub controlled_reward: f64,
    pub latency: Duration,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles.
    pub fn from_durations(samples: &[Duration]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let rank = |p: f64| ms[((p * ms.len() as f64).ceil() as usize).clamp(1, ms.len()) - 1];
        LatencyStats {
            count: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: rank(0.50),
            p99_ms: rank(0.99),
            max_ms: ms[ms.len() - 1],
        }
    }
}

/// Aggregates of a baseline (`a = 0`) pass and a controlled pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario_count: usize,
    pub node_phase_count: usize,
    pub baseline_mean_v: Vec<f64>,
    pub baseline_std_v: Vec<f64>,
    pub controlled_mean_v: Vec<f64>,
    pub controlled_std_v: Vec<f64>,
    /// Out-of-band scenario-node-phase pairs.
    pub baseline_violations: usize,
    pub controlled_violations: usize,
    /// Scenarios with at least one node-phase above `v_max`.
    pub baseline_upper_scenarios: usize,
    pub controlled_upper_scenarios: usize,
    pub controlled_in_band_fraction: f64,
    pub mean_deviation_baseline: f64,
    pub mean_deviation_controlled: f64,
    pub mean_reward_baseline: f64,
    pub mean_reward_controlled: f64,
    pub diverged: usize,
    /// Wall-clock timing; excluded from serialized reports.
    #[serde(skip)]
    pub latency: LatencyStats,
}

fn mean_std(rows: &[&[f64]], n: usize) -> (Vec<f64>, Vec<f64>) {
    let count = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / count).collect();
    let std = (0..n)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / count).sqrt())
        .collect();
    (mean, std)
}

impl EvalReport {
    pub fn from_records(records: &[EvalRecord], node_phases: usize, cfg: &RewardConfig) -> Self {
        let out_of_band = |v: &[f64]| v.iter().filter(|&&x| !cfg.in_band(x)).count();
        let upper = |v: &[f64]| v.iter().any(|&x| x > cfg.v_max);
        let dev = |v: &[f64]| crate::env::objective_deviation(v, cfg.v_nominal);

        let baseline: Vec<&[f64]> = records.iter().map(|r| r.baseline_v.as_slice()).collect();
        let controlled: Vec<&[f64]> = records
            .iter()
            .filter(|r| !r.controlled_v.is_empty())
            .map(|r| r.controlled_v.as_slice())
            .collect();
        let diverged = records.len() - controlled.len();
        let (baseline_mean_v, baseline_std_v) = mean_std(&baseline, node_phases);
        let (controlled_mean_v, controlled_std_v) = mean_std(&controlled, node_phases);
        let controlled_violations = controlled.iter().map(|v| out_of_band(v)).sum::<usize>() + diverged * node_phases;
        let count = records.len().max(1) as f64;
        let pairs = (records.len() * node_phases).max(1) as f64;
        EvalReport {
            scenario_count: records.len(),
            node_phase_count: node_phases,
            baseline_violations: baseline.iter().map(|v| out_of_band(v)).sum(),
            controlled_violations,
            baseline_upper_scenarios: baseline.iter().filter(|v| upper(v)).count(),
            controlled_upper_scenarios: controlled.iter().filter(|v| upper(v)).count(),
            controlled_in_band_fraction: 1.0 - controlled_violations as f64 / pairs,
            mean_deviation_baseline: baseline.iter().map(|v| dev(v)).sum::<f64>() / count,
            mean_deviation_controlled: controlled.iter().map(|v| dev(v)).sum::<f64>() / controlled.len().max(1) as f64,
            mean_reward_baseline: records.iter().map(|r| r.baseline_reward).sum::<f64>() / count,
            mean_reward_controlled: records.iter().map(|r| r.controlled_reward).sum::<f64>() / count,
            baseline_mean_v,
            baseline_std_v,
            controlled_mean_v,
            controlled_std_v,
            diverged,
            latency: LatencyStats::from_durations(&records.iter().map(|r| r.latency).collect::<Vec<_>>()),
        }
    }
}

/// Per scenario: observe at `a = 0`, act once without exploration, apply.
/// Scenarios run in parallel; each has its own RNG stream so results do not
/// depend on scheduling.
pub fn evaluate(
    nets: &AgentNets,
    env: &Environment,
    scenarios: &[Scenario],
    seed: u64,
) -> Result<(EvalReport, Vec<EvalRecord>)> {
    if scenarios.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    if nets.state_dim() != env.state_dim() || nets.action_dim() != env.action_dim() {
        return Err(Error::Mismatch("agent and environment dimensions differ".into()));
    }
    let zero = vec![0.0; env.action_dim()];
    let records = scenarios
        .par_iter()
        .map(|sc| -> Result<EvalRecord> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(sc.id as u64);
            let base = env.reset(sc, &mut rng)?;
            if base.info.diverged {
                return Err(Error::Infeasible(format!(
                    "scenario {} diverges at unity power factor",
                    sc.id
                )));
            }
            let start = Instant::now();
            let action = nets.act_with_noise(&base.state, &zero)?;
            let latency = start.elapsed() + base.info.estimate_latency.unwrap_or_default();
            let out = env.step(sc, &action, &mut rng)?;
            Ok(EvalRecord {
                scenario_id: sc.id,
                action: action.coefficients,
                baseline_v: base.info.v_true,
                controlled_v: out.info.v_true,
                baseline_reward: base.reward,
                controlled_reward: out.reward,
                latency,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_records(&records, env.state_dim(), &env.config().reward);
    Ok((report, records))
}
