use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    gaussian_noise, policy_gradient, soft_update, td_loss, AgentNets, Batch, NoiseProcess, ReplayBuffer, TrainConfig,
    Transition, UpdatesStart,
};
use crate::env::{Environment, StepRecord};
use crate::error::{Error, Result};
use crate::nn::AdamState;
use crate::scenario::Scenario;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub cumulative_reward: f64,
    pub sigma: f64,
}

/// Exploration std for `episode` (0-based), linear from start to end.
pub fn sigma_schedule(cfg: &TrainConfig, episode: usize) -> f64 {
    if cfg.episodes <= 1 {
        return cfg.noise_sigma_start;
    }
    let f = (episode.min(cfg.episodes - 1)) as f64 / (cfg.episodes - 1) as f64;
    cfg.noise_sigma_start + (cfg.noise_sigma_end - cfg.noise_sigma_start) * f
}

/// Complete, resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub nets: AgentNets,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub buffer: ReplayBuffer,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    pub episodes_done: usize,
    pub updates: u64,
    /// Critic steps are skipped while `updates` is below this.
    pub critic_frozen_until: u64,
    /// Overrides the annealing schedule when set.
    pub fixed_sigma: Option<f64>,
    pub history: Vec<EpisodeRecord>,
    pub feeder_fingerprint: String,
    pub(crate) ou_state: Vec<f64>,
    pub(crate) bad_updates: usize,
    /// When set, every training step is appended to `step_log`.
    pub log_steps: bool,
    pub step_log: Vec<StepRecord>,
}

impl Learner {
    pub fn new(env: &Environment, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let nets = AgentNets::new(env.state_dim(), env.action_dim(), &config, &mut rng)?;
        Ok(Learner {
            actor_opt: AdamState::new(&nets.actor, config.actor_lr),
            critic_opt: AdamState::new(&nets.critic, config.critic_lr),
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            ou_state: vec![0.0; env.action_dim()],
            nets,
            config,
            rng,
            episodes_done: 0,
            updates: 0,
            critic_frozen_until: 0,
            fixed_sigma: None,
            history: Vec::new(),
            feeder_fingerprint: env.feeder().fingerprint().to_string(),
            bad_updates: 0,
            log_steps: false,
            step_log: Vec::new(),
        })
    }

    pub fn check_env(&self, env: &Environment) -> Result<()> {
        if env.feeder().fingerprint() != self.feeder_fingerprint {
            return Err(Error::Mismatch("agent was trained on a different feeder".into()));
        }
        if env.state_dim() != self.nets.state_dim() || env.action_dim() != self.nets.action_dim() {
            return Err(Error::Mismatch(format!(
                "agent dimensions {}x{} vs environment {}x{}",
                self.nets.state_dim(),
                self.nets.action_dim(),
                env.state_dim(),
                env.action_dim()
            )));
        }
        Ok(())
    }

    pub fn sigma(&self, episode: usize) -> f64 {
        self.fixed_sigma
            .unwrap_or_else(|| sigma_schedule(&self.config, episode))
    }

    fn ready(&self) -> bool {
        match self.config.updates_start {
            UpdatesStart::Batch => self.buffer.len() >= self.config.batch_size,
            UpdatesStart::Filled => self.buffer.is_full(),
        }
    }

    fn exploration(&mut self, sigma: f64) -> Result<Vec<f64>> {
        match self.config.noise_process {
            NoiseProcess::Gaussian => gaussian_noise(self.nets.action_dim(), sigma, &mut self.rng),
            NoiseProcess::OrnsteinUhlenbeck => {
                let theta = self.config.noise_mu;
                for x in &mut self.ou_state {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    *x += -theta * *x + sigma * z;
                }
                Ok(self.ou_state.clone())
            }
        }
    }

    fn bad_update(&mut self, what: &str) -> Result<()> {
        self.bad_updates += 1;
        warn!("skipping update {}: {what}", self.updates);
        if self.bad_updates > self.config.max_bad_updates {
            return Err(Error::Training {
                epoch: self.episodes_done,
                message: format!("{} consecutive non-finite updates ({what})", self.bad_updates),
            });
        }
        Ok(())
    }

    /// One critic step, one actor step and the target soft updates.
    pub fn update(&mut self) -> Result<()> {
        let picks = self.buffer.sample_indices(self.config.batch_size, &mut self.rng)?;
        let transitions: Vec<&Transition> = picks.iter().map(|&i| &self.buffer.slots()[i]).collect();
        let batch = Batch::from_transitions(&self.nets, &transitions)?;
        let gamma = self.config.gamma;

        if self.updates >= self.critic_frozen_until {
            let (loss, grads) = td_loss(&mut self.nets, &batch, gamma, &mut self.rng)?;
            if !loss.is_finite() || !grads.is_finite() {
                return self.bad_update("critic loss or gradient is not finite");
            }
            self.critic_opt.step(&mut self.nets.critic, &grads)?;
        }
        let (_, grads) = policy_gradient(&mut self.nets, &batch.features, &mut self.rng)?;
        if !grads.is_finite() {
            return self.bad_update("actor gradient is not finite");
        }
        self.actor_opt.step(&mut self.nets.actor, &grads)?;
        let tau = self.config.tau;
        soft_update(&self.nets.actor, &mut self.nets.actor_target, tau)?;
        soft_update(&self.nets.critic, &mut self.nets.critic_target, tau)?;
        self.updates += 1;
        self.bad_updates = 0;
        Ok(())
    }

    /// Samples a scenario, rolls one exploratory episode and learns online.
    pub fn run_episode(&mut self, env: &Environment, scenarios: &[Scenario]) -> Result<EpisodeRecord> {
        if scenarios.is_empty() {
            return Err(Error::Dataset("no training scenarios".into()));
        }
        let episode = self.episodes_done;
        let sigma = self.sigma(episode);
        let scenario = &scenarios[self.rng.random_range(0..scenarios.len())];
        self.ou_state.iter_mut().for_each(|x| *x = 0.0);

        let first = env.reset(scenario, &mut self.rng)?;
        if first.terminal {
            return Err(Error::Infeasible(format!(
                "scenario {} has no power-flow solution at unity power factor",
                scenario.id
            )));
        }
        let mut state = first.state;
        let mut total = 0.0;
        for step in 0..self.config.horizon {
            let noise = self.exploration(sigma)?;
            let action = self.nets.act_with_noise(&state, &noise)?;
            let out = env.step(scenario, &action, &mut self.rng)?;
            total += out.reward;
            if self.log_steps {
                self.step_log
                    .push(StepRecord::new(episode, step, scenario.id, &action, &out));
            }
            self.buffer.push(Transition {
                state: state.v_mag,
                action: action.coefficients,
                reward: out.reward,
                next_state: out.state.v_mag.clone(),
                terminal: out.terminal,
            });
            if self.ready() {
                self.update()?;
            }
            state = out.state;
            if out.terminal {
                break;
            }
        }
        let record = EpisodeRecord {
            episode,
            cumulative_reward: total,
            sigma,
        };
        debug!(
            "episode {episode}: scenario {} reward {total:.4} sigma {sigma:.4}",
            scenario.id
        );
        self.history.push(record.clone());
        self.episodes_done += 1;
        Ok(record)
    }

    /// Runs episodes until `config.episodes` have been completed.
    pub fn train(&mut self, env: &Environment, scenarios: &[Scenario]) -> Result<()> {
        self.check_env(env)?;
        while self.episodes_done < self.config.episodes {
            let r = self.run_episode(env, scenarios)?;
            if (r.episode + 1) % 10 == 0 {
                info!(
                    "episode {}: reward {:.4}, sigma {:.4}, updates {}",
                    r.episode + 1,
                    r.cumulative_reward,
                    r.sigma,
                    self.updates
                );
            }
        }
        Ok(())
    }
}

/// Offline training from scratch; returns the trained networks and the
/// per-episode cumulative reward series.
pub fn train(
    env: &Environment,
    scenarios: &[Scenario],
    config: &TrainConfig,
) -> Result<(AgentNets, Vec<EpisodeRecord>)> {
    let mut learner = Learner::new(env, config.clone())?;
    learner.train(env, scenarios)?;
    Ok((learner.nets, learner.history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_anneals_linearly() {
        let cfg = TrainConfig::default();
        assert_eq!(sigma_schedule(&cfg, 0), 0.5);
        assert!((sigma_schedule(&cfg, 99) - 0.005).abs() < 1e-15);
        let mid = sigma_schedule(&cfg, 33);
        assert!(mid < 0.5 && mid > 0.005);
        let one = TrainConfig { episodes: 1, ..cfg };
        assert_eq!(sigma_schedule(&one, 0), 0.5);
    }
}
