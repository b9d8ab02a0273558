//! Deep deterministic policy gradient: actor/critic pairs with target
//! networks, replay, and the offline training loop.

mod buffer;
pub mod bundle;
mod train;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use buffer::{ReplayBuffer, Transition};
pub use train::{sigma_schedule, train, EpisodeRecord, Learner};

use crate::env::{MdpAction, MdpState};
use crate::error::{Error, Result};
use crate::nn::{mse_loss, Activation, Gradients, Init, LayerSpec, MlpModel, Mode};

/// Final-layer initialization range for actor and critic.
pub const FINAL_LAYER_INIT: f64 = 3e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseProcess {
    Gaussian,
    OrnsteinUhlenbeck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdatesStart {
    /// Once the buffer holds one batch.
    Batch,
    /// Once the buffer is at capacity.
    Filled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub noise_sigma_start: f64,
    pub noise_sigma_end: f64,
    /// Mean-reversion rate of the Ornstein-Uhlenbeck option.
    pub noise_mu: f64,
    pub noise_process: NoiseProcess,
    pub updates_start: UpdatesStart,
    pub actor_hidden: [usize; 2],
    pub critic_hidden: [usize; 2],
    /// Observations enter the networks as `(v − state_center) / state_scale`.
    pub state_center: f64,
    pub state_scale: f64,
    /// Consecutive non-finite updates tolerated before aborting.
    pub max_bad_updates: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 100,
            horizon: 20,
            gamma: 0.95,
            tau: 0.001,
            batch_size: 64,
            buffer_capacity: 10_000,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            noise_sigma_start: 0.5,
            noise_sigma_end: 0.005,
            noise_mu: 0.1,
            noise_process: NoiseProcess::Gaussian,
            updates_start: UpdatesStart::Batch,
            actor_hidden: [400, 300],
            critic_hidden: [400, 300],
            state_center: 1.0,
            state_scale: 0.05,
            max_bad_updates: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return bad("batch_size must be in [1, buffer_capacity]");
        }
        if self.horizon == 0 {
            return bad("horizon must be >= 1");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(self.noise_sigma_start >= 0.0 && self.noise_sigma_end >= 0.0) {
            return bad("noise sigmas must be >= 0");
        }
        if !(self.state_scale > 0.0) {
            return bad("state_scale must be > 0");
        }
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return bad("hidden layer sizes must be >= 1");
        }
        Ok(())
    }
}

/// Learned and target networks plus the fixed observation scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentNets {
    pub actor: MlpModel,
    pub critic: MlpModel,
    pub actor_target: MlpModel,
    pub critic_target: MlpModel,
    pub state_center: f64,
    pub state_scale: f64,
}

impl AgentNets {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        let init = Init {
            final_layer_range: Some(FINAL_LAYER_INIT),
        };
        let [a1, a2] = cfg.actor_hidden;
        let [c1, c2] = cfg.critic_hidden;
        let mut actor = MlpModel::new(
            state_dim,
            &[
                LayerSpec::dense(a1, Activation::Relu),
                LayerSpec::dense(a2, Activation::Tanh),
                LayerSpec::dense(action_dim, Activation::Tanh),
            ],
            init,
            rng,
        )?;
        let mut critic = MlpModel::new(
            state_dim + action_dim,
            &[
                LayerSpec::dense(c1, Activation::Relu),
                LayerSpec::dense(c2, Activation::Relu),
                LayerSpec::dense(1, Activation::Identity),
            ],
            init,
            rng,
        )?;
        actor.set_mode(Mode::Eval);
        critic.set_mode(Mode::Eval);
        Ok(AgentNets {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            state_center: cfg.state_center,
            state_scale: cfg.state_scale,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_dim()
    }

    /// Scaled observation rows.
    pub fn features<'a, I>(&self, states: I) -> Result<DMatrix<f64>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<&[f64]> = states.into_iter().collect();
        let n = self.state_dim();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::Shape(format!(
                "state has {} entries, agent expects {n}",
                bad.len()
            )));
        }
        let (c, s) = (self.state_center, self.state_scale);
        Ok(DMatrix::from_fn(rows.len(), n, |i, j| (rows[i][j] - c) / s))
    }

    /// `[features | actions]` rows for the critic.
    fn critic_input(&self, features: &DMatrix<f64>, actions: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if actions.ncols() != self.action_dim() || actions.nrows() != features.nrows() {
            return Err(Error::Shape(format!(
                "actions {:?} for {} states of action size {}",
                actions.shape(),
                features.nrows(),
                self.action_dim()
            )));
        }
        let n = features.ncols();
        Ok(DMatrix::from_fn(features.nrows(), n + actions.ncols(), |i, j| {
            if j < n {
                features[(i, j)]
            } else {
                actions[(i, j - n)]
            }
        }))
    }

    /// Deterministic policy output `π(s)`.
    pub fn policy(&self, state: &MdpState) -> Result<Vec<f64>> {
        let x = self.features([state.v_mag.as_slice()])?;
        Ok(self.actor.predict(&x)?.row(0).iter().copied().collect())
    }

    /// `clamp(π(s) + noise, −1, 1)`.
    pub fn act_with_noise(&self, state: &MdpState, noise: &[f64]) -> Result<MdpAction> {
        let mut a = self.policy(state)?;
        if noise.len() != a.len() {
            return Err(Error::Shape("noise length differs from action size".into()));
        }
        for (x, n) in a.iter_mut().zip(noise) {
            *x = (*x + n).clamp(-1.0, 1.0);
        }
        Ok(MdpAction { coefficients: a })
    }

    /// Policy action with zero-mean Gaussian exploration of std `sigma`.
    pub fn act<R: Rng + ?Sized>(&self, state: &MdpState, sigma: f64, rng: &mut R) -> Result<MdpAction> {
        let noise = gaussian_noise(self.action_dim(), sigma, rng)?;
        self.act_with_noise(state, &noise)
    }

    pub fn critic_value(&self, state: &MdpState, action: &MdpAction) -> Result<f64> {
        let x = self.features([state.v_mag.as_slice()])?;
        let a = DMatrix::from_row_slice(1, action.coefficients.len(), &action.coefficients);
        Ok(self.critic.predict(&self.critic_input(&x, &a)?)?[(0, 0)])
    }
}

pub fn gaussian_noise<R: Rng + ?Sized>(dim: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if sigma == 0.0 {
        return Ok(vec![0.0; dim]);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(format!("noise sigma {sigma}: {e}")))?;
    Ok((0..dim).map(|_| normal.sample(rng)).collect())
}

/// A replay minibatch as matrices (observations already scaled).
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub rewards: Vec<f64>,
    pub next_features: DMatrix<f64>,
    pub terminal: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(nets: &AgentNets, transitions: &[&Transition]) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let k = nets.action_dim();
        if transitions.iter().any(|t| t.action.len() != k) {
            return Err(Error::Shape("transition action size differs from agent".into()));
        }
        Ok(Batch {
            features: nets.features(transitions.iter().map(|t| t.state.as_slice()))?,
            actions: DMatrix::from_fn(transitions.len(), k, |i, j| transitions[i].action[j]),
            rewards: transitions.iter().map(|t| t.reward).collect(),
            next_features: nets.features(transitions.iter().map(|t| t.next_state.as_slice()))?,
            terminal: transitions.iter().map(|t| t.terminal).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Bootstrapped critic targets `r + γ·Q′(s′, π′(s′))`, or `r` when terminal.
pub fn td_targets(nets: &AgentNets, batch: &Batch, gamma: f64) -> Result<Vec<f64>> {
    let next_actions = nets.actor_target.predict(&batch.next_features)?;
    let q_next = nets
        .critic_target
        .predict(&nets.critic_input(&batch.next_features, &next_actions)?)?;
    Ok((0..batch.len())
        .map(|i| {
            if batch.terminal[i] {
                batch.rewards[i]
            } else {
                batch.rewards[i] + gamma * q_next[(i, 0)]
            }
        })
        .collect())
}

/// Mean squared TD error of the learned critic and its parameter gradients.
pub fn td_loss<R: Rng + ?Sized>(
    nets: &mut AgentNets,
    batch: &Batch,
    gamma: f64,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let y = td_targets(nets, batch, gamma)?;
    let input = nets.critic_input(&batch.features, &batch.actions)?;
    let (q, cache) = nets.critic.forward(&input, rng)?;
    let target = DMatrix::from_column_slice(y.len(), 1, &y);
    let (loss, grad) = mse_loss(&q, &target)?;
    let (grads, _) = nets.critic.backward(&cache, &grad)?;
    Ok((loss, grads))
}

/// Gradient of `−mean Q(s, π(s))` with respect to the actor parameters,
/// and the mean critic value itself.
pub fn policy_gradient<R: Rng + ?Sized>(
    nets: &mut AgentNets,
    features: &DMatrix<f64>,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let b = features.nrows();
    if b == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let (actions, actor_cache) = nets.actor.forward(features, rng)?;
    let input = nets.critic_input(features, &actions)?;
    let (q, critic_cache) = nets.critic.forward(&input, rng)?;
    let dq = DMatrix::from_element(b, 1, -1.0 / b as f64);
    let (_, d_input) = nets.critic.backward(&critic_cache, &dq)?;
    let n = features.ncols();
    let d_actions = d_input.columns(n, actions.ncols()).into_owned();
    let (grads, _) = nets.actor.backward(&actor_cache, &d_actions)?;
    Ok((q.mean(), grads))
}

/// `θ′ ← τθ + (1 − τ)θ′`.
pub fn soft_update(learned: &MlpModel, target: &mut MlpModel, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("tau {tau} outside [0, 1]")));
    }
    target.blend_from(learned, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            actor_hidden: [8, 6],
            critic_hidden: [8, 6],
            ..TrainConfig::default()
        }
    }

    fn nets() -> AgentNets {
        AgentNets::new(5, 1, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    fn state(v: f64) -> MdpState {
        MdpState { v_mag: vec![v; 5] }
    }

    #[test]
    fn targets_start_equal() {
        let n = nets();
        assert_eq!(n.actor.layers, n.actor_target.layers);
        assert_eq!(n.critic.layers, n.critic_target.layers);
        assert_eq!(n.critic.input_dim(), 6);
    }

    #[test]
    fn zero_sigma_is_deterministic_and_bounded() {
        let n = nets();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = n.act(&state(1.04), 0.0, &mut rng).unwrap();
        let b = n.act(&state(1.04), 0.0, &mut rng).unwrap();
        assert_eq!(a, b);
        for _ in 0..100 {
            let a = n.act(&state(1.1), 5.0, &mut rng).unwrap();
            assert!(a.coefficients.iter().all(|c| (-1.0..=1.0).contains(c)));
        }
        assert!(n.act(&MdpState { v_mag: vec![1.0; 3] }, 0.0, &mut rng).is_err());
    }

    #[test]
    fn zero_critic_head_outputs_zero() {
        let mut n = nets();
        let last = n.critic.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.biases.fill(0.0);
        let v = n.critic_value(&state(1.02), &MdpAction::uniform(1, 0.3)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn soft_update_examples() {
        let n = nets();
        let mut target = n.actor.clone();
        for p in target.params_mut() {
            p.fill(0.0);
        }
        let mut learned = n.actor.clone();
        for p in learned.params_mut() {
            p.fill(1.0);
        }
        let mut t0 = target.clone();
        soft_update(&learned, &mut t0, 0.0).unwrap();
        assert_eq!(t0.layers, target.layers);
        let mut t1 = target.clone();
        soft_update(&learned, &mut t1, 1.0).unwrap();
        assert_eq!(t1.layers, learned.layers);
        soft_update(&learned, &mut target, 0.001).unwrap();
        assert!(target.params().iter().all(|p| p.iter().all(|v| *v == 0.001)));
        assert!(soft_update(&learned, &mut n.critic.clone(), 0.5).is_err());
    }

    #[test]
    fn gamma_zero_targets_are_rewards() {
        let mut n = nets();
        let t: Vec<Transition> = (0..4)
            .map(|i| Transition {
                state: vec![1.0 + 0.01 * i as f64; 5],
                action: vec![0.1 * i as f64],
                reward: -(i as f64),
                next_state: vec![1.02; 5],
                terminal: i == 3,
            })
            .collect();
        let refs: Vec<&Transition> = t.iter().collect();
        let batch = Batch::from_transitions(&n, &refs).unwrap();
        assert_eq!(td_targets(&n, &batch, 0.0).unwrap(), vec![0.0, -1.0, -2.0, -3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, _) = td_loss(&mut n, &batch, 0.0, &mut rng).unwrap();
        let expect: f64 = t
            .iter()
            .map(|x| {
                let q = n
                    .critic_value(
                        &MdpState { v_mag: x.state.clone() },
                        &MdpAction {
                            coefficients: x.action.clone(),
                        },
                    )
                    .unwrap();
                (q - x.reward).powi(2)
            })
            .sum::<f64>()
            / 4.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_critic_leaves_actor_gradient_zero() {
        let mut n = nets();
        for p in n.critic.params_mut() {
            p.fill(0.0);
        }
        let x = n
            .features([vec![1.03; 5].as_slice(), vec![0.97; 5].as_slice()])
            .unwrap();
        let (_, g) = policy_gradient(&mut n, &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }
}
