//! Central finite-difference checks of the analytic gradients. Each check
//! returns the largest relative error seen over `points` random parameter
//! points.

use gridpilot_core::ddpg::{policy_gradient, td_loss, AgentNets, Batch, TrainConfig, Transition};
use gridpilot_core::dsse::DsseConfig;
use gridpilot_core::nn::{mse_loss, Gradients, Init, MlpModel, Mode};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const SAMPLES_PER_POINT: usize = 24;

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Every parameter matrix is equally likely to be picked.
fn fd_check<T>(
    obj: &mut T,
    model_of: fn(&mut T) -> &mut MlpModel,
    analytic: &Gradients,
    loss: &mut dyn FnMut(&mut T) -> f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut worst: f64 = 0.0;
    let count = analytic.0.len();
    for _ in 0..SAMPLES_PER_POINT {
        let k = rng.random_range(0..count);
        let (rows, cols) = analytic.0[k].shape();
        let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let original = model_of(obj).params_mut()[k][(r, c)];
        model_of(obj).params_mut()[k][(r, c)] = original + STEP;
        let plus = loss(obj);
        model_of(obj).params_mut()[k][(r, c)] = original - STEP;
        let minus = loss(obj);
        model_of(obj).params_mut()[k][(r, c)] = original;
        let numeric = (plus - minus) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic.0[k][(r, c)], numeric));
    }
    worst
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn dsse_worst(points: u64) -> f64 {
    let outputs = 2 * 135;
    let cfg = DsseConfig::default();
    let mut worst: f64 = 0.0;
    for point in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
        let mut model = MlpModel::new(12, &cfg.layer_specs(outputs), Init::default(), &mut rng).unwrap();
        model.set_mode(Mode::Train);
        let x = random_matrix(8, 12, 1.5, &mut rng);
        let target = random_matrix(8, outputs, 1.0, &mut rng);
        let dropout_seed = rng.random::<u64>();
        // Reseeding before every forward pass keeps the dropout masks fixed.
        let mut loss = |m: &mut MlpModel| {
            let (out, _) = m.forward(&x, &mut ChaCha8Rng::seed_from_u64(dropout_seed)).unwrap();
            mse_loss(&out, &target).unwrap().0
        };
        let (out, cache) = model.forward(&x, &mut ChaCha8Rng::seed_from_u64(dropout_seed)).unwrap();
        let (_, grad) = mse_loss(&out, &target).unwrap();
        let (analytic, _) = model.backward(&cache, &grad).unwrap();
        worst = worst.max(fd_check(&mut model, |m| m, &analytic, &mut loss, &mut rng));
    }
    worst
}

fn agent(point: u64) -> (AgentNets, Vec<Transition>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + point);
    let mut nets = AgentNets::new(135, 1, &TrainConfig::default(), &mut rng).unwrap();
    // Move the final layers off their tiny initialization so every
    // parameter has a gradient well above round-off.
    for model in [&mut nets.actor, &mut nets.critic, &mut nets.critic_target] {
        for p in model.params_mut() {
            p.iter_mut().for_each(|w| *w += 0.05 * rng.random_range(-1.0..1.0));
        }
    }
    let transitions = (0..16)
        .map(|_| Transition {
            state: (0..135).map(|_| rng.random_range(0.94..1.06)).collect(),
            action: vec![rng.random_range(-1.0..1.0)],
            reward: rng.random_range(-2.0..0.0),
            next_state: (0..135).map(|_| rng.random_range(0.94..1.06)).collect(),
            terminal: rng.random_bool(0.1),
        })
        .collect();
    (nets, transitions, rng)
}

pub fn critic_worst(points: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for point in 0..points {
        let (mut nets, transitions, mut rng) = agent(point);
        let refs: Vec<&Transition> = transitions.iter().collect();
        let batch = Batch::from_transitions(&nets, &refs).unwrap();
        let (_, analytic) = td_loss(&mut nets, &batch, 0.95, &mut rng).unwrap();
        let mut loss = |n: &mut AgentNets| td_loss(n, &batch, 0.95, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().0;
        worst = worst.max(fd_check(&mut nets, |n| &mut n.critic, &analytic, &mut loss, &mut rng));
    }
    worst
}

pub fn actor_worst(points: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for point in 0..points {
        let (mut nets, transitions, mut rng) = agent(point);
        let features = nets.features(transitions.iter().map(|t| t.state.as_slice())).unwrap();
        let (_, analytic) = policy_gradient(&mut nets, &features, &mut rng).unwrap();
        let mut loss = |n: &mut AgentNets| {
            -policy_gradient(n, &features, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap()
                .0
        };
        worst = worst.max(fd_check(&mut nets, |n| &mut n.actor, &analytic, &mut loss, &mut rng));
    }
    worst
}
