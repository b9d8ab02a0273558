mod common;

use std::sync::Arc;
use std::time::Duration;

use common::load_fixture;
use common::setup::{perfect_env, scenarios, small_train};
use gridpilot_core::ddpg::bundle::{learner_from_bytes, learner_to_bytes, load_learner, save_learner};
use gridpilot_core::ddpg::Learner;
use gridpilot_core::dsse::{build_training_pairs_with, encode_dsse, train_dsse, DsseConfig, PairOptions};
use gridpilot_core::env::{EnvConfig, Environment};
use gridpilot_core::nn::checkpoint::ByteWriter;
use gridpilot_core::runtime::{evaluate, run_online};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn training_is_reproducible() {
    let feeder = load_fixture("4bus.json");
    let (train, _) = scenarios(&feeder, 50, 1);
    let env = perfect_env(&feeder);
    let run = || {
        let mut l = Learner::new(&env, small_train(6, 3)).unwrap();
        l.train(&env, &train.scenarios).unwrap();
        learner_to_bytes(&l)
    };
    assert_eq!(run(), run());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let feeder = load_fixture("4bus.json");
    let (train, _) = scenarios(&feeder, 50, 2);
    let env = perfect_env(&feeder);
    let cfg = small_train(8, 5);

    let mut straight = Learner::new(&env, cfg.clone()).unwrap();
    straight.train(&env, &train.scenarios).unwrap();

    let mut first = Learner::new(&env, cfg).unwrap();
    for _ in 0..3 {
        first.run_episode(&env, &train.scenarios).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.bin");
    save_learner(&first, &path).unwrap();
    let mut resumed = load_learner(&path).unwrap();
    assert_eq!(learner_to_bytes(&resumed), learner_to_bytes(&first));
    resumed.train(&env, &train.scenarios).unwrap();

    assert_eq!(learner_to_bytes(&resumed), learner_to_bytes(&straight));
    let reloaded = learner_from_bytes(&learner_to_bytes(&resumed)).unwrap();
    assert_eq!(learner_to_bytes(&reloaded), learner_to_bytes(&resumed));
}

#[test]
fn estimator_training_is_reproducible() {
    let feeder = load_fixture("4bus.json");
    let (train, _) = scenarios(&feeder, 160, 3);
    let opts = PairOptions {
        noise_pct: 1.0,
        action_range: [-1.0, 1.0],
        seed: 4,
    };
    let cfg = DsseConfig {
        hidden_layers: 2,
        hidden_units: 16,
        epochs: 3,
        learning_rate: 1e-3,
        ..DsseConfig::default()
    };
    let run = || {
        let pairs = build_training_pairs_with(&train, &feeder, &opts).unwrap();
        let (model, losses) = train_dsse(&pairs.pairs, &feeder, &cfg).unwrap();
        let mut w = ByteWriter::new();
        encode_dsse(&mut w, &model);
        (w.into_bytes(), losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn evaluation_and_online_runs_are_reproducible() {
    let feeder = load_fixture("4bus.json");
    let (train, test) = scenarios(&feeder, 160, 6);
    let perfect = perfect_env(&feeder);
    let mut learner = Learner::new(&perfect, small_train(5, 7)).unwrap();
    learner.train(&perfect, &train.scenarios).unwrap();

    let pairs = build_training_pairs_with(
        &train,
        &feeder,
        &PairOptions {
            noise_pct: 1.0,
            action_range: [-1.0, 1.0],
            seed: 8,
        },
    )
    .unwrap();
    let dsse_cfg = DsseConfig {
        hidden_layers: 2,
        hidden_units: 16,
        epochs: 2,
        learning_rate: 1e-3,
        ..DsseConfig::default()
    };
    let (model, _) = train_dsse(&pairs.pairs, &feeder, &dsse_cfg).unwrap();
    let env = Environment::new(feeder.clone(), EnvConfig::default(), Some(Arc::new(model))).unwrap();

    let strip = |mut records: Vec<gridpilot_core::runtime::EvalRecord>| {
        records.iter_mut().for_each(|r| r.latency = Duration::ZERO);
        records
    };
    let (report_a, records_a) = evaluate(&learner.nets, &env, &test.scenarios, 11).unwrap();
    let (report_b, records_b) = evaluate(&learner.nets, &env, &test.scenarios, 11).unwrap();
    assert_eq!(strip(records_a), strip(records_b));
    assert_eq!(
        serde_json::to_string(&report_a).unwrap(),
        serde_json::to_string(&report_b).unwrap()
    );

    let online = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        run_online(&learner, &env, &test.scenarios, None, &mut rng)
            .unwrap()
            .records
    };
    assert_eq!(online(12), online(12));
}
