//! Pipeline commands. Each reads its inputs from and writes its artifacts
//! to one output directory, and returns a JSON summary that is also written
//! as `summary_<command>.json`. Wall-clock timings go to separate
//! `*_timing.json` files so every other artifact is reproducible.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use super::config::{RunConfig, Stage};
use super::{evaluate, oracle_best_action, run_online, EvalRecord, EvalReport, LatencyStats};
use crate::ddpg::bundle::{load_learner, save_learner};
use crate::ddpg::{EpisodeRecord, Learner};
use crate::dsse::{
    build_training_pairs_with, evaluate_dsse, load_dsse, save_dsse, train_dsse, write_metrics_csv, DsseModel,
    PairOptions,
};
use crate::env::{write_step_log, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::feeder::{load_feeder, Feeder};
use crate::scenario::{generate_scenarios, read_scenarios, split, write_scenarios, ScenarioSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenScenarios,
    TrainDsse,
    EvalDsse,
    TrainAgent,
    Evaluate,
    RunOnline,
    Oracle,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::GenScenarios,
        Command::TrainDsse,
        Command::EvalDsse,
        Command::TrainAgent,
        Command::Evaluate,
        Command::RunOnline,
        Command::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenScenarios => "gen-scenarios",
            Command::TrainDsse => "train-dsse",
            Command::EvalDsse => "eval-dsse",
            Command::TrainAgent => "train-agent",
            Command::Evaluate => "evaluate",
            Command::RunOnline => "run-online",
            Command::Oracle => "oracle",
        }
    }
}

/// File names inside an output directory.
pub struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn scenarios(&self) -> PathBuf {
        self.path("scenarios.csv")
    }
    pub fn train_scenarios(&self) -> PathBuf {
        self.path("train_scenarios.csv")
    }
    pub fn test_scenarios(&self) -> PathBuf {
        self.path("test_scenarios.csv")
    }
    pub fn dsse(&self) -> PathBuf {
        self.path("dsse.bin")
    }
    pub fn agent(&self) -> PathBuf {
        self.path("agent.bin")
    }
    pub fn summary(&self, cmd: Command) -> PathBuf {
        self.path(&format!("summary_{}.json", cmd.name().replace('-', "_")))
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn require(path: &Path, producer: Command) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "{} not found; run `{}` first",
            path.display(),
            producer.name()
        )))
    }
}

/// Runs one command and writes its summary.
pub fn run_command(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Value> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let art = Artifacts::new(out);
    let feeder = load_feeder(&cfg.feeder)?;
    let summary = match cmd {
        Command::GenScenarios => gen_scenarios(cfg, &feeder, &art)?,
        Command::TrainDsse => train_dsse_cmd(cfg, &feeder, &art)?,
        Command::EvalDsse => eval_dsse_cmd(cfg, &feeder, &art)?,
        Command::TrainAgent => train_agent_cmd(cfg, &feeder, &art)?,
        Command::Evaluate => evaluate_cmd(cfg, &feeder, &art)?,
        Command::RunOnline => online_cmd(cfg, &feeder, &art)?,
        Command::Oracle => oracle_cmd(cfg, &feeder, &art)?,
    };
    write_json(&art.summary(cmd), &summary)?;
    Ok(summary)
}

fn gen_scenarios(cfg: &RunConfig, feeder: &Feeder, art: &Artifacts) -> Result<Value> {
    let set = generate_scenarios(feeder, &cfg.scenarios, cfg.stage_seed(Stage::Scenarios))?;
    let (train, test) = split(&set, cfg.train_fraction, cfg.stage_seed(Stage::Split))?;
    write_scenarios(&set, art.scenarios())?;
    write_scenarios(&train, art.train_scenarios())?;
    write_scenarios(&test, art.test_scenarios())?;
    info!("{} scenarios: {} train, {} test", set.len(), train.len(), test.len());
    Ok(json!({
        "command": Command::GenScenarios.name(),
        "feeder_fingerprint": feeder.fingerprint(),
        "scenarios": set.len(),
        "train": train.len(),
        "test": test.len(),
    }))
}

/// Reads the train/test split, generating it first when absent.
fn scenario_split(cfg: &RunConfig, feeder: &Feeder, art: &Artifacts) -> Result<(ScenarioSet, ScenarioSet)> {
    if !art.train_scenarios().exists() || !art.test_scenarios().exists() {
        gen_scenarios(cfg, feeder, art)?;
    }
    let train = read_scenarios(art.train_scenarios())?;
    let test = read_scenarios(art.test_scenarios())?;
    for set in [&train, &test] {
        if set.generator_config != cfg.scenarios || set.seed != cfg.stage_seed(Stage::Scenarios) {
            return Err(Error::Mismatch(format!(
                "scenario files in {} were generated with a different config or seed",
                art.dir().display()
            )));
        }
        if let Some(s) = set.scenarios.first() {
            if s.p_load.len() != feeder.loads().len() || s.p_pv.len() != feeder.pv_units().len() {
                return Err(Error::Mismatch("scenario files do not match the feeder".into()));
            }
        }
    }
    Ok((train, test))
}

fn pair_options(cfg: &RunConfig, salt: u64) -> PairOptions {
    PairOptions {
        noise_pct: cfg.dsse.noise_pct,
        action_range: cfg.dsse.action_range,
        seed: cfg.stage_seed(Stage::Pairs) ^ salt,
    }
}

fn metrics_json(m: &crate::dsse::DsseMetrics) -> Value {
    json!({
        "mag_mape_pct": m.mag_mape_per_phase,
        "angle_mae_deg": m.angle_mae_per_phase,
    })
}

fn train_dsse_cmd(cfg: &RunConfig, feeder: &Feeder, art: &Artifacts) -> Result<Value> {
    let (train, test) = scenario_split(cfg, feeder, art)?;
    let train_pairs = build_training_pairs_with(&train, feeder, &pair_options(cfg, 0))?;
    let test_pairs = build_training_pairs_with(&test, feeder, &pair_options(cfg, 1))?;
    let (model, losses) = train_dsse(&train_pairs.pairs, feeder, &cfg.dsse_config())?;
    save_dsse(&model, art.dsse())?;

    let loss_path = art.path("dsse_loss.csv");
    let mut w = csv::Writer::from_path(&loss_path)?;
    w.write_record(["epoch", "loss"])?;
    for (epoch, loss) in losses.iter().enumerate() {
        w.write_record([epoch.to_string(), loss.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&loss_path, e))?;

    let metrics = evaluate_dsse(&model, &test_pairs.pairs)?;
    write_metrics_csv(&metrics, art.path("dsse_metrics.csv"))?;
    info!(
        "dsse test MAPE {:?} %, MAE {:?} deg",
        metrics.mag_mape_per_phase, metrics.angle_mae_per_phase
    );
    Ok(json!({
        "command": Command::TrainDsse.name(),
        "train_pairs": train_pairs.pairs.len(),
        "test_pairs": test_pairs.pairs.len(),
        "dropped": train_pairs.dropped + test_pairs.dropped,
        "final_loss": losses.last(),
        "test_metrics": metrics_json(&metrics),
    }))
}

fn load_estimator(feeder: &Feeder, art: &Artifacts) -> Result<DsseModel> {
    require(&art.dsse(), Command::TrainDsse)?;
    let model = load_dsse(art.dsse())?;
    model.check_feeder(feeder)?;
    Ok(model)
}

fn eval_dsse_cmd(cfg: &RunConfig, feeder: &Feeder, art: &Artifacts) -> Result<Value> {
    let model = load_estimator(feeder, art)?;
    let (_, test) = scenario_split(cfg, feeder, art)?;
    let pairs = build_training_pairs_with(&test, feeder, &pair_options(cfg, 1))?;
    let metrics = evaluate_dsse(&model, &pairs.pairs)?;
    write_metrics_csv(&metrics, art.path("dsse_metrics.csv"))?;
    Ok(json!({
        "command": Command::EvalDsse.name(),
        "test_pairs": pairs.pairs.len(),
        "test_metrics": metrics_json(&metrics),
    }))
}

/// Environment for `env` with the estimator loaded when it is needed.
fn environment(env: &EnvConfig, feeder: &Feeder, art: &Artifacts) -> Result<Environment> {
    let estimator = if env.perfect_state {
        None
    } else {
        Some(Arc::new(load_estimator(feeder, art)?))
    };
    Environment::new(feeder.clone(), env.clone(), estimator)
}

fn write_rewards(history: &[EpisodeRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "cumulative_reward", "sigma"])?;
    for r in history {
        w.write_record([
            r.episode.to_string(),
            r.cumulative_reward.to_string(),
            r.sigma.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn train_agent_cmd(cfg: &RunConfig, feeder: &Feeder, art: &Artifacts) -> Result<Value> {
    let (train, _) = scenario_split(cfg, feeder, art)?;
    let env = environment(&cfg.env, feeder, art)?;
    let mut learner = Learner::new(&env, cfg.train_config())?;
    learner.log_steps = true;
    learner.train(&env, &train.scenarios)?;
    save_learner(&learner, art.agent())?;
    write_rewards(&learner.history, &art.path("rewards.csv"))?;
    write_step_log(&learner.step_log, env.action_dim(), art.path("train_steps.csv"))?;

    let h = &learner.history;
    let k = h.len().min(10);
    Ok(json!({
        "command": Command::TrainAgent.name(),
        "episodes": h.len(),
        "updates": learner.updates,
        "first10_mean_reward": mean(h[..k].iter().map(|r| r.cumulative_reward)),
        "last10_mean_reward": mean(h[h.len() - k..].iter().map(|r| r.cumulative_reward)),
    }))
}

fn load_agent(env: &Environment, art: &Artifacts) -> Result<Learner> {
    require(&art.agent(), Command::TrainAgent)?;
    let learner = load_learner(art.agent())?;
    learner.check_env(env)?;
    Ok(learner)
}

fn timing_json(stats: &LatencyStats) -> Value {
    serde_json::to_value(stats).expect("stats serialize")
}

/// Writes the voltage profile and per-scenario CSVs of an evaluation.
pub fn write_eval_csvs(report: &EvalReport, records: &[EvalRecord], feeder: &Feeder, dir: &Path) -> Result<()> {
    let path = dir.join("voltage_profile.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "node_phase",
        "bus",
        "phase",
        "baseline_mean",
        "baseline_std",
        "controlled_mean",
        "controlled_std",
    ])?;
    for (i, np) in feeder.node_index().entries().iter().enumerate() {
        w.write_record([
            i.to_string(),
            feeder.buses()[np.bus].id.clone(),
            np.phase.letter().to_string(),
            report.baseline_mean_v[i].to_string(),
            report.baseline_std_v[i].to_string(),
            report.controlled_mean_v[i].to_string(),
            report.controlled_std_v[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("eval_scenarios.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let zones = records.first().map_or(0, |r| r.action.len());
    let mut header = vec!["scenario_id".to_string()];
    header.extend((0..zones).map(|z| format!("action_{z}")));
    header.extend(
        [
            "baseline_reward",
            "controlled_reward",
            "baseline_max_v",
            "controlled_max_v",
            "baseline_min_v",
            "controlled_min_v",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    let extreme = |v: &[f64], max: bool| {
        let it = v.iter().copied();
        let x = if max {
            it.fold(f64::NEG_INFINITY, f64::max)
        } else {
            it.fold(f64::INFINITY, f64::min)
        };
        if v.is_empty() {
            f64::NAN
        } else {
            x
        }
    };
    for r in records {
        let mut row = vec![r.scenario_id.to_string()];
        row.extend(r.action.iter().map(|a| a.to_string()));
        row.extend([
            r.baseline_reward.to_string(),
            r.controlled_reward.to_string(),
            extreme(&r.baseline_v, true).to_string(),
            extreme(&r.controlled_v, true).to_string(),
            extreme(&r.baseline_v, false).to_string(),
            extreme(&r.controlled_v, false).to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn evaluate_cmd(cfg: &RunConfig, feeder: &Feeder, art: &Artifacts) -> Result<Value> {
    let (_, test) = scenario_split(cfg, feeder, art)?;
    let env = environment(&cfg.env, feeder, art)?;
    let learner = load_agent(&env, art)?;
    let (report, records) = evaluate(&learner.nets, &env, &test.scenarios, cfg.stage_seed(Stage::Eval))?;
    write_eval_csvs(&report, &records, feeder, art.dir())?;
    write_json(&art.path("eval_timing.json"), &timing_json(&report.latency))?;
    info!(
        "in-band {:.2}%, upper-limit scenarios {} -> {}",
        100.0 * report.controlled_in_band_fraction,
        report.baseline_upper_scenarios,
        report.controlled_upper_scenarios
    );
    Ok(json!({
        "command": Command::Evaluate.name(),
        "report": report,
    }))
}

fn online_cmd(cfg: &RunConfig, feeder: &Feeder, art: &Artifacts) -> Result<Value> {
    let (_, test) = scenario_split(cfg, feeder, art)?;
    let env = environment(&cfg.env, feeder, art)?;
    let learner = load_agent(&env, art)?;
    let steps = match cfg.eval.online_steps {
        0 => test.len(),
        n => n.min(test.len()),
    };
    let stream: Vec<_> = test.scenarios[..steps]
        .iter()
        .map(|s| s.with_pv_scaled(feeder, cfg.eval.online_pv_scale))
        .collect();
    let apr = if cfg.apr.enabled {
        Some(cfg.apr.resolve(&learner)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(Stage::Online));
    let run = run_online(&learner, &env, &stream, apr.as_ref(), &mut rng)?;

    write_step_log(&run.records, env.action_dim(), art.path("online_log.csv"))?;
    let events_path = art.path("apr_events.csv");
    let mut w = csv::Writer::from_path(&events_path)?;
    w.write_record(["step", "trailing_mean", "reverted", "rejected"])?;
    for e in &run.events {
        w.write_record([
            e.step.to_string(),
            e.trailing_mean.to_string(),
            e.reverted.to_string(),
            e.rejected.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&events_path, e))?;
    if !run.events.is_empty() {
        save_learner(&run.learner, art.path("agent_online.bin"))?;
    }
    write_json(
        &art.path("online_timing.json"),
        &timing_json(&LatencyStats::from_durations(&run.latencies)),
    )?;

    let pairs = run.records.len() * env.state_dim();
    let violations: usize = run.records.iter().map(|r| r.violations).sum();
    Ok(json!({
        "command": Command::RunOnline.name(),
        "steps": run.records.len(),
        "apr": apr,
        "fine_tunes": run.events.len(),
        "mean_reward": mean(run.records.iter().map(|r| r.reward)),
        "in_band_fraction": 1.0 - violations as f64 / pairs.max(1) as f64,
    }))
}

fn oracle_cmd(cfg: &RunConfig, feeder: &Feeder, art: &Artifacts) -> Result<Value> {
    let (_, test) = scenario_split(cfg, feeder, art)?;
    let perfect = EnvConfig {
        perfect_state: true,
        ..cfg.env.clone()
    };
    let oracle_env = Environment::new(feeder.clone(), perfect, None)?;
    let points = cfg.eval.oracle_points;
    let oracle = test
        .scenarios
        .par_iter()
        .map(|sc| oracle_best_action(&oracle_env, sc, points))
        .collect::<Result<Vec<_>>>()?;

    let agent = if art.agent().exists() {
        let env = environment(&cfg.env, feeder, art)?;
        let learner = load_agent(&env, art)?;
        Some(evaluate(&learner.nets, &env, &test.scenarios, cfg.stage_seed(Stage::Eval))?.1)
    } else {
        None
    };
    let baseline: Vec<f64> = match &agent {
        Some(records) => records.iter().map(|r| r.baseline_reward).collect(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            test.scenarios
                .iter()
                .map(|sc| oracle_env.reset(sc, &mut rng).map(|o| o.reward))
                .collect::<Result<_>>()?
        }
    };

    let path = art.path("oracle.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "scenario_id",
        "baseline_reward",
        "oracle_action",
        "oracle_reward",
        "agent_action",
        "agent_reward",
    ])?;
    for (i, sc) in test.scenarios.iter().enumerate() {
        let (aa, ar) = match &agent {
            Some(records) => (
                records[i].action[0].to_string(),
                records[i].controlled_reward.to_string(),
            ),
            None => (String::new(), String::new()),
        };
        w.write_record([
            sc.id.to_string(),
            baseline[i].to_string(),
            oracle[i].action.to_string(),
            oracle[i].reward.to_string(),
            aa,
            ar,
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mean_base = mean(baseline.iter().copied()).unwrap_or(0.0);
    let mean_oracle = mean(oracle.iter().map(|o| o.reward)).unwrap_or(0.0);
    let mean_agent = agent.as_ref().and_then(|r| mean(r.iter().map(|x| x.controlled_reward)));
    let closeness = mean_agent
        .filter(|_| mean_oracle > mean_base)
        .map(|a| (a - mean_base) / (mean_oracle - mean_base));
    Ok(json!({
        "command": Command::Oracle.name(),
        "scenarios": test.len(),
        "grid_points": points,
        "mean_baseline_reward": mean_base,
        "mean_oracle_reward": mean_oracle,
        "mean_agent_reward": mean_agent,
        "improvement_ratio": closeness,
    }))
}
