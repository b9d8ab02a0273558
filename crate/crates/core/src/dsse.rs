//! Neural state estimation from feeder-head phasors.
//!
//! The network maps the 12 measurement components to every node-phase
//! voltage magnitude and angle. Inputs and outputs are standardized per
//! feature; angles are learned relative to each phase's nominal source angle.

use std::path::Path;
use std::time::{Duration, Instant};

use log::{info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{build_admittance, Feeder, Phase};
use crate::nn::checkpoint::{self, ByteReader, ByteWriter};
use crate::nn::{mse_loss, Activation, AdamState, Init, LayerSpec, MlpModel, Mode};
use crate::powerflow::{feeder_head_measurement, solve_power_flow, MeasurementVector};
use crate::scenario::ScenarioSet;

const DSSE_MAGIC: &[u8; 8] = b"GPDSSE\0\0";

/// Largest fraction of scenarios allowed to fail the power flow.
pub const MAX_DIVERGED_FRACTION: f64 = 0.10;

pub fn wrap_degrees(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DssePair {
    pub scenario_id: usize,
    pub input: MeasurementVector,
    /// Per node-phase, p.u.
    pub target_mag: Vec<f64>,
    /// Per node-phase, degrees in (−180, 180].
    pub target_angle: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<DssePair>,
    /// Scenarios skipped because the power flow failed.
    pub dropped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairOptions {
    pub noise_pct: f64,
    /// Global inverter coefficient drawn uniformly per scenario.
    pub action_range: [f64; 2],
    pub seed: u64,
}

/// Pairs at unity power factor (`a = 0`).
pub fn build_training_pairs(scenarios: &ScenarioSet, feeder: &Feeder, noise_pct: f64, seed: u64) -> Result<PairSet> {
    build_training_pairs_with(
        scenarios,
        feeder,
        &PairOptions {
            noise_pct,
            action_range: [0.0, 0.0],
            seed,
        },
    )
}

/// Solves every scenario and records its noisy head measurement and true
/// state. Each scenario gets its own RNG stream, so results do not depend
/// on evaluation order.
pub fn build_training_pairs_with(scenarios: &ScenarioSet, feeder: &Feeder, opts: &PairOptions) -> Result<PairSet> {
    let [lo, hi] = opts.action_range;
    if !(-1.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!("action range [{lo}, {hi}] outside [-1, 1]")));
    }
    let y = build_admittance(feeder)?;
    let slack = feeder.slack_voltage();
    let index = feeder.node_index();
    let results: Vec<Result<Option<DssePair>>> = scenarios
        .scenarios
        .par_iter()
        .map(|sc| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(sc.id as u64);
            let a = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let q: Vec<f64> = feeder.pv_units().iter().map(|u| a * u.q_rated).collect();
            let solution = match solve_power_flow(feeder, &y, &sc.injections(feeder, &q)?, slack) {
                Ok(s) => s,
                Err(Error::Diverged { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let input = feeder_head_measurement(&solution, feeder, &y, opts.noise_pct, &mut rng)?;
            let target_angle = (0..index.len()).map(|i| wrap_degrees(solution.angle_deg(i))).collect();
            Ok(Some(DssePair {
                scenario_id: sc.id,
                input,
                target_mag: solution.v_mag,
                target_angle,
            }))
        })
        .collect();
    let mut pairs = Vec::with_capacity(results.len());
    let mut dropped = 0;
    for r in results {
        match r? {
            Some(p) => pairs.push(p),
            None => dropped += 1,
        }
    }
    let total = scenarios.len();
    if dropped > 0 {
        warn!("{dropped} of {total} scenarios diverged and were dropped");
    }
    if total > 0 && dropped as f64 > MAX_DIVERGED_FRACTION * total as f64 {
        return Err(Error::Dataset(format!(
            "{dropped} of {total} scenarios diverged (limit {:.0}%)",
            MAX_DIVERGED_FRACTION * 100.0
        )));
    }
    Ok(PairSet { pairs, dropped })
}

/// Per-feature standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Features with (near) zero spread keep unit scale.
    pub fn fit(rows: &DMatrix<f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(rows.ncols());
        let mut std = Vec::with_capacity(rows.ncols());
        for col in rows.column_iter() {
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(mu);
            std.push(if sd > 1e-12 * mu.abs().max(1.0) { sd } else { 1.0 });
        }
        Normalizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rows.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (mu, sd) = (self.mean[j], self.std[j]);
            col.apply(|v| *v = (*v - mu) / sd);
        }
        out
    }

    pub fn denormalize(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rows.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (mu, sd) = (self.mean[j], self.std[j]);
            col.apply(|v| *v = *v * sd + mu);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsseConfig {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub dropout_rate: f64,
    pub batch_norm: bool,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub noise_pct: f64,
    pub action_range: [f64; 2],
}

impl Default for DsseConfig {
    fn default() -> Self {
        DsseConfig {
            hidden_layers: 5,
            hidden_units: 200,
            dropout_rate: 0.5,
            batch_norm: true,
            learning_rate: 0.095,
            lr_decay: 1.0,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            noise_pct: 1.0,
            action_range: [-1.0, 1.0],
        }
    }
}

impl DsseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 || self.batch_size == 0 {
            return Err(Error::Config("hidden_units and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(
                "learning_rate > 0 and lr_decay in (0, 1] required".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_specs(&self, outputs: usize) -> Vec<LayerSpec> {
        let mut specs: Vec<LayerSpec> = (0..self.hidden_layers)
            .map(|_| LayerSpec {
                units: self.hidden_units,
                activation: Activation::Relu,
                dropout_rate: self.dropout_rate,
                batch_norm: self.batch_norm,
            })
            .collect();
        specs.push(LayerSpec::dense(outputs, Activation::Identity));
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateEstimate {
    pub v_mag: Vec<f64>,
    pub v_angle: Vec<f64>,
    /// Set when a magnitude had to be clamped into (0.5, 1.5).
    pub clamped: bool,
    pub latency: Duration,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DsseMetrics {
    pub mag_mape_per_phase: [f64; 3],
    pub angle_mae_per_phase: [f64; 3],
}

impl DsseMetrics {
    pub fn max_mape(&self) -> f64 {
        self.mag_mape_per_phase.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_mae(&self) -> f64 {
        self.angle_mae_per_phase.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsseModel {
    pub net: MlpModel,
    pub input_normalizer: Normalizer,
    pub output_normalizer: Normalizer,
    pub feeder_fingerprint: String,
    /// Phase letter of each node-phase, in state order.
    pub phases: Vec<Phase>,
}

const MAG_CLAMP: (f64, f64) = (0.5 + 1e-9, 1.5 - 1e-9);

impl DsseModel {
    pub fn node_phase_count(&self) -> usize {
        self.phases.len()
    }

    pub fn check_feeder(&self, feeder: &Feeder) -> Result<()> {
        if feeder.fingerprint() != self.feeder_fingerprint {
            return Err(Error::Mismatch(format!(
                "estimator trained for feeder {}, active feeder is {}",
                short(&self.feeder_fingerprint),
                short(feeder.fingerprint())
            )));
        }
        if feeder.node_phase_count() != self.node_phase_count() {
            return Err(Error::Mismatch("node-phase count differs".into()));
        }
        Ok(())
    }

    fn encode_targets(&self, mag: &[f64], angle: &[f64]) -> Vec<f64> {
        mag.iter()
            .copied()
            .chain(
                angle
                    .iter()
                    .zip(&self.phases)
                    .map(|(a, p)| wrap_degrees(a - p.nominal_angle_deg())),
            )
            .collect()
    }

    /// Raw (unclamped) magnitudes and angles for a batch of measurements.
    pub fn predict_batch(&self, inputs: &[MeasurementVector]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let x = DMatrix::from_fn(inputs.len(), MeasurementVector::LEN, |i, j| inputs[i].values[j]);
        let out = self
            .output_normalizer
            .denormalize(&self.net.predict(&self.input_normalizer.normalize(&x))?);
        let n = self.node_phase_count();
        Ok((0..inputs.len())
            .map(|i| {
                let mag = (0..n).map(|j| out[(i, j)]).collect();
                let angle = (0..n)
                    .map(|j| wrap_degrees(out[(i, n + j)] + self.phases[j].nominal_angle_deg()))
                    .collect();
                (mag, angle)
            })
            .collect())
    }

    /// Estimate for the feeder this model was trained on.
    pub fn estimate(&self, m: &MeasurementVector) -> Result<StateEstimate> {
        let start = Instant::now();
        let (mut v_mag, v_angle) = self.predict_batch(std::slice::from_ref(m))?.remove(0);
        let mut clamped = false;
        for v in &mut v_mag {
            let c = if v.is_nan() {
                1.0
            } else {
                v.clamp(MAG_CLAMP.0, MAG_CLAMP.1)
            };
            if c != *v {
                clamped = true;
                *v = c;
            }
        }
        if clamped {
            warn!("state estimate magnitude outside (0.5, 1.5) was clamped");
        }
        Ok(StateEstimate {
            v_mag,
            v_angle,
            clamped,
            latency: start.elapsed(),
        })
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

pub fn estimate_states(model: &DsseModel, feeder: &Feeder, m: &MeasurementVector) -> Result<StateEstimate> {
    model.check_feeder(feeder)?;
    model.estimate(m)
}

/// Trains the estimator. Returns the model and the full-training-set loss
/// (normalized MSE, eval mode) before training and after every epoch.
pub fn train_dsse(pairs: &[DssePair], feeder: &Feeder, config: &DsseConfig) -> Result<(DsseModel, Vec<f64>)> {
    config.validate()?;
    if pairs.len() < 100 {
        return Err(Error::Dataset(format!(
            "at least 100 training pairs required, got {}",
            pairs.len()
        )));
    }
    let n = feeder.node_phase_count();
    if pairs
        .iter()
        .any(|p| p.target_mag.len() != n || p.target_angle.len() != n)
    {
        return Err(Error::Mismatch("training targets do not match the feeder".into()));
    }
    let phases: Vec<Phase> = feeder.node_index().entries().iter().map(|e| e.phase).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = MlpModel::new(
        MeasurementVector::LEN,
        &config.layer_specs(2 * n),
        Init::default(),
        &mut rng,
    )?;
    let mut model = DsseModel {
        net,
        input_normalizer: Normalizer {
            mean: vec![],
            std: vec![],
        },
        output_normalizer: Normalizer {
            mean: vec![],
            std: vec![],
        },
        feeder_fingerprint: feeder.fingerprint().to_string(),
        phases,
    };

    let raw_x = DMatrix::from_fn(pairs.len(), MeasurementVector::LEN, |i, j| pairs[i].input.values[j]);
    let targets: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| model.encode_targets(&p.target_mag, &p.target_angle))
        .collect();
    let raw_y = DMatrix::from_fn(pairs.len(), 2 * n, |i, j| targets[i][j]);
    model.input_normalizer = Normalizer::fit(&raw_x);
    model.output_normalizer = Normalizer::fit(&raw_y);
    let x = model.input_normalizer.normalize(&raw_x);
    let y = model.output_normalizer.normalize(&raw_y);

    let eval_loss = |net: &MlpModel| -> Result<f64> {
        let mut eval = net.clone();
        eval.set_mode(Mode::Eval);
        Ok(mse_loss(&eval.predict(&x)?, &y)?.0)
    };

    let mut adam = AdamState::new(&model.net, config.learning_rate);
    let mut history = vec![eval_loss(&model.net)?];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let min_batch = if config.batch_norm { 2 } else { 1 };
    model.net.set_mode(Mode::Train);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let bx = x.select_rows(chunk);
            let by = y.select_rows(chunk);
            let (pred, cache) = model.net.forward(&bx, &mut rng)?;
            let (loss, grad) = mse_loss(&pred, &by)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite batch loss {loss}"),
                });
            }
            let (grads, _) = model.net.backward(&cache, &grad)?;
            adam.step(&mut model.net, &grads).map_err(|e| Error::Training {
                epoch,
                message: e.to_string(),
            })?;
        }
        let loss = eval_loss(&model.net)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("non-finite training loss {loss}"),
            });
        }
        info!("dsse epoch {epoch}: loss {loss:.6}");
        history.push(loss);
        adam.learning_rate *= config.lr_decay;
    }
    model.net.set_mode(Mode::Eval);
    Ok((model, history))
}

/// Per-phase magnitude MAPE (%) and angle MAE (degrees) over raw predictions.
pub fn metrics_from_predictions(
    phases: &[Phase],
    predictions: &[(Vec<f64>, Vec<f64>)],
    pairs: &[DssePair],
) -> DsseMetrics {
    let mut ape = [0.0; 3];
    let mut ae = [0.0; 3];
    let mut count = [0usize; 3];
    for ((mag, ang), pair) in predictions.iter().zip(pairs) {
        for (j, phase) in phases.iter().enumerate() {
            let p = phase.index();
            ape[p] += ((mag[j] - pair.target_mag[j]) / pair.target_mag[j]).abs();
            ae[p] += wrap_degrees(ang[j] - pair.target_angle[j]).abs();
            count[p] += 1;
        }
    }
    let mut m = DsseMetrics::default();
    for p in 0..3 {
        if count[p] > 0 {
            m.mag_mape_per_phase[p] = 100.0 * ape[p] / count[p] as f64;
            m.angle_mae_per_phase[p] = ae[p] / count[p] as f64;
        }
    }
    m
}

pub fn evaluate_dsse(model: &DsseModel, pairs: &[DssePair]) -> Result<DsseMetrics> {
    if pairs.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let inputs: Vec<MeasurementVector> = pairs.iter().map(|p| p.input).collect();
    let predictions = model.predict_batch(&inputs)?;
    Ok(metrics_from_predictions(&model.phases, &predictions, pairs))
}

pub fn write_metrics_csv(metrics: &DsseMetrics, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{other:?}")),
    })?;
    w.write_record(["phase", "mag_mape_pct", "angle_mae_deg"])?;
    for phase in Phase::ALL {
        let p = phase.index();
        w.write_record([
            phase.letter().to_string(),
            metrics.mag_mape_per_phase[p].to_string(),
            metrics.angle_mae_per_phase[p].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_dsse(w: &mut ByteWriter, model: &DsseModel) {
    w.str(&model.feeder_fingerprint);
    w.usize(model.phases.len());
    for p in &model.phases {
        w.u8(p.index() as u8);
    }
    for norm in [&model.input_normalizer, &model.output_normalizer] {
        w.f64s(&norm.mean);
        w.f64s(&norm.std);
    }
    checkpoint::encode_model(w, &model.net);
}

pub fn decode_dsse(r: &mut ByteReader<'_>) -> Result<DsseModel> {
    let feeder_fingerprint = r.str()?;
    let n = r.usize()?;
    let phases = (0..n)
        .map(|_| match r.u8()? {
            0 => Ok(Phase::A),
            1 => Ok(Phase::B),
            2 => Ok(Phase::C),
            t => Err(Error::Checkpoint(format!("bad phase tag {t}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut norms = Vec::with_capacity(2);
    for _ in 0..2 {
        let mean = r.f64s()?;
        let std = r.f64s()?;
        if mean.len() != std.len() || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Checkpoint("invalid normalizer".into()));
        }
        norms.push(Normalizer { mean, std });
    }
    let output_normalizer = norms.pop().unwrap();
    let input_normalizer = norms.pop().unwrap();
    let net = checkpoint::decode_model(r)?;
    if net.input_dim() != MeasurementVector::LEN
        || input_normalizer.dim() != MeasurementVector::LEN
        || net.output_dim() != 2 * n
        || output_normalizer.dim() != 2 * n
    {
        return Err(Error::Checkpoint("estimator dimensions are inconsistent".into()));
    }
    Ok(DsseModel {
        net,
        input_normalizer,
        output_normalizer,
        feeder_fingerprint,
        phases,
    })
}

pub fn save_dsse(model: &DsseModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = ByteWriter::new();
    checkpoint::write_header(&mut w, DSSE_MAGIC);
    encode_dsse(&mut w, model);
    checkpoint::write_file(path.as_ref(), &w.into_bytes())
}

pub fn load_dsse(path: impl AsRef<Path>) -> Result<DsseModel> {
    let bytes = checkpoint::read_file(path.as_ref())?;
    let mut r = ByteReader::new(&bytes);
    checkpoint::read_header(&mut r, DSSE_MAGIC)?;
    let model = decode_dsse(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after estimator".into()));
    }
    Ok(model)
}
