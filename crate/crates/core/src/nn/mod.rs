//! Dense multilayer perceptrons with hand-written backpropagation.
//!
//! Batches are row-major in the sense that each row of the input matrix is
//! one sample. A layer computes `act(x W + b)`, then optionally batch-norm,
//! then optionally inverted dropout.

mod adam;
pub mod checkpoint;
mod loss;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::AdamState;
pub use loss::mse_loss;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

pub const BATCH_NORM_MOMENTUM: f64 = 0.9;
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub running_mean: DMatrix<f64>,
    pub running_var: DMatrix<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(units: usize) -> Self {
        BatchNorm {
            gamma: DMatrix::from_element(1, units, 1.0),
            beta: DMatrix::zeros(1, units),
            running_mean: DMatrix::zeros(1, units),
            running_var: DMatrix::from_element(1, units, 1.0),
            momentum: BATCH_NORM_MOMENTUM,
            eps: BATCH_NORM_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `input_dim × units`.
    pub weights: DMatrix<f64>,
    /// `1 × units`.
    pub biases: DMatrix<f64>,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub batch_norm: Option<BatchNorm>,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn units(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub batch_norm: bool,
}

impl LayerSpec {
    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec {
            units,
            activation,
            dropout_rate: 0.0,
            batch_norm: false,
        }
    }
}

/// Parameter initialization: `±1/sqrt(fan_in)` uniform everywhere except the
/// final layer when `final_layer_range` is set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Init {
    pub final_layer_range: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
    pub mode: Mode,
    input_dim: usize,
    /// Bumped on every parameter mutation so stale caches are detected.
    version: u64,
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: DMatrix<f64>,
    activated: DMatrix<f64>,
    bn: Option<(DMatrix<f64>, DMatrix<f64>)>,
    mask: Option<DMatrix<f64>>,
}

/// Intermediate values of one forward pass, consumed by [`MlpModel::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    mode: Mode,
    version: u64,
}

/// Gradients aligned with [`MlpModel::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<DMatrix<f64>>);

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients(
            model
                .params()
                .iter()
                .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flat_map(|g| g.iter()).fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|g| g.iter().copied()).collect()
    }
}

fn add_row(m: &mut DMatrix<f64>, row: &DMatrix<f64>) {
    for (mut col, r) in m.column_iter_mut().zip(row.iter()) {
        col.add_scalar_mut(*r);
    }
}

fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(1, m.ncols(), m.column_iter().map(|c| c.sum()))
}

impl MlpModel {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, specs: &[LayerSpec], init: Init, rng: &mut R) -> Result<Self> {
        if specs.is_empty() || input_dim == 0 {
            return Err(Error::Shape("network needs an input and at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = input_dim;
        for (i, spec) in specs.iter().enumerate() {
            if spec.units == 0 || !(0.0..1.0).contains(&spec.dropout_rate) {
                return Err(Error::Shape(format!("bad layer spec {i}: {spec:?}")));
            }
            let range = match init.final_layer_range {
                Some(r) if i + 1 == specs.len() => r,
                _ => 1.0 / (fan_in as f64).sqrt(),
            };
            let mut uniform = || rng.random_range(-range..=range);
            let weights = DMatrix::from_fn(fan_in, spec.units, |_, _| uniform());
            let biases = DMatrix::from_fn(1, spec.units, |_, _| uniform());
            layers.push(DenseLayer {
                weights,
                biases,
                activation: spec.activation,
                dropout_rate: spec.dropout_rate,
                batch_norm: spec.batch_norm.then(|| BatchNorm::new(spec.units)),
            });
            fan_in = spec.units;
        }
        Ok(MlpModel {
            layers,
            mode: Mode::Train,
            input_dim,
            version: 0,
        })
    }

    pub(crate) fn from_layers(input_dim: usize, layers: Vec<DenseLayer>, mode: Mode) -> Self {
        MlpModel {
            layers,
            mode,
            input_dim,
            version: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.units())
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Trainable parameters: per layer `W, b` and, with batch-norm, `γ, β`.
    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.weights);
            out.push(&layer.biases);
            if let Some(bn) = &layer.batch_norm {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.version += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weights);
            out.push(&mut layer.biases);
            if let Some(bn) = &mut layer.batch_norm {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Parameters plus batch-norm running statistics.
    pub fn state_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.version += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weights);
            out.push(&mut layer.biases);
            if let Some(bn) = &mut layer.batch_norm {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }

    pub fn state(&self) -> Vec<&DMatrix<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.weights);
            out.push(&layer.biases);
            if let Some(bn) = &layer.batch_norm {
                out.push(&bn.gamma);
                out.push(&bn.beta);
                out.push(&bn.running_mean);
                out.push(&bn.running_var);
            }
        }
        out
    }

    pub fn same_architecture(&self, other: &MlpModel) -> bool {
        self.input_dim == other.input_dim
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape()
                    && a.activation == b.activation
                    && a.batch_norm.is_some() == b.batch_norm.is_some()
            })
    }

    /// `self ← τ·other + (1 − τ)·self` over parameters and running statistics.
    pub fn blend_from(&mut self, other: &MlpModel, tau: f64) -> Result<()> {
        if !self.same_architecture(other) {
            return Err(Error::Shape("blend between different architectures".into()));
        }
        for (dst, src) in self.state_mut().into_iter().zip(other.state()) {
            dst.zip_apply(src, |d, s| *d = tau * s + (1.0 - tau) * *d);
        }
        Ok(())
    }

    /// Eval-mode inference: no dropout, batch-norm from running statistics.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = &h * &layer.weights;
            add_row(&mut z, &layer.biases);
            z.apply(|v| *v = layer.activation.apply(*v));
            if let Some(bn) = &layer.batch_norm {
                for (j, mut col) in z.column_iter_mut().enumerate() {
                    let inv = 1.0 / (bn.running_var[j] + bn.eps).sqrt();
                    let (mu, g, b) = (bn.running_mean[j], bn.gamma[j], bn.beta[j]);
                    col.apply(|v| *v = g * (*v - mu) * inv + b);
                }
            }
            h = z;
        }
        Ok(h)
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Forward pass keeping the intermediates for [`MlpModel::backward`].
    ///
    /// In train mode dropout masks are drawn from `rng` and batch-norm uses
    /// batch statistics (and updates its running averages).
    pub fn forward<R: Rng + ?Sized>(&mut self, x: &DMatrix<f64>, rng: &mut R) -> Result<(DMatrix<f64>, ForwardCache)> {
        self.check_input(x)?;
        let train = self.mode == Mode::Train;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let mut z = &h * &layer.weights;
            add_row(&mut z, &layer.biases);
            z.apply(|v| *v = layer.activation.apply(*v));
            let activated = z.clone();

            let bn_cache = match &mut layer.batch_norm {
                None => None,
                Some(bn) => {
                    let n = z.nrows() as f64;
                    let mut xhat = z.clone();
                    let mut inv_std = DMatrix::zeros(1, z.ncols());
                    for (j, mut col) in xhat.column_iter_mut().enumerate() {
                        let (mu, var) = if train {
                            let mu = col.sum() / n;
                            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                            bn.running_mean[j] = bn.momentum * bn.running_mean[j] + (1.0 - bn.momentum) * mu;
                            bn.running_var[j] = bn.momentum * bn.running_var[j] + (1.0 - bn.momentum) * var;
                            (mu, var)
                        } else {
                            (bn.running_mean[j], bn.running_var[j])
                        };
                        let inv = 1.0 / (var + bn.eps).sqrt();
                        inv_std[j] = inv;
                        col.apply(|v| *v = (*v - mu) * inv);
                    }
                    for (j, (mut zc, xc)) in z.column_iter_mut().zip(xhat.column_iter()).enumerate() {
                        let (g, b) = (bn.gamma[j], bn.beta[j]);
                        zc.iter_mut().zip(xc.iter()).for_each(|(zv, xv)| *zv = g * xv + b);
                    }
                    Some((xhat, inv_std))
                }
            };

            let mask = if train && layer.dropout_rate > 0.0 {
                let keep = 1.0 - layer.dropout_rate;
                let scale = 1.0 / keep;
                let mask = DMatrix::from_fn(z.nrows(), z.ncols(), |_, _| {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        0.0
                    }
                });
                z.component_mul_assign(&mask);
                Some(mask)
            } else {
                None
            };

            caches.push(LayerCache {
                input: h,
                activated,
                bn: bn_cache,
                mask,
            });
            h = z;
        }
        Ok((
            h,
            ForwardCache {
                layers: caches,
                mode: self.mode,
                version: self.version,
            },
        ))
    }

    /// Backpropagates `output_gradient` (∂loss/∂output, same shape as the
    /// forward output) into parameter gradients and the input gradient.
    pub fn backward(&self, cache: &ForwardCache, output_gradient: &DMatrix<f64>) -> Result<(Gradients, DMatrix<f64>)> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(Error::Usage("forward cache is stale or from another network".into()));
        }
        let batch = cache.layers[0].input.nrows();
        if output_gradient.shape() != (batch, self.output_dim()) {
            return Err(Error::Shape(format!(
                "output gradient {:?}, expected {:?}",
                output_gradient.shape(),
                (batch, self.output_dim())
            )));
        }

        let mut per_layer: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(self.layers.len());
        let mut d = output_gradient.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            if let Some(mask) = &lc.mask {
                d.component_mul_assign(mask);
            }
            let mut bn_grads = None;
            if let (Some(bn), Some((xhat, inv_std))) = (&layer.batch_norm, &lc.bn) {
                let dgamma = column_sums(&d.component_mul(xhat));
                let dbeta = column_sums(&d);
                let n = d.nrows() as f64;
                for j in 0..d.ncols() {
                    let g = bn.gamma[j];
                    let inv = inv_std[j];
                    if cache.mode == Mode::Train {
                        let sum_dxhat: f64 = d.column(j).iter().map(|v| v * g).sum();
                        let sum_dxhat_xhat: f64 = d
                            .column(j)
                            .iter()
                            .zip(xhat.column(j).iter())
                            .map(|(dv, xv)| dv * g * xv)
                            .sum();
                        for i in 0..d.nrows() {
                            let dxhat = d[(i, j)] * g;
                            d[(i, j)] = inv / n * (n * dxhat - sum_dxhat - xhat[(i, j)] * sum_dxhat_xhat);
                        }
                    } else {
                        d.column_mut(j).scale_mut(g * inv);
                    }
                }
                bn_grads = Some((dgamma, dbeta));
            }
            let act = layer.activation;
            d.zip_apply(&lc.activated, |dv, y| *dv *= act.derivative_at_output(y));

            let dw = lc.input.transpose() * &d;
            let db = column_sums(&d);
            let dx = &d * layer.weights.transpose();
            let mut grads = vec![dw, db];
            if let Some((dg, dbeta)) = bn_grads {
                grads.push(dg);
                grads.push(dbeta);
            }
            per_layer.push(grads);
            d = dx;
        }
        per_layer.reverse();
        Ok((Gradients(per_layer.into_iter().flatten().collect()), d))
    }
}
