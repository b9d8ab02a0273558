use nalgebra::DMatrix;

use super::{Gradients, MlpModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<DMatrix<f64>>,
    pub second_moment: Vec<DMatrix<f64>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(model: &MlpModel, learning_rate: f64) -> Self {
        let zeros: Vec<DMatrix<f64>> = model
            .params()
            .iter()
            .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
            .collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `model` along `grads`.
    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
        if grads.0.len() != self.first_moment.len()
            || grads
                .0
                .iter()
                .zip(&self.first_moment)
                .any(|(g, m)| g.shape() != m.shape())
        {
            return Err(Error::Shape("gradients do not match optimizer state".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        let (lr, eps) = (self.learning_rate, self.epsilon);
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
