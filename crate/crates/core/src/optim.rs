//! Bias-corrected Adam over a flat list of parameter tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], cfg: AdamConfig) -> Self {
        let first_moment = params
            .iter()
            .map(|p| vec![0.0; p.rows() * p.cols()])
            .collect();
        let second_moment = params
            .iter()
            .map(|p| vec![0.0; p.rows() * p.cols()])
            .collect();
        Adam {
            cfg,
            step_count: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update from the gradients currently stored on `params`.
    ///
    /// Training must never silently continue on NaN: a non-finite gradient
    /// aborts with a diagnostic instead of updating.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        assert_eq!(params.len(), self.first_moment.len(), "parameter set changed");
        for (idx, p) in params.iter().enumerate() {
            let g = p.grad();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {idx} ({}x{})",
                    p.rows(),
                    p.cols()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (idx, p) in params.iter().enumerate() {
            let g = p.grad();
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let mut vals = p.values();
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                vals[i] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            p.set_values(&vals);
        }
        Ok(())
    }

    pub fn zero_grad(&self, params: &[Tensor]) {
        for p in params {
            p.zero_grad();
        }
    }
}
