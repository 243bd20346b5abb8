//! Shared layers: seeded initialization, linear maps, batch normalization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::param(rows, cols, values)
}

/// Normal(0, 0.02) init for CLS and positional embeddings.
pub fn init_normal_002(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let values = (0..rows * cols)
        .map(|_| {
            // Box-Muller from two uniforms; deterministic under the seeded rng
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            0.02 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::param(rows, cols, values)
}

/// Affine map `x W + b` with W (in, out) and b (1, out).
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: init_uniform(in_dim, out_dim, in_dim, rng),
            bias: Tensor::param(1, out_dim, vec![0.0; out_dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight).add_bcast_row(&self.bias)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("weight".into(), self.weight.clone()),
            ("bias".into(), self.bias.clone()),
        ]
    }
}

/// Per-feature layer-norm parameters (scale/shift over the column axis).
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: Tensor::param(1, dim, vec![1.0; dim]),
            beta: Tensor::param(1, dim, vec![0.0; dim]),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("gamma".into(), self.gamma.clone()),
            ("beta".into(), self.beta.clone()),
        ]
    }
}

/// 1D batch normalization over the batch (row) axis with running statistics.
///
/// A training batch of size 1 falls back to identity normalization with a
/// warning, since the batch variance is undefined there.
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub momentum: f64,
    running_mean: std::cell::RefCell<Vec<f64>>,
    running_var: std::cell::RefCell<Vec<f64>>,
}

impl BatchNorm1d {
    pub fn new(dim: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm1d {
            gamma: Tensor::param(1, dim, vec![1.0; dim]),
            beta: Tensor::param(1, dim, vec![0.0; dim]),
            eps,
            momentum,
            running_mean: std::cell::RefCell::new(vec![0.0; dim]),
            running_var: std::cell::RefCell::new(vec![1.0; dim]),
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        let (n, c) = x.shape();
        assert_eq!(c, self.gamma.cols(), "batch_norm feature width mismatch");
        let bcast = |row: &Tensor| Tensor::concat_rows(&vec![row.clone(); n]);
        if training && n == 1 {
            log::warn!(
                "batch_norm: training batch of size 1, falling back to identity normalization"
            );
            return x.mul(&self.gamma).add(&self.beta);
        }
        let xhat = if training {
            let mean = x.sum_axis(0).mul_scalar(1.0 / n as f64); // (1, c)
            let centered = x.sub(&bcast(&mean));
            let var = centered
                .mul(&centered)
                .sum_axis(0)
                .mul_scalar(1.0 / n as f64); // (1, c)
            {
                let mv = mean.values();
                let vv = var.values();
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                for j in 0..c {
                    rm[j] = (1.0 - self.momentum) * rm[j] + self.momentum * mv[j];
                    rv[j] = (1.0 - self.momentum) * rv[j] + self.momentum * vv[j];
                }
            }
            // 1/sqrt(var + eps) as exp(-0.5 ln(.)) to reuse existing ops
            let inv_std = var.add_scalar(self.eps).log().mul_scalar(-0.5).exp();
            centered.mul(&bcast(&inv_std))
        } else {
            let rm = self.running_mean.borrow().clone();
            let rv = self.running_var.borrow().clone();
            let scale: Vec<f64> = rv.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            let centered = x.sub(&bcast(&Tensor::new(1, c, rm)));
            centered.mul(&bcast(&Tensor::new(1, c, scale)))
        };
        xhat.mul(&bcast(&self.gamma)).add_bcast_row(&self.beta)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("gamma".into(), self.gamma.clone()),
            ("beta".into(), self.beta.clone()),
        ]
    }
}
