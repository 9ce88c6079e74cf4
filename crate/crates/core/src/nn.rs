//! Small dense-layer primitives with hand-written backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Affine map `y = W x + b` with `W` stored row-major (`out_dim x in_dim`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform fan-in init: `U(-1/sqrt(in), 1/sqrt(in))` for weight and bias.
    pub fn fan_in(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = draw(in_dim * out_dim);
        let bias = draw(out_dim);
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect()
}

pub fn leaky_relu_backward(x: &[f64], grad_out: &[f64], slope: f64) -> Vec<f64> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v >= 0.0 { g } else { slope * g })
        .collect()
}

/// Per-vector standardization `(x - mean) / (std + eps)` with population std.
#[derive(Clone, Debug)]
pub struct Standardized {
    pub output: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub eps: f64,
}

pub fn standardize(x: &[f64], eps: f64) -> Standardized {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let denom = std + eps;
    Standardized {
        output: x.iter().map(|v| (v - mean) / denom).collect(),
        mean,
        std,
        eps,
    }
}

pub fn standardize_backward(x: &[f64], s: &Standardized, grad_out: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let denom = s.std + s.eps;
    let mean_g = grad_out.iter().sum::<f64>() / n;
    // d std / d x_j = (x_j - mean) / (n std); zero at a constant vector.
    let cross: f64 = grad_out
        .iter()
        .zip(x)
        .map(|(g, v)| g * (v - s.mean))
        .sum();
    let std_coeff = if s.std > 0.0 {
        cross / (denom * denom * n * s.std)
    } else {
        0.0
    };
    x.iter()
        .zip(grad_out)
        .map(|(v, g)| (g - mean_g) / denom - std_coeff * (v - s.mean))
        .collect()
}
