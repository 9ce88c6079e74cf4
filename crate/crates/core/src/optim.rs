//! Adam over the mapper's named parameter arrays.

use crate::error::{shape_err, Result};
use crate::mapper::HairMapperParams;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied.
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64, num_parameters: usize) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: vec![0.0; num_parameters],
            second_moment: vec![0.0; num_parameters],
        }
    }

    /// One bias-corrected update of `params` along `grads`.
    pub fn update(&mut self, params: &mut HairMapperParams, grads: &HairMapperParams) -> Result<()> {
        let g = grads.flatten();
        if g.len() != self.first_moment.len() {
            return Err(shape_err(format!(
                "optimizer tracks {} parameters, gradient has {}",
                self.first_moment.len(),
                g.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut theta = params.flatten();
        for (((p, gi), m), v) in theta
            .iter_mut()
            .zip(&g)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
            *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        params.set_flat(&theta)
    }
}
