use super::ParamVector;
use crate::{Error, Result};

/// AdamW state with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    /// Zero moments with the usual defaults (0.9, 0.999, 1e-8) and no decay.
    pub fn new(n_params: usize, lr: f64) -> Self {
        OptimState {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// One bias-corrected AdamW update of `params` in place.
    pub fn adam_step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n {
            return Err(Error::shape("optimizer params", n, params.len()));
        }
        if grad.len() != n {
            return Err(Error::shape("optimizer gradient", n, grad.len()));
        }
        self.step_count += 1;
        let step = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(step);
        let bc2 = 1.0 - self.beta2.powi(step);
        let decay = 1.0 - self.lr * self.weight_decay;
        for i in 0..n {
            let g = grad.values[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let p = &mut params.values[i];
            *p = *p * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if !params.values.iter().all(|p| p.is_finite()) {
            return Err(Error::overflow("optimizer update"));
        }
        Ok(())
    }
}
