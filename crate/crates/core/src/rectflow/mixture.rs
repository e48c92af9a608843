use rand::Rng;
use rand_distr::StandardNormal;

use super::FlowBatch;
use crate::{Error, Result, SeededRng};

/// Conditional Gaussian mixture used as the toy data distribution.
///
/// `conditions * modes_per_condition` isotropic modes sit evenly on a circle
/// of radius `radius` in the first two coordinates (remaining coordinates
/// are centred at zero). Condition `k` owns modes `k, k + K, k + 2K, ...`,
/// so each condition's modes are spread around the circle.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMixture {
    pub dim: usize,
    pub conditions: usize,
    pub modes_per_condition: usize,
    pub radius: f64,
    pub std: f64,
}

impl ToyMixture {
    pub fn new(
        dim: usize,
        conditions: usize,
        modes_per_condition: usize,
        radius: f64,
        std: f64,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("mixture needs data.dim >= 2".into()));
        }
        if conditions == 0 || modes_per_condition == 0 {
            return Err(Error::Config(
                "mixture needs at least one condition and one mode".into(),
            ));
        }
        if !(radius.is_finite() && std.is_finite() && std >= 0.0) {
            return Err(Error::Config(
                "mixture radius/std must be finite, std >= 0".into(),
            ));
        }
        Ok(ToyMixture {
            dim,
            conditions,
            modes_per_condition,
            radius,
            std,
        })
    }

    /// One-hot condition vector for condition `k`.
    pub fn condition_vector(&self, k: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.conditions];
        c[k] = 1.0;
        c
    }

    pub fn condition_vectors(&self) -> Vec<Vec<f64>> {
        (0..self.conditions)
            .map(|k| self.condition_vector(k))
            .collect()
    }

    pub fn mode_centers(&self, k: usize) -> Vec<Vec<f64>> {
        let total = (self.conditions * self.modes_per_condition) as f64;
        (0..self.modes_per_condition)
            .map(|j| {
                let idx = (k + j * self.conditions) as f64;
                let angle = std::f64::consts::TAU * idx / total;
                let mut c = vec![0.0; self.dim];
                c[0] = self.radius * angle.cos();
                c[1] = self.radius * angle.sin();
                c
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut SeededRng, k: usize) -> Vec<f64> {
        let j = rng.random_range(0..self.modes_per_condition);
        let center = &self.mode_centers(k)[j];
        center
            .iter()
            .map(|m| m + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Conditions uniform, `t ~ U[0, 1)`, noise i.i.d. standard normal.
    pub fn sample_batch(&self, rng: &mut SeededRng, n: usize) -> FlowBatch {
        let mut batch = FlowBatch::default();
        for _ in 0..n {
            let k = rng.random_range(0..self.conditions);
            let x0 = self.sample(rng, k);
            let noise = standard_normal(rng, self.dim);
            let t: f64 = rng.random();
            batch.push(x0, noise, self.condition_vector(k), t);
        }
        batch
    }
}

pub fn standard_normal(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}
