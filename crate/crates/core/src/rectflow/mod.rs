//! Rectified-flow primitives.
//!
//! Time runs from `t = 0` (data) to `t = 1` (noise). The forward path is the
//! straight line `x_t = (1 - t) x0 + t xT` and the regression target is the
//! constant velocity `xT - x0`. The sampler integrates backwards from noise.

mod mixture;
mod pretrain;

pub use mixture::{standard_normal, ToyMixture};
pub use pretrain::{pretrain, PretrainConfig};

use crate::numerics::{
    accumulate_grad, pairwise_sum, sq_dist, Model, Objective, ParamVector, VelocityField,
};
use crate::{Error, Result};

/// `(1 - t) x0 + t xT`, elementwise.
pub fn interpolate(x0: &[f64], x_noise: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != x_noise.len() {
        return Err(Error::shape("interpolate", x0.len(), x_noise.len()));
    }
    Ok(x0
        .iter()
        .zip(x_noise)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect())
}

/// Time weight `t / (1 - t)` that maps the flow-matching loss onto the
/// diffusion weighting. Not applied inside any loss here.
pub fn rf_weight(t: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "rf_weight needs t in [0, 1), got {t}"
        )));
    }
    Ok(t / (1.0 - t))
}

/// A batch of flow-matching samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowBatch {
    pub x0: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub cond: Vec<Vec<f64>>,
    pub t: Vec<f64>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn push(&mut self, x0: Vec<f64>, noise: Vec<f64>, cond: Vec<f64>, t: f64) {
        self.x0.push(x0);
        self.noise.push(noise);
        self.cond.push(cond);
        self.t.push(t);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x0.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        for (len, what) in [
            (self.noise.len(), "batch noise"),
            (self.cond.len(), "batch conditions"),
            (self.t.len(), "batch times"),
        ] {
            if len != n {
                return Err(Error::shape(what, n, len));
            }
        }
        let d = self.x0[0].len();
        for (a, b) in self.x0.iter().zip(&self.noise) {
            if a.len() != d {
                return Err(Error::shape("batch x0", d, a.len()));
            }
            if b.len() != d {
                return Err(Error::shape("batch noise", d, b.len()));
            }
        }
        Ok(())
    }
}

fn target(x0: &[f64], x_noise: &[f64]) -> Vec<f64> {
    x_noise.iter().zip(x0).map(|(b, a)| b - a).collect()
}

/// Mean over the batch of `‖v(x_t, t, c) - (xT - x0)‖²`.
pub fn cfm_loss<F: VelocityField + ?Sized>(field: &F, batch: &FlowBatch) -> Result<f64> {
    batch.validate()?;
    let per: Vec<f64> = (0..batch.len())
        .map(|i| {
            let xt = interpolate(&batch.x0[i], &batch.noise[i], batch.t[i])?;
            let v = field.velocity(&xt, batch.t[i], &batch.cond[i])?;
            Ok(sq_dist(&v, &target(&batch.x0[i], &batch.noise[i])))
        })
        .collect::<Result<_>>()?;
    Ok(pairwise_sum(&per) / batch.len() as f64)
}

/// Flow-matching loss with its analytic parameter gradient.
pub fn cfm_value_and_grad(model: &Model, batch: &FlowBatch) -> Result<(f64, ParamVector)> {
    batch.validate()?;
    let n = batch.len();
    let scale = 2.0 / n as f64;
    let (per, grad) = accumulate_grad(n, model.params.len(), |i, grad| {
        let xt = interpolate(&batch.x0[i], &batch.noise[i], batch.t[i])?;
        let cache = model.forward_cached(&xt, batch.t[i], &batch.cond[i])?;
        let u = target(&batch.x0[i], &batch.noise[i]);
        let v = cache.output();
        let g_out: Vec<f64> = v.iter().zip(&u).map(|(a, b)| scale * (a - b)).collect();
        model.backward(&cache, &g_out, grad);
        Ok(sq_dist(v, &u))
    })?;
    let loss = pairwise_sum(&per) / n as f64;
    Ok((
        loss,
        ParamVector {
            values: grad,
            layout: model.params.layout.clone(),
        },
    ))
}

/// [`cfm_value_and_grad`] as an [`Objective`] over the parameters.
pub struct CfmObjective<'a> {
    pub model: &'a Model,
    pub batch: &'a FlowBatch,
}

impl Objective for CfmObjective<'_> {
    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let m = self.model.with_params(params.clone())?;
        cfm_value_and_grad(&m, self.batch)
    }
}

/// Euler sampler settings. Guidance is fixed at 1 (plain conditional field).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50 }
    }
}

/// Integrates `dx/dt = v(x, t, c)` from `t = 1` to `t = 0` with `steps`
/// Euler steps. Returns the final state and all `steps + 1` visited states,
/// starting with `x_noise` itself.
pub fn euler_sample<F: VelocityField + ?Sized>(
    field: &F,
    x_noise: &[f64],
    c: &[f64],
    cfg: &SamplerConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut traj = Vec::with_capacity(cfg.steps + 1);
    let x = integrate(field, x_noise, c, cfg, Some(&mut traj))?;
    Ok((x, traj))
}

/// [`euler_sample`] without keeping the trajectory. Bit-identical endpoint.
pub fn euler_sample_final<F: VelocityField + ?Sized>(
    field: &F,
    x_noise: &[f64],
    c: &[f64],
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    integrate(field, x_noise, c, cfg, None)
}

fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x_noise: &[f64],
    c: &[f64],
    cfg: &SamplerConfig,
    mut traj: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Err(Error::Config("sampler steps must be at least 1".into()));
    }
    if x_noise.len() != field.data_dim() {
        return Err(Error::shape(
            "sampler noise",
            field.data_dim(),
            x_noise.len(),
        ));
    }
    let dt = 1.0 / cfg.steps as f64;
    let mut x = x_noise.to_vec();
    if let Some(tr) = traj.as_deref_mut() {
        tr.push(x.clone());
    }
    for k in 0..cfg.steps {
        let t = (cfg.steps - k) as f64 / cfg.steps as f64;
        let v = field.velocity(&x, t, c)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= dt * vi;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
        if let Some(tr) = traj.as_deref_mut() {
            tr.push(x.clone());
        }
    }
    Ok(x)
}
