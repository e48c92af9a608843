use super::{cfm_value_and_grad, ToyMixture};
use crate::numerics::{ensure_finite, Model, OptimState};
use crate::{seeded_rng, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Trains `model` with flow matching on fresh mixture batches.
///
/// Returns the trained model and the loss recorded at every step.
pub fn pretrain(
    mut model: Model,
    mixture: &ToyMixture,
    cfg: &PretrainConfig,
) -> Result<(Model, Vec<f64>)> {
    if cfg.steps == 0 {
        return Err(Error::Config("train.steps must be at least 1".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("train.batch must be at least 1".into()));
    }
    if mixture.dim != model.spec.data_dim || mixture.conditions != model.spec.cond_dim {
        return Err(Error::Config(format!(
            "mixture (dim {}, conditions {}) does not match model (dim {}, cond {})",
            mixture.dim, mixture.conditions, model.spec.data_dim, model.spec.cond_dim
        )));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut opt = OptimState::new(model.params.len(), cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = mixture.sample_batch(&mut rng, cfg.batch);
        let (loss, grad) = cfm_value_and_grad(&model, &batch)?;
        ensure_finite(loss, &grad, &format!(" at pretrain step {step}"))?;
        opt.adam_step(&mut model.params, &grad)?;
        losses.push(loss);
    }
    Ok((model, losses))
}
