//! The PNAPO objective.
//!
//! For a record `(c, x0_w, x0_l, xT_w, xT_l, δr)` and time `t`, each branch
//! is scored on the straight line between its stored sample and the stored
//! prior noise that generated it:
//!
//! ```text
//! x_t = (1 - t) x0 + t xT,   u = xT - x0
//! s   = ‖u - v_θ(x_t, t, c)‖² - ‖u - v_ref(x_t, t, c)‖²
//! L   = -log σ(-β (s_w - s_l)) = softplus(β (s_w - s_l))
//! ```
//!
//! `β` is either fixed or the dynamic `β · f(δr) · g(n)`.

mod schedule;
mod trainer;

pub use schedule::{effective_beta, f_controller, g_controller, g_progress, BetaSchedule};
pub use trainer::{
    align, align_step, write_metrics_csv, AlignConfig, Method, PreferenceObjective, RecordDraw,
    StepMetrics, METRICS_HEADER,
};

use crate::numerics::{sq_dist, Model};
use crate::prefdata::PreferenceRecord;
use crate::rectflow::interpolate;
use crate::{Error, Result};

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic sigmoid, evaluated on the stable side.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Interpolation score of one branch: how much worse the policy regresses
/// the straight-line velocity than the reference does. Negative when the
/// policy is closer to the target.
pub fn score(
    model: &Model,
    reference: &Model,
    x0: &[f64],
    x_noise: &[f64],
    c: &[f64],
    t: f64,
) -> Result<f64> {
    Ok(branch(model, reference, x0, x_noise, c, t)?.score)
}

pub(crate) struct BranchEval {
    pub cache: crate::numerics::ForwardCache,
    pub target: Vec<f64>,
    pub score: f64,
}

/// Evaluates one branch against an arbitrary endpoint (stored noise for
/// PNAPO, fresh noise for DPO).
pub(crate) fn branch(
    model: &Model,
    reference: &Model,
    x0: &[f64],
    end: &[f64],
    c: &[f64],
    t: f64,
) -> Result<BranchEval> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("score needs t in [0, 1], got {t}")));
    }
    let xt = interpolate(x0, end, t)?;
    let target: Vec<f64> = end.iter().zip(x0).map(|(b, a)| b - a).collect();
    let cache = model.forward_cached(&xt, t, c)?;
    let v_ref = reference.forward_cached(&xt, t, c)?.into_output();
    let score = sq_dist(&target, cache.output()) - sq_dist(&target, &v_ref);
    Ok(BranchEval {
        cache,
        target,
        score,
    })
}

/// Adds `coef · ∇_θ s` for an evaluated branch into `grad`.
pub(crate) fn branch_backward(model: &Model, b: &BranchEval, coef: f64, grad: &mut [f64]) {
    // ∂s/∂v_θ = 2 (v_θ - u)
    let g_out: Vec<f64> = b
        .cache
        .output()
        .iter()
        .zip(&b.target)
        .map(|(v, u)| 2.0 * coef * (v - u))
        .collect();
    model.backward(&b.cache, &g_out, grad);
}

/// Pairwise preference term `softplus(β (s_w - s_l))`. Returns the loss and
/// `z = β (s_w - s_l)`; when `grad` is given, adds `scale · ∇_θ L` into it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn preference_term(
    model: &Model,
    reference: &Model,
    c: &[f64],
    (x0_w, end_w, t_w): (&[f64], &[f64], f64),
    (x0_l, end_l, t_l): (&[f64], &[f64], f64),
    beta: f64,
    grad: Option<(&mut [f64], f64)>,
) -> Result<(f64, f64)> {
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::Domain(format!("beta must be >= 0, got {beta}")));
    }
    let w = branch(model, reference, x0_w, end_w, c, t_w)?;
    let l = branch(model, reference, x0_l, end_l, c, t_l)?;
    let z = beta * (w.score - l.score);
    let loss = softplus(z);
    if let Some((grad, scale)) = grad {
        // dL/dz = σ(z)
        let coef = scale * beta * sigmoid(z);
        if coef != 0.0 {
            branch_backward(model, &w, coef, grad);
            branch_backward(model, &l, -coef, grad);
        }
    }
    Ok((loss, z))
}

/// `-log σ(-β_eff (s_w - s_l))` for one record at a shared time `t`.
pub fn pnapo_loss(
    model: &Model,
    reference: &Model,
    rec: &PreferenceRecord,
    t: f64,
    beta_eff: f64,
) -> Result<f64> {
    let (loss, _) = preference_term(
        model,
        reference,
        &rec.cond,
        (&rec.x0_w, &rec.noise_w, t),
        (&rec.x0_l, &rec.noise_l, t),
        beta_eff,
        None,
    )?;
    Ok(loss)
}
