use super::ParamVector;
use crate::{Error, Result};

/// A scalar loss over a parameter vector with an analytic gradient.
pub trait Objective {
    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;

    fn value(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.value_and_grad(params)?.0)
    }
}

impl<F> Objective for F
where
    F: Fn(&ParamVector) -> Result<(f64, ParamVector)>,
{
    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        self(params)
    }
}

/// Evaluates `loss` and its gradient, rejecting non-finite results.
pub fn loss_value_and_grad<O: Objective + ?Sized>(
    loss: &O,
    params: &ParamVector,
) -> Result<(f64, ParamVector)> {
    let (value, grad) = loss.value_and_grad(params)?;
    if grad.len() != params.len() {
        return Err(Error::shape("gradient", params.len(), grad.len()));
    }
    ensure_finite(value, &grad, "")?;
    Ok((value, grad))
}

pub(crate) fn ensure_finite(value: f64, grad: &ParamVector, suffix: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::overflow(format!("loss value{suffix}")));
    }
    if !grad.values.iter().all(|g| g.is_finite()) {
        return Err(Error::overflow(format!("gradient{suffix}")));
    }
    Ok(())
}

/// Max relative error between the analytic gradient and central
/// differences `(L(p + h e_i) - L(p - h e_i)) / 2h` over all coordinates.
///
/// The denominator is `max(1e-12, |numeric|)`.
pub fn finite_diff_check<O: Objective + ?Sized>(
    loss: &O,
    params: &ParamVector,
    h: f64,
) -> Result<f64> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    params.validate()?;
    let (_, analytic) = loss_value_and_grad(loss, params)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params.values[i];
        probe.values[i] = orig + h;
        let up = loss.value(&probe)?;
        probe.values[i] = orig - h;
        let down = loss.value(&probe)?;
        probe.values[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::overflow(format!(
                "finite difference at coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic.values[i] - numeric).abs() / numeric.abs().max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
