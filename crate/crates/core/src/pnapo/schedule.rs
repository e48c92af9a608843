use crate::{Error, Result};

/// Regularization strength `β`, optionally modulated by the sample
/// controller `f(δr)` and the progress controller `g(n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    pub beta: f64,
    pub n1: u64,
    pub n2: u64,
    pub dynamic: bool,
    /// Ablation switches; only consulted when `dynamic` is set.
    pub use_f: bool,
    pub use_g: bool,
}

impl BetaSchedule {
    pub fn new(beta: f64, n1: u64, n2: u64, dynamic: bool) -> Result<Self> {
        let s = BetaSchedule {
            beta,
            n1,
            n2,
            dynamic,
            use_f: true,
            use_g: true,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn fixed(beta: f64) -> Result<Self> {
        Self::new(beta, 1000, 2000, false)
    }

    pub fn with_controllers(mut self, use_f: bool, use_g: bool) -> Self {
        self.use_f = use_f;
        self.use_g = use_g;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.n1 >= self.n2 {
            return Err(Error::Config(format!(
                "schedule needs n1 < n2, got ({}, {})",
                self.n1, self.n2
            )));
        }
        Ok(())
    }

    /// Short label used in reports: `fixed`, `f`, `g` or `f*g`.
    pub fn label(&self) -> &'static str {
        match (self.dynamic, self.use_f, self.use_g) {
            (false, _, _) | (true, false, false) => "fixed",
            (true, true, false) => "f",
            (true, false, true) => "g",
            (true, true, true) => "f*g",
        }
    }
}

/// Sample controller `2σ(δr) - 1`, computed as `tanh(δr / 2)`.
pub fn f_controller(delta_r: f64) -> Result<f64> {
    if delta_r.is_nan() || delta_r < 0.0 {
        return Err(Error::Domain(format!(
            "reward gap must be >= 0, got {delta_r}"
        )));
    }
    Ok((0.5 * delta_r).tanh())
}

/// Progress controller: 1 up to `n1`, cosine decay to ½ at `n2`, ½ after.
pub fn g_controller(n: u64, n1: u64, n2: u64) -> Result<f64> {
    g_progress(n as f64, n1, n2)
}

/// [`g_controller`] on a real-valued step, for continuity checks.
pub fn g_progress(n: f64, n1: u64, n2: u64) -> Result<f64> {
    if n1 >= n2 {
        return Err(Error::Config(format!(
            "schedule needs n1 < n2, got ({n1}, {n2})"
        )));
    }
    let (a, b) = (n1 as f64, n2 as f64);
    Ok(if n <= a {
        1.0
    } else if n >= b {
        0.5
    } else {
        0.5 + 0.5 * (0.5 * std::f64::consts::PI * (n - a) / (b - a)).cos()
    })
}

/// `β(δr, n)`; plain `β` when the schedule is not dynamic.
pub fn effective_beta(sched: &BetaSchedule, delta_r: f64, n: u64) -> Result<f64> {
    sched.validate()?;
    if !sched.dynamic {
        return Ok(sched.beta);
    }
    let f = if sched.use_f {
        f_controller(delta_r)?
    } else {
        1.0
    };
    let g = if sched.use_g {
        g_controller(n, sched.n1, sched.n2)?
    } else {
        1.0
    };
    Ok(sched.beta * f * g)
}
