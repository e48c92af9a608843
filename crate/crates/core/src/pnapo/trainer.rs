//! Shared off-policy trainer for PNAPO and the baselines. Only the
//! per-record loss functional changes between methods; batching, time
//! draws, the optimizer and metrics are identical.

use std::io::Write;
use std::str::FromStr;

use rand::Rng;

use super::{effective_beta, preference_term, BetaSchedule};
use crate::baselines::{dpo_term, sft_term};
use crate::numerics::{
    accumulate_grad, ensure_finite, pairwise_sum, Model, Objective, OptimState, ParamVector,
};
use crate::prefdata::{fmt_real, PreferenceRecord};
use crate::rectflow::standard_normal;
use crate::{seeded_rng, Error, Result, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Pnapo,
    Dpo,
    Sft,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pnapo => "pnapo",
            Method::Dpo => "dpo",
            Method::Sft => "sft",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pnapo" => Ok(Method::Pnapo),
            "dpo" => Ok(Method::Dpo),
            "sft" => Ok(Method::Sft),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (pnapo|dpo|sft)"
            ))),
        }
    }
}

/// Per-record randomness for one loss evaluation. `eps_*` are empty for
/// PNAPO, which reads its endpoints from the record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordDraw {
    pub t_w: f64,
    pub t_l: f64,
    pub eps_w: Vec<f64>,
    pub eps_l: Vec<f64>,
}

impl RecordDraw {
    /// Draw order: `t_w`, then `t_l` unless shared, then `eps_w`, `eps_l`
    /// as the method needs them.
    pub fn sample(method: Method, shared_t: bool, dim: usize, rng: &mut SeededRng) -> Self {
        let t_w: f64 = rng.random();
        let t_l = if shared_t { t_w } else { rng.random() };
        let (eps_w, eps_l) = match method {
            Method::Pnapo => (Vec::new(), Vec::new()),
            Method::Dpo => {
                let w = standard_normal(rng, dim);
                let l = standard_normal(rng, dim);
                (w, l)
            }
            Method::Sft => (standard_normal(rng, dim), Vec::new()),
        };
        RecordDraw {
            t_w,
            t_l,
            eps_w,
            eps_l,
        }
    }
}

/// Mean per-record loss of a batch under fixed draws and β values, as a
/// function of the policy parameters.
pub struct PreferenceObjective<'a> {
    pub template: &'a Model,
    pub reference: &'a Model,
    pub method: Method,
    pub records: Vec<&'a PreferenceRecord>,
    pub draws: Vec<RecordDraw>,
    pub betas: Vec<f64>,
}

pub(crate) struct BatchEval {
    pub loss: f64,
    pub grad: ParamVector,
    pub margins: Vec<f64>,
}

impl PreferenceObjective<'_> {
    pub(crate) fn evaluate(&self, model: &Model) -> Result<BatchEval> {
        let n = self.records.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.draws.len() != n || self.betas.len() != n {
            return Err(Error::shape(
                "batch draws",
                n,
                self.draws.len().min(self.betas.len()),
            ));
        }
        let scale = 1.0 / n as f64;
        let n_params = model.params.len();
        let (terms, grad) = accumulate_grad(n, n_params, |i, g| {
            self.record_term(model, i, Some((g, scale)))
        })?;
        let losses: Vec<f64> = terms.iter().map(|&(l, _)| l).collect();
        let margins: Vec<f64> = terms.iter().map(|&(_, z)| -z).collect();
        Ok(BatchEval {
            loss: pairwise_sum(&losses) / n as f64,
            grad: ParamVector {
                values: grad,
                layout: model.params.layout.clone(),
            },
            margins,
        })
    }

    fn record_term(
        &self,
        model: &Model,
        i: usize,
        grad: Option<(&mut [f64], f64)>,
    ) -> Result<(f64, f64)> {
        let rec = self.records[i];
        let d = &self.draws[i];
        match self.method {
            Method::Pnapo => preference_term(
                model,
                self.reference,
                &rec.cond,
                (&rec.x0_w, &rec.noise_w, d.t_w),
                (&rec.x0_l, &rec.noise_l, d.t_l),
                self.betas[i],
                grad,
            ),
            Method::Dpo => dpo_term(model, self.reference, rec, d, self.betas[i], grad),
            Method::Sft => Ok((
                sft_term(model, &rec.x0_w, &d.eps_w, &rec.cond, d.t_w, grad)?,
                0.0,
            )),
        }
    }
}

impl Objective for PreferenceObjective<'_> {
    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let m = self.template.with_params(params.clone())?;
        let e = self.evaluate(&m)?;
        Ok((e.loss, e.grad))
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Mean of `-β_eff (s_w - s_l)`; zero for SFT.
    pub margin_mean: f64,
    pub beta_eff_mean: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,loss,margin_mean,beta_eff_mean,grad_norm";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[StepMetrics]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            fmt_real(r.loss),
            fmt_real(r.margin_mean),
            fmt_real(r.beta_eff_mean),
            fmt_real(r.grad_norm)
        ));
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

/// One optimizer step at training step `n` on `batch`.
///
/// Draws one `t ~ U[0, 1)` per record (two when `shared_t` is off, plus
/// fresh noise for the baselines), evaluates per-record `β(δr, n)`, and
/// applies AdamW to the mean-loss gradient.
#[allow(clippy::too_many_arguments)]
pub fn align_step(
    policy: &mut Model,
    reference: &Model,
    optim: &mut OptimState,
    batch: &[&PreferenceRecord],
    sched: &BetaSchedule,
    n: u64,
    method: Method,
    shared_t: bool,
    rng: &mut SeededRng,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dim = policy.spec.data_dim;
    let draws: Vec<RecordDraw> = batch
        .iter()
        .map(|_| RecordDraw::sample(method, shared_t, dim, rng))
        .collect();
    let betas: Vec<f64> = match method {
        Method::Sft => vec![0.0; batch.len()],
        _ => batch
            .iter()
            .map(|r| effective_beta(sched, r.delta_r, n))
            .collect::<Result<_>>()?,
    };
    let obj = PreferenceObjective {
        template: policy,
        reference,
        method,
        records: batch.to_vec(),
        draws,
        betas,
    };
    let eval = obj.evaluate(policy)?;
    ensure_finite(eval.loss, &eval.grad, &format!(" at align step {n}"))?;
    let metrics = StepMetrics {
        step: n,
        loss: eval.loss,
        margin_mean: pairwise_sum(&eval.margins) / batch.len() as f64,
        beta_eff_mean: pairwise_sum(&obj.betas) / batch.len() as f64,
        grad_norm: eval.grad.norm(),
    };
    optim
        .adam_step(&mut policy.params, &eval.grad)
        .map_err(|e| match e {
            Error::NumericOverflow { stage } => {
                Error::overflow(format!("{stage} at align step {n}"))
            }
            other => other,
        })?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub schedule: BetaSchedule,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub method: Method,
    pub shared_t: bool,
}

/// Runs `cfg.steps` alignment steps starting from `policy` (normally a copy
/// of `reference`). Steps are numbered from 1; batches are drawn uniformly
/// with replacement from `data`.
pub fn align(
    mut policy: Model,
    reference: &Model,
    data: &[PreferenceRecord],
    cfg: &AlignConfig,
) -> Result<(Model, Vec<StepMetrics>)> {
    if cfg.steps == 0 {
        return Err(Error::Config("alignment steps must be at least 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if policy.spec != reference.spec {
        return Err(Error::Config(
            "policy and reference architectures differ".into(),
        ));
    }
    for rec in data {
        rec.validate(reference.spec.data_dim, reference.spec.cond_dim)?;
    }
    cfg.schedule.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let mut optim =
        OptimState::new(policy.params.len(), cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut rows = Vec::with_capacity(cfg.steps as usize);
    for n in 1..=cfg.steps {
        let batch: Vec<&PreferenceRecord> = (0..cfg.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        rows.push(align_step(
            &mut policy,
            reference,
            &mut optim,
            &batch,
            &cfg.schedule,
            n,
            cfg.method,
            cfg.shared_t,
            &mut rng,
        )?);
    }
    Ok((policy, rows))
}
