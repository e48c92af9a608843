//! Comparison objectives that share the PNAPO trainer.
//!
//! - Diffusion-DPO in velocity form: same pairwise loss, but each branch is
//!   scored against fresh standard-normal noise instead of the stored prior
//!   noise. The record's noise fields are never read.
//! - SFT: plain flow matching on winner samples with fresh noise.

use rand::Rng;

use crate::numerics::{sq_dist, Model};
use crate::pnapo::{preference_term, RecordDraw};
use crate::prefdata::PreferenceRecord;
use crate::rectflow::{cfm_loss, interpolate, standard_normal, FlowBatch};
use crate::{Error, Result, SeededRng};

/// Fresh forward-process noise for one DPO evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoSampleDraw {
    pub eps_w: Vec<f64>,
    pub eps_l: Vec<f64>,
    pub t: f64,
}

impl DpoSampleDraw {
    pub fn sample(dim: usize, rng: &mut SeededRng) -> Self {
        let t = rng.random();
        let eps_w = standard_normal(rng, dim);
        let eps_l = standard_normal(rng, dim);
        DpoSampleDraw { eps_w, eps_l, t }
    }
}

/// `-log σ(-β (s_w - s_l))` with each branch interpolated toward `eps_*`.
pub fn dpo_loss(
    model: &Model,
    reference: &Model,
    rec: &PreferenceRecord,
    draw: &DpoSampleDraw,
    beta: f64,
) -> Result<f64> {
    let d = RecordDraw {
        t_w: draw.t,
        t_l: draw.t,
        eps_w: draw.eps_w.clone(),
        eps_l: draw.eps_l.clone(),
    };
    Ok(dpo_term(model, reference, rec, &d, beta, None)?.0)
}

pub(crate) fn dpo_term(
    model: &Model,
    reference: &Model,
    rec: &PreferenceRecord,
    d: &RecordDraw,
    beta: f64,
    grad: Option<(&mut [f64], f64)>,
) -> Result<(f64, f64)> {
    preference_term(
        model,
        reference,
        &rec.cond,
        (&rec.x0_w, &d.eps_w, d.t_w),
        (&rec.x0_l, &d.eps_l, d.t_l),
        beta,
        grad,
    )
}

/// Flow-matching loss on a winner batch. Identical to [`cfm_loss`].
pub fn sft_loss(model: &Model, winners: &FlowBatch) -> Result<f64> {
    cfm_loss(model, winners)
}

/// Builds the SFT batch: winner samples with fresh noise and fresh `t`.
pub fn sft_batch(records: &[&PreferenceRecord], rng: &mut SeededRng) -> Result<FlowBatch> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut b = FlowBatch::default();
    for rec in records {
        let t = rng.random();
        let eps = standard_normal(rng, rec.x0_w.len());
        b.push(rec.x0_w.clone(), eps, rec.cond.clone(), t);
    }
    Ok(b)
}

pub(crate) fn sft_term(
    model: &Model,
    x0: &[f64],
    eps: &[f64],
    c: &[f64],
    t: f64,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    let xt = interpolate(x0, eps, t)?;
    let u: Vec<f64> = eps.iter().zip(x0).map(|(e, a)| e - a).collect();
    let cache = model.forward_cached(&xt, t, c)?;
    let loss = sq_dist(cache.output(), &u);
    if let Some((g, scale)) = grad {
        let g_out: Vec<f64> = cache
            .output()
            .iter()
            .zip(&u)
            .map(|(v, u)| 2.0 * scale * (v - u))
            .collect();
        model.backward(&cache, &g_out, g);
    }
    Ok(loss)
}
