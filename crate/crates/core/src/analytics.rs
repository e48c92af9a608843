//! Verification oracles and evaluation.
//!
//! The KL checks run on small finite chains where every path can be
//! enumerated, so both sides of each identity are exact up to roundoff.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::baselines::DpoSampleDraw;
use crate::numerics::Model;
use crate::pnapo::{branch, score};
use crate::prefdata::{reward_eval, PreferenceRecord, RewardSpec};
use crate::rectflow::{euler_sample_final, standard_normal, SamplerConfig};
use crate::{seeded_rng, Error, Result};

/// Two joint distributions `q(x_{1:T} | x0)` and `p(x_{1:T} | x0)` over a
/// finite state space, each built as a terminal distribution
/// `π(x_T | x0)` followed by reverse kernels `K_t(x_t | x_{t+1})`.
///
/// All matrices are row-major `S × S`; rows index the conditioning state.
/// `*_kernels[t - 1]` holds the kernel producing `x_t`, for `t = 1..T-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularChain {
    pub n_states: usize,
    pub horizon: usize,
    pub p_terminal: Vec<f64>,
    pub p_kernels: Vec<Vec<f64>>,
    pub q_terminal: Vec<f64>,
    pub q_kernels: Vec<Vec<f64>>,
}

pub const MAX_STATES: usize = 6;
pub const MAX_HORIZON: usize = 4;

impl TabularChain {
    /// Independent random `p` and `q` with Dirichlet(1) rows, smoothed so
    /// every entry is strictly positive.
    pub fn random(seed: u64, n_states: usize, horizon: usize) -> Result<Self> {
        check_size(n_states, horizon)?;
        let mut rng = seeded_rng(seed);
        let mut matrix = || random_stochastic(&mut rng, n_states);
        let p_terminal = matrix();
        let p_kernels = (1..horizon).map(|_| matrix()).collect();
        let q_terminal = matrix();
        let q_kernels = (1..horizon).map(|_| matrix()).collect();
        let chain = TabularChain {
            n_states,
            horizon,
            p_terminal,
            p_kernels,
            q_terminal,
            q_kernels,
        };
        chain.validate()?;
        Ok(chain)
    }

    /// Replaces `q`'s terminal distribution with `p`'s.
    pub fn with_matched_endpoints(mut self) -> Self {
        self.q_terminal = self.p_terminal.clone();
        self
    }

    /// Makes `q` an exact copy of `p`.
    pub fn with_q_equal_p(mut self) -> Self {
        self.q_terminal = self.p_terminal.clone();
        self.q_kernels = self.p_kernels.clone();
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_size(self.n_states, self.horizon)?;
        let s = self.n_states;
        if self.p_kernels.len() + 1 != self.horizon || self.q_kernels.len() + 1 != self.horizon {
            return Err(Error::Config("kernel count must be horizon - 1".into()));
        }
        let all = std::iter::once(&self.p_terminal)
            .chain(&self.p_kernels)
            .chain(std::iter::once(&self.q_terminal))
            .chain(&self.q_kernels);
        for m in all {
            if m.len() != s * s {
                return Err(Error::shape("chain matrix", s * s, m.len()));
            }
            for row in m.chunks(s) {
                if row.iter().any(|&v| v.is_nan() || v <= 0.0) {
                    return Err(Error::Data(
                        "chain entries must be strictly positive".into(),
                    ));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Data(format!("chain row sums to {sum}")));
                }
            }
        }
        Ok(())
    }

    fn path_prob(&self, terminal: &[f64], kernels: &[Vec<f64>], x0: usize, path: &[usize]) -> f64 {
        let s = self.n_states;
        let t_len = self.horizon;
        // path[k] = x_{k+1}
        let mut prob = terminal[x0 * s + path[t_len - 1]];
        for t in 1..t_len {
            prob *= kernels[t - 1][path[t] * s + path[t - 1]];
        }
        prob
    }

    /// Every path `(x_1, ..., x_T)` with its `q` and `p` probabilities.
    fn enumerate(&self, x0: usize) -> Vec<(Vec<usize>, f64, f64)> {
        let s = self.n_states;
        let total = s.pow(self.horizon as u32);
        (0..total)
            .map(|mut code| {
                let mut path = vec![0; self.horizon];
                for slot in path.iter_mut() {
                    *slot = code % s;
                    code /= s;
                }
                let q = self.path_prob(&self.q_terminal, &self.q_kernels, x0, &path);
                let p = self.path_prob(&self.p_terminal, &self.p_kernels, x0, &path);
                (path, q, p)
            })
            .collect()
    }
}

fn check_size(n_states: usize, horizon: usize) -> Result<()> {
    if n_states == 0 || n_states > MAX_STATES || horizon == 0 || horizon > MAX_HORIZON {
        return Err(Error::Config(format!(
            "tabular chain needs 1 <= S <= {MAX_STATES} and 1 <= T <= {MAX_HORIZON}, got S={n_states}, T={horizon}"
        )));
    }
    Ok(())
}

fn random_stochastic(rng: &mut crate::SeededRng, s: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(s * s);
    for _ in 0..s {
        let row: Vec<f64> = (0..s).map(|_| rng.sample::<f64, _>(Exp1) + 1e-4).collect();
        let sum: f64 = row.iter().sum();
        m.extend(row.iter().map(|v| v / sum));
    }
    m
}

/// The three terms of the KL chain rule for one starting state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainRuleTerms {
    /// `KL(q(x_{1:T}|x0) ‖ p(x_{1:T}|x0))`
    pub total: f64,
    /// `KL(q(x_T|x0) ‖ p(x_T|x0))`
    pub endpoint: f64,
    /// `E_{q(x_T|x0)} KL(q(x_{1:T-1}|x0,x_T) ‖ p(x_{1:T-1}|x0,x_T))`
    pub conditional: f64,
}

struct Decomposition {
    terms: ChainRuleTerms,
    /// `KL(q(·|x0,x_T) ‖ p(·|x0,x_T))` per terminal state
    per_terminal: Vec<f64>,
    p_terminal: Vec<f64>,
}

fn decompose(chain: &TabularChain, x0: usize) -> Decomposition {
    let s = chain.n_states;
    let paths = chain.enumerate(x0);
    let last = chain.horizon - 1;
    let mut q_t = vec![0.0; s];
    let mut p_t = vec![0.0; s];
    for (path, q, p) in &paths {
        q_t[path[last]] += q;
        p_t[path[last]] += p;
    }
    let total: f64 = paths.iter().map(|(_, q, p)| q * (q / p).ln()).sum();
    let endpoint: f64 = q_t.iter().zip(&p_t).map(|(q, p)| q * (q / p).ln()).sum();
    let mut per_terminal = vec![0.0; s];
    for (path, q, p) in &paths {
        let xt = path[last];
        let qc = q / q_t[xt];
        let pc = p / p_t[xt];
        per_terminal[xt] += qc * (qc / pc).ln();
    }
    let conditional = q_t.iter().zip(&per_terminal).map(|(w, k)| w * k).sum();
    Decomposition {
        terms: ChainRuleTerms {
            total,
            endpoint,
            conditional,
        },
        per_terminal,
        p_terminal: p_t,
    }
}

/// Enumerates the chain rule of KL for starting state `x0`.
pub fn chain_rule_identity(chain: &TabularChain, x0: usize) -> Result<ChainRuleTerms> {
    chain.validate()?;
    if x0 >= chain.n_states {
        return Err(Error::Config(format!("x0 = {x0} out of range")));
    }
    Ok(decompose(chain, x0).terms)
}

/// Builds a random chain from `seed` with `q`'s endpoint marginal set to
/// `p`'s, and returns, averaged over a uniform starting state:
///
/// - `lhs = E_{p(x_T|x0)} KL(q(x_{1:T-1}|x0,x_T) ‖ p(x_{1:T-1}|x0,x_T))`
/// - `rhs = KL(q(x_{1:T}|x0) ‖ p(x_{1:T}|x0))`
pub fn tabular_kl_check(seed: u64, n_states: usize, horizon: usize) -> Result<(f64, f64)> {
    let chain = TabularChain::random(seed, n_states, horizon)?.with_matched_endpoints();
    kl_sides(&chain)
}

/// The `(lhs, rhs)` pair of [`tabular_kl_check`] for a given chain.
pub fn kl_sides(chain: &TabularChain) -> Result<(f64, f64)> {
    chain.validate()?;
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for x0 in 0..chain.n_states {
        let d = decompose(chain, x0);
        lhs += d
            .p_terminal
            .iter()
            .zip(&d.per_terminal)
            .map(|(w, k)| w * k)
            .sum::<f64>();
        rhs += d.terms.total;
    }
    let s = chain.n_states as f64;
    Ok((lhs / s, rhs / s))
}

/// `s_w - s_l` with both branches on their stored endpoints at time `t`.
pub fn pnapo_delta_s(
    model: &Model,
    reference: &Model,
    rec: &PreferenceRecord,
    t: f64,
) -> Result<f64> {
    let sw = score(model, reference, &rec.x0_w, &rec.noise_w, &rec.cond, t)?;
    let sl = score(model, reference, &rec.x0_l, &rec.noise_l, &rec.cond, t)?;
    Ok(sw - sl)
}

/// `s_w - s_l` with both branches on fresh noise.
pub fn dpo_delta_s(
    model: &Model,
    reference: &Model,
    rec: &PreferenceRecord,
    draw: &DpoSampleDraw,
) -> Result<f64> {
    let sw = branch(model, reference, &rec.x0_w, &draw.eps_w, &rec.cond, draw.t)?.score;
    let sl = branch(model, reference, &rec.x0_l, &draw.eps_l, &rec.cond, draw.t)?.score;
    Ok(sw - sl)
}

/// How `t` is chosen in [`estimator_variance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeDraw {
    Uniform,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorVariance {
    pub var_pnapo: f64,
    pub var_dpo: f64,
}

impl EstimatorVariance {
    /// `var_dpo / var_pnapo`; infinite when PNAPO's variance is zero.
    pub fn ratio(&self) -> f64 {
        self.var_dpo / self.var_pnapo
    }
}

/// Unbiased sample variance. Shifted by the first sample so a constant
/// sequence gives exactly zero.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let shift = xs.first().copied().unwrap_or(0.0);
    let mean = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    xs.iter().map(|x| (x - shift - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Sample variance of the score difference under the PNAPO estimator
/// (stored endpoints) and the DPO estimator (fresh noise per branch), over
/// `n_draws` draws each.
pub fn estimator_variance(
    model: &Model,
    reference: &Model,
    rec: &PreferenceRecord,
    n_draws: usize,
    seed: u64,
    time: TimeDraw,
) -> Result<EstimatorVariance> {
    if n_draws < 2 {
        return Err(Error::Config(
            "estimator_variance needs n_draws >= 2".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    let dim = rec.x0_w.len();
    let pick_t = |rng: &mut crate::SeededRng| match time {
        TimeDraw::Uniform => rng.random::<f64>(),
        TimeDraw::Fixed(t) => t,
    };
    let mut pn = Vec::with_capacity(n_draws);
    let mut dp = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let t = pick_t(&mut rng);
        pn.push(pnapo_delta_s(model, reference, rec, t)?);
        let mut draw = DpoSampleDraw::sample(dim, &mut rng);
        draw.t = pick_t(&mut rng);
        if let TimeDraw::Fixed(t) = time {
            draw.t = t;
        }
        dp.push(dpo_delta_s(model, reference, rec, &draw)?);
    }
    Ok(EstimatorVariance {
        var_pnapo: sample_variance(&pn),
        var_dpo: sample_variance(&dp),
    })
}

/// Aggregate reward statistics for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_reward: f64,
    pub median_reward: f64,
    /// Paired win rate against a comparison model, when one was given.
    pub win_rate: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

/// Evaluation noises: condition-major, `n_per_condition` per condition,
/// drawn sequentially from `seed`. Shared by every model evaluated with the
/// same seed, which is what makes win rates paired.
pub fn eval_noises(
    dim: usize,
    n_conditions: usize,
    n_per_condition: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    (0..n_conditions * n_per_condition)
        .map(|_| standard_normal(&mut rng, dim))
        .collect()
}

/// Rewards of samples drawn from `model`, in [`eval_noises`] order.
pub fn sample_rewards(
    model: &Model,
    reward: &RewardSpec,
    conditions: &[Vec<f64>],
    n_per_condition: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_per_condition == 0 {
        return Err(Error::Config(
            "need at least one sample per condition".into(),
        ));
    }
    if conditions.is_empty() {
        return Err(Error::Config("need at least one condition".into()));
    }
    let noises = eval_noises(model.spec.data_dim, conditions.len(), n_per_condition, seed);
    noises
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let c = &conditions[i / n_per_condition];
            let x = euler_sample_final(model, z, c, cfg)?;
            reward_eval(reward, &x, c)
        })
        .collect()
}

pub fn summarize(rewards: &[f64], seed: u64) -> EvalReport {
    let n = rewards.len();
    let mut sorted = rewards.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    EvalReport {
        mean_reward: crate::numerics::pairwise_sum(rewards) / n as f64,
        median_reward: median,
        win_rate: None,
        n_samples: n,
        seed,
    }
}

pub fn eval_reward(
    model: &Model,
    reward: &RewardSpec,
    conditions: &[Vec<f64>],
    n_per_condition: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<EvalReport> {
    let r = sample_rewards(model, reward, conditions, n_per_condition, cfg, seed)?;
    Ok(summarize(&r, seed))
}

/// Fraction of paired trials where `a` scores strictly higher; ties count ½.
pub fn paired_win_rate(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("paired rewards", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let wins: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(wins / a.len() as f64)
}

/// Paired win rate of `a` over `b`: both models see the same noises.
#[allow(clippy::too_many_arguments)]
pub fn win_rate(
    a: &Model,
    b: &Model,
    reward: &RewardSpec,
    conditions: &[Vec<f64>],
    n_per_condition: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<f64> {
    let ra = sample_rewards(a, reward, conditions, n_per_condition, cfg, seed)?;
    let rb = sample_rewards(b, reward, conditions, n_per_condition, cfg, seed)?;
    paired_win_rate(&ra, &rb)
}
