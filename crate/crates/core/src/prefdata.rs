//! Off-policy preference data: noise-tracked sample pairs from the frozen
//! reference model, labelled by a synthetic reward.
//!
//! Every record stores the exact prior noise that produced each sample, so
//! replaying `euler_sample(reference, noise, cond)` reproduces the sample
//! bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::numerics::{dot, sq_dist, Model, VelocityField};
use crate::rectflow::{euler_sample_final, standard_normal, SamplerConfig};
use crate::{seeded_rng, Error, Result};

/// One training example: condition, winner/loser samples, the prior noises
/// that generated them, and the reward gap (always `>= 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub cond: Vec<f64>,
    pub x0_w: Vec<f64>,
    pub x0_l: Vec<f64>,
    pub noise_w: Vec<f64>,
    pub noise_l: Vec<f64>,
    pub delta_r: f64,
}

impl PreferenceRecord {
    pub fn validate(&self, dim: usize, cdim: usize) -> Result<()> {
        if self.cond.len() != cdim {
            return Err(Error::shape("record condition", cdim, self.cond.len()));
        }
        for v in [&self.x0_w, &self.x0_l, &self.noise_w, &self.noise_l] {
            if v.len() != dim {
                return Err(Error::shape("record vector", dim, v.len()));
            }
        }
        if self.delta_r.is_nan() || self.delta_r < 0.0 {
            return Err(Error::Data(format!("negative reward gap {}", self.delta_r)));
        }
        Ok(())
    }
}

/// Analytic stand-in for a learned reward model. Per-condition parameters
/// are indexed by the argmax of the (one-hot) condition vector; a single
/// entry applies to every condition.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardSpec {
    /// `-‖x - target(c)‖`
    ModeDistance { targets: Vec<Vec<f64>> },
    /// `-(x - μ(c))ᵀ A (x - μ(c))`, `A` row-major and positive semidefinite
    QuadraticBowl {
        means: Vec<Vec<f64>>,
        matrix: Vec<f64>,
    },
    /// `⟨d(c), x⟩`
    DirectionDot { directions: Vec<Vec<f64>> },
}

impl RewardSpec {
    /// Parses `kind` plus `params`: groups separated by `;`, numbers by `,`.
    /// For `quadratic_bowl` the last group is the matrix.
    pub fn parse(kind: &str, params: &str) -> Result<Self> {
        let groups: Vec<Vec<f64>> = params
            .split(';')
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .map(|g| {
                g.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad reward parameter {v:?}")))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let spec = match kind {
            "mode_distance" => RewardSpec::ModeDistance { targets: groups },
            "direction_dot" => RewardSpec::DirectionDot { directions: groups },
            "quadratic_bowl" => {
                let mut groups = groups;
                let matrix = groups
                    .pop()
                    .ok_or_else(|| Error::Config("quadratic_bowl needs a matrix group".into()))?;
                RewardSpec::QuadraticBowl {
                    means: groups,
                    matrix,
                }
            }
            other => return Err(Error::Config(format!("unknown reward kind {other:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RewardSpec::ModeDistance { .. } => "mode_distance",
            RewardSpec::QuadraticBowl { .. } => "quadratic_bowl",
            RewardSpec::DirectionDot { .. } => "direction_dot",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let groups = match self {
            RewardSpec::ModeDistance { targets } => targets,
            RewardSpec::DirectionDot { directions } => directions,
            RewardSpec::QuadraticBowl { means, matrix } => {
                let d = means.first().map_or(0, Vec::len);
                if matrix.len() != d * d {
                    return Err(Error::Config(format!(
                        "quadratic_bowl matrix has {} entries, expected {}",
                        matrix.len(),
                        d * d
                    )));
                }
                if !is_psd(matrix, d) {
                    return Err(Error::Config(
                        "quadratic_bowl matrix is not positive semidefinite".into(),
                    ));
                }
                means
            }
        };
        let Some(first) = groups.first() else {
            return Err(Error::Config(
                "reward needs at least one parameter group".into(),
            ));
        };
        if groups.iter().any(|g| g.len() != first.len()) {
            return Err(Error::Config(
                "reward parameter groups differ in length".into(),
            ));
        }
        if !groups.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Config("reward parameters must be finite".into()));
        }
        Ok(())
    }

    fn group<'a>(groups: &'a [Vec<f64>], c: &[f64]) -> Result<&'a [f64]> {
        if groups.len() == 1 {
            return Ok(&groups[0]);
        }
        let k = argmax(c);
        groups
            .get(k)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no reward parameters for condition {k}")))
    }
}

fn argmax(c: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in c.iter().enumerate() {
        if v > c[best] {
            best = i;
        }
    }
    best
}

// Cholesky of A + tiny ridge; symmetric and factorable means PSD up to the ridge.
fn is_psd(a: &[f64], d: usize) -> bool {
    for i in 0..d {
        for j in 0..i {
            if (a[i * d + j] - a[j * d + i]).abs() > 1e-12 * (1.0 + a[i * d + j].abs()) {
                return false;
            }
        }
    }
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                let s = s + 1e-10;
                if s <= 0.0 {
                    return false;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    true
}

/// Scalar reward of sample `x` under condition `c`.
pub fn reward_eval(spec: &RewardSpec, x: &[f64], c: &[f64]) -> Result<f64> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("reward input is not finite".into()));
    }
    let check = |p: &[f64]| {
        if p.len() != x.len() {
            Err(Error::shape("reward parameters", p.len(), x.len()))
        } else {
            Ok(())
        }
    };
    match spec {
        RewardSpec::ModeDistance { targets } => {
            let t = RewardSpec::group(targets, c)?;
            check(t)?;
            Ok(-sq_dist(x, t).sqrt())
        }
        RewardSpec::DirectionDot { directions } => {
            let d = RewardSpec::group(directions, c)?;
            check(d)?;
            Ok(dot(d, x))
        }
        RewardSpec::QuadraticBowl { means, matrix } => {
            let mu = RewardSpec::group(means, c)?;
            check(mu)?;
            let n = mu.len();
            let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
            let mut q = 0.0;
            for i in 0..n {
                for j in 0..n {
                    q += diff[i] * matrix[i * n + j] * diff[j];
                }
            }
            Ok(-q)
        }
    }
}

/// Two samples from the reference model together with their prior noises.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePair {
    pub x_a: Vec<f64>,
    pub noise_a: Vec<f64>,
    pub x_b: Vec<f64>,
    pub noise_b: Vec<f64>,
}

/// Draws two independent standard-normal noises from `seed` and samples
/// each through the reference model.
pub fn generate_pair(
    reference: &Model,
    c: &[f64],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<NoisePair> {
    let mut rng = seeded_rng(seed);
    let d = reference.data_dim();
    let noise_a = standard_normal(&mut rng, d);
    let noise_b = standard_normal(&mut rng, d);
    let x_a = euler_sample_final(reference, &noise_a, c, cfg)?;
    let x_b = euler_sample_final(reference, &noise_b, c, cfg)?;
    Ok(NoisePair {
        x_a,
        noise_a,
        x_b,
        noise_b,
    })
}

/// Orders a pair by reward. Ties keep `a` as the winner with a zero gap.
pub fn label_pair(spec: &RewardSpec, pair: NoisePair, c: &[f64]) -> Result<PreferenceRecord> {
    let ra = reward_eval(spec, &pair.x_a, c)?;
    let rb = reward_eval(spec, &pair.x_b, c)?;
    if !(ra.is_finite() && rb.is_finite()) {
        return Err(Error::Data("non-finite reward".into()));
    }
    let NoisePair {
        x_a,
        noise_a,
        x_b,
        noise_b,
    } = pair;
    let rec = if rb > ra {
        PreferenceRecord {
            cond: c.to_vec(),
            x0_w: x_b,
            x0_l: x_a,
            noise_w: noise_b,
            noise_l: noise_a,
            delta_r: rb - ra,
        }
    } else {
        PreferenceRecord {
            cond: c.to_vec(),
            x0_w: x_a,
            x0_l: x_b,
            noise_w: noise_a,
            noise_l: noise_b,
            delta_r: ra - rb,
        }
    };
    Ok(rec)
}

/// Seed used for record `i` of a dataset built from `base_seed`.
pub fn record_seed(base_seed: u64, i: usize) -> u64 {
    base_seed.wrapping_add(i as u64)
}

/// Builds `n` labelled records. Record `i` draws its condition (uniform over
/// `conditions`) and both noises from `record_seed(base_seed, i)`, so the
/// output does not depend on how many workers run.
pub fn generate_dataset(
    reference: &Model,
    reward: &RewardSpec,
    conditions: &[Vec<f64>],
    cfg: &SamplerConfig,
    n: usize,
    base_seed: u64,
) -> Result<Vec<PreferenceRecord>> {
    if conditions.is_empty() {
        return Err(Error::Config("need at least one condition".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = record_seed(base_seed, i);
            let mut crng = seeded_rng(seed);
            crng.set_stream(1);
            let c = &conditions[crng.random_range(0..conditions.len())];
            let pair = generate_pair(reference, c, cfg, seed)?;
            label_pair(reward, pair, c)
        })
        .collect()
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub dim: usize,
    pub cdim: usize,
    pub steps: usize,
    pub refhash: String,
}

impl DatasetHeader {
    fn render(&self) -> String {
        format!(
            "rfpnapo-pairs v1 dim={} cdim={} steps={} refhash={}",
            self.dim, self.cdim, self.steps, self.refhash
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            line: 1,
            msg: msg.to_string(),
        };
        let mut parts = line.split_whitespace();
        if parts.next() != Some("rfpnapo-pairs") || parts.next() != Some("v1") {
            return Err(bad("expected 'rfpnapo-pairs v1' header"));
        }
        let mut field = |key: &str| -> Result<String> {
            let tok = parts
                .next()
                .ok_or_else(|| bad(&format!("missing {key}=")))?;
            tok.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected {key}=, found {tok:?}")))
        };
        let num = |s: String, key: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(&format!("{key} is not an integer")))
        };
        let dim = num(field("dim")?, "dim")?;
        let cdim = num(field("cdim")?, "cdim")?;
        let steps = num(field("steps")?, "steps")?;
        let refhash = field("refhash")?;
        if !refhash.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(bad("refhash must be hex"));
        }
        Ok(DatasetHeader {
            dim,
            cdim,
            steps,
            refhash,
        })
    }
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_vec(out: &mut String, v: &[f64]) {
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&fmt_real(*x));
    }
}

pub fn write_dataset<W: Write>(
    mut w: W,
    header: &DatasetHeader,
    records: &[PreferenceRecord],
) -> Result<()> {
    let mut out = header.render();
    out.push('\n');
    for rec in records {
        rec.validate(header.dim, header.cdim)?;
        for (i, v) in [&rec.cond, &rec.x0_w, &rec.x0_l, &rec.noise_w, &rec.noise_l]
            .into_iter()
            .enumerate()
        {
            if i > 0 {
                out.push_str(" | ");
            }
            push_vec(&mut out, v);
        }
        let _ = write!(out, " | {}", fmt_real(rec.delta_r));
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<(DatasetHeader, Vec<PreferenceRecord>)> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })??;
    let header = DatasetHeader::parse(&first)?;
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split(" | ").collect();
        if fields.len() != 6 {
            return Err(perr(format!("expected 6 fields, found {}", fields.len())));
        }
        let parse_vec = |s: &str, want: usize, what: &str| -> Result<Vec<f64>> {
            let v = s
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| perr(format!("bad number {t:?} in {what}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if v.len() != want {
                return Err(perr(format!(
                    "{what} has {} values, expected {want}",
                    v.len()
                )));
            }
            Ok(v)
        };
        let rec = PreferenceRecord {
            cond: parse_vec(fields[0], header.cdim, "condition")?,
            x0_w: parse_vec(fields[1], header.dim, "x0_w")?,
            x0_l: parse_vec(fields[2], header.dim, "x0_l")?,
            noise_w: parse_vec(fields[3], header.dim, "noise_w")?,
            noise_l: parse_vec(fields[4], header.dim, "noise_l")?,
            delta_r: parse_vec(fields[5], 1, "delta_r")?[0],
        };
        if rec.delta_r.is_nan() || rec.delta_r < 0.0 {
            return Err(perr(format!("negative reward gap {}", rec.delta_r)));
        }
        records.push(rec);
    }
    Ok((header, records))
}

/// `min(k, n)` distinct record indices drawn from `seed`, ascending.
pub fn audit_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Replays every stored noise through the reference model and checks the
/// stored samples are reproduced exactly. Returns the first failing index.
pub fn audit_dataset(
    reference: &Model,
    cfg: &SamplerConfig,
    records: &[PreferenceRecord],
    indices: impl IntoIterator<Item = usize>,
) -> Result<std::result::Result<(), usize>> {
    for i in indices {
        let rec = &records[i];
        let w = euler_sample_final(reference, &rec.noise_w, &rec.cond, cfg)?;
        let l = euler_sample_final(reference, &rec.noise_l, &rec.cond, cfg)?;
        if w != rec.x0_w || l != rec.x0_l || rec.delta_r.is_nan() || rec.delta_r < 0.0 {
            return Ok(Err(i));
        }
    }
    Ok(Ok(()))
}
