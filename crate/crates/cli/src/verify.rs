//! Built-in verification suites with committed seeds.

use rfpnapo_core::analytics::{
    chain_rule_identity, estimator_variance, pnapo_delta_s, tabular_kl_check, TabularChain,
    TimeDraw,
};
use rfpnapo_core::numerics::{finite_diff_check, MlpSpec};
use rfpnapo_core::pnapo::{
    align, effective_beta, f_controller, g_controller, g_progress, AlignConfig, BetaSchedule,
    Method, PreferenceObjective, RecordDraw,
};
use rfpnapo_core::prefdata::{fmt_real, generate_dataset, RewardSpec};
use rfpnapo_core::rectflow::{
    pretrain, standard_normal, CfmObjective, FlowBatch, PretrainConfig, SamplerConfig, ToyMixture,
};
use rfpnapo_core::{seeded_rng, Error, Model, PreferenceRecord, Result};

pub const SUITES: &[&str] = &["gradcheck", "kl", "variance", "schedule"];

/// One report line.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
}

impl Check {
    fn close(name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            pass: (lhs - rhs).abs() <= tolerance,
            lhs,
            rhs,
            tolerance,
        }
    }

    /// Passes when `lhs <= rhs + tolerance`.
    fn at_most(name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            pass: lhs <= rhs + tolerance,
            lhs,
            rhs,
            tolerance,
        }
    }

    /// Passes when `lhs > rhs`.
    fn above(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Check {
            name: name.into(),
            pass: lhs > rhs,
            lhs,
            rhs,
            tolerance: 0.0,
        }
    }

    /// Always passes; carries a measured value.
    fn report(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Check {
            name: name.into(),
            pass: true,
            lhs,
            rhs,
            tolerance: f64::NAN,
        }
    }
}

pub fn format_report(checks: &[Check]) -> String {
    let mut out = String::from("name,status,lhs,rhs,tolerance\n");
    for c in checks {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            fmt_real(c.lhs),
            fmt_real(c.rhs),
            fmt_real(c.tolerance)
        ));
    }
    out
}

pub fn run_suite(name: &str) -> Result<Vec<Check>> {
    match name {
        "gradcheck" => gradcheck(),
        "kl" => kl(),
        "variance" => variance(),
        "schedule" => schedule(),
        other => Err(Error::Config(format!(
            "unknown suite {other:?}; expected one of {}",
            SUITES.join(", ")
        ))),
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

fn random_records(dim: usize, cdim: usize, n: usize, seed: u64) -> Vec<PreferenceRecord> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|i| {
            let mut cond = vec![0.0; cdim];
            cond[i % cdim] = 1.0;
            let x0_w = standard_normal(&mut rng, dim);
            let x0_l = standard_normal(&mut rng, dim);
            let noise_w = standard_normal(&mut rng, dim);
            let noise_l = standard_normal(&mut rng, dim);
            PreferenceRecord {
                cond,
                x0_w,
                x0_l,
                noise_w,
                noise_l,
                delta_r: 0.5 + i as f64 * 0.25,
            }
        })
        .collect()
}

fn gradcheck() -> Result<Vec<Check>> {
    let spec = MlpSpec::new(2, 2, vec![8, 8])?;
    let policy = Model::init(spec.clone(), 101)?;
    let reference = Model::init(spec.clone(), 202)?;
    let mut checks = vec![Check::at_most(
        "param_count",
        spec.param_count() as f64,
        1e3,
        0.0,
    )];

    let mut rng = seeded_rng(303);
    let mut batch = FlowBatch::default();
    for i in 0..8 {
        let mut c = vec![0.0; 2];
        c[i % 2] = 1.0;
        let x0 = standard_normal(&mut rng, 2);
        let noise = standard_normal(&mut rng, 2);
        batch.push(x0, noise, c, 0.05 + 0.9 * (i as f64 + 0.5) / 8.0);
    }
    let cfm = CfmObjective {
        model: &policy,
        batch: &batch,
    };
    checks.push(Check::at_most(
        "gradcheck_cfm",
        finite_diff_check(&cfm, &policy.params, FD_STEP)?,
        0.0,
        FD_TOLERANCE,
    ));

    let records = random_records(2, 2, 6, 404);
    let refs: Vec<&PreferenceRecord> = records.iter().collect();
    for method in [Method::Pnapo, Method::Dpo, Method::Sft] {
        let mut rng = seeded_rng(505);
        let draws = refs
            .iter()
            .map(|_| RecordDraw::sample(method, true, 2, &mut rng))
            .collect();
        let obj = PreferenceObjective {
            template: &policy,
            reference: &reference,
            method,
            records: refs.clone(),
            draws,
            betas: vec![0.8; refs.len()],
        };
        let err = finite_diff_check(&obj, &policy.params, FD_STEP)?;
        checks.push(Check::at_most(
            format!("gradcheck_{}", method.name()),
            err,
            0.0,
            FD_TOLERANCE,
        ));
        if method != Method::Sft {
            // At the reference point σ(0) = ½, so the gradient is (β/2)(∇s_w − ∇s_l).
            let at_ref = PreferenceObjective {
                template: &reference,
                ..obj
            };
            let err = finite_diff_check(&at_ref, &reference.params, FD_STEP)?;
            checks.push(Check::at_most(
                format!("gradcheck_{}_at_reference", method.name()),
                err,
                0.0,
                FD_TOLERANCE,
            ));
        }
    }
    Ok(checks)
}

pub const KL_INSTANCES: u64 = 100;

fn kl() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for seed in 0..KL_INSTANCES {
        let (lhs, rhs) = tabular_kl_check(seed, 4, 3)?;
        checks.push(Check::at_most(
            format!("kl_inequality_{seed}"),
            lhs,
            rhs,
            1e-9,
        ));
        let chain = TabularChain::random(seed, 4, 3)?.with_matched_endpoints();
        let mut worst = (0.0, 0.0, -1.0);
        for x0 in 0..4 {
            let t = chain_rule_identity(&chain, x0)?;
            let gap = (t.total - t.endpoint - t.conditional).abs();
            if gap > worst.2 {
                worst = (t.total, t.endpoint + t.conditional, gap);
            }
        }
        checks.push(Check::close(
            format!("kl_chain_rule_{seed}"),
            worst.0,
            worst.1,
            1e-10,
        ));
    }
    Ok(checks)
}

pub const VARIANCE_DRAWS: usize = 1000;

/// A small reference model and a policy aligned away from it.
pub fn variance_fixture() -> Result<(Model, Model, Vec<PreferenceRecord>)> {
    let mixture = ToyMixture::new(2, 4, 2, 3.0, 0.3)?;
    let spec = MlpSpec::new(2, 4, vec![16, 16])?;
    let pcfg = PretrainConfig {
        steps: 400,
        batch: 64,
        lr: 3e-3,
        weight_decay: 0.0,
        seed: 11,
    };
    let (reference, _) = pretrain(Model::init(spec, 11)?, &mixture, &pcfg)?;
    let reward = RewardSpec::ModeDistance {
        targets: (0..4)
            .map(|k| mixture.mode_centers(k).swap_remove(0))
            .collect(),
    };
    let sampler = SamplerConfig { steps: 20 };
    let data = generate_dataset(
        &reference,
        &reward,
        &mixture.condition_vectors(),
        &sampler,
        64,
        12,
    )?;
    let acfg = AlignConfig {
        schedule: BetaSchedule::fixed(5.0)?,
        steps: 50,
        batch_size: 16,
        lr: 1e-3,
        weight_decay: 0.0,
        seed: 13,
        method: Method::Pnapo,
        shared_t: true,
    };
    let (policy, _) = align(reference.clone(), &reference, &data, &acfg)?;
    Ok((reference, policy, data))
}

fn variance() -> Result<Vec<Check>> {
    let (reference, policy, data) = variance_fixture()?;
    let rec = data
        .iter()
        .max_by(|a, b| a.delta_r.total_cmp(&b.delta_r))
        .expect("non-empty fixture");
    let first = pnapo_delta_s(&policy, &reference, rec, 0.5)?;
    let mut identical = 0usize;
    for _ in 0..VARIANCE_DRAWS {
        if pnapo_delta_s(&policy, &reference, rec, 0.5)?.to_bits() == first.to_bits() {
            identical += 1;
        }
    }
    let fixed = estimator_variance(
        &policy,
        &reference,
        rec,
        VARIANCE_DRAWS,
        21,
        TimeDraw::Fixed(0.5),
    )?;
    let uniform = estimator_variance(
        &policy,
        &reference,
        rec,
        VARIANCE_DRAWS,
        22,
        TimeDraw::Uniform,
    )?;
    Ok(vec![
        Check::close(
            "pnapo_repeat_bit_identical",
            identical as f64,
            VARIANCE_DRAWS as f64,
            0.0,
        ),
        Check::close("pnapo_variance_fixed_t", fixed.var_pnapo, 0.0, 0.0),
        Check::above("dpo_variance_fixed_t", fixed.var_dpo, 0.0),
        Check::report(
            "variance_uniform_t_pnapo_vs_dpo",
            uniform.var_pnapo,
            uniform.var_dpo,
        ),
        Check::report(
            "variance_ratio_dpo_over_pnapo_uniform_t",
            uniform.ratio(),
            f64::NAN,
        ),
    ])
}

pub const GRID_POINTS: usize = 10_000;

fn schedule() -> Result<Vec<Check>> {
    let (n1, n2) = (1000u64, 2000u64);
    let mut checks = vec![
        Check::close("f_at_0", f_controller(0.0)?, 0.0, 0.0),
        Check::close("f_at_ln3", f_controller(3f64.ln())?, 0.5, 1e-12),
        Check::above("f_at_10", f_controller(10.0)?, 0.9999),
        Check::close("g_at_500", g_controller(500, n1, n2)?, 1.0, 0.0),
        Check::close("g_at_n1", g_controller(n1, n1, n2)?, 1.0, 1e-12),
        Check::close("g_at_n2", g_controller(n2, n1, n2)?, 0.5, 1e-12),
        Check::close(
            "g_at_1500",
            g_controller(1500, n1, n2)?,
            0.8535533905932737,
            1e-12,
        ),
    ];
    let eps = 1e-10;
    checks.push(Check::close(
        "g_continuity_n1",
        g_progress(n1 as f64 + eps, n1, n2)?,
        g_progress(n1 as f64, n1, n2)?,
        1e-12,
    ));
    checks.push(Check::close(
        "g_continuity_n2",
        g_progress(n2 as f64 - eps, n1, n2)?,
        g_progress(n2 as f64, n1, n2)?,
        1e-12,
    ));

    let f_grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| f_controller(20.0 * i as f64 / (GRID_POINTS - 1) as f64))
        .collect::<Result<_>>()?;
    let min_step = f_grid
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    checks.push(Check::above(
        "f_strictly_increasing_min_step",
        min_step,
        0.0,
    ));

    let g_grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| g_progress(3000.0 * i as f64 / (GRID_POINTS - 1) as f64, n1, n2))
        .collect::<Result<_>>()?;
    let max_step = g_grid
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check::at_most(
        "g_nonincreasing_max_step",
        max_step,
        0.0,
        0.0,
    ));
    let (lo, hi) = g_grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &g| {
            (lo.min(g), hi.max(g))
        });
    checks.push(Check::close("g_range_min", lo, 0.5, 0.0));
    checks.push(Check::close("g_range_max", hi, 1.0, 0.0));

    let sched = BetaSchedule::new(2000.0, n1, n2, true)?;
    checks.push(Check::close(
        "effective_beta_ln3",
        effective_beta(&sched, 3f64.ln(), 500)?,
        1000.0,
        1e-9,
    ));
    let fixed = BetaSchedule::new(2000.0, n1, n2, false)?;
    checks.push(Check::close(
        "effective_beta_fixed",
        effective_beta(&fixed, 7.0, 1800)?,
        2000.0,
        0.0,
    ));
    checks.push(Check::close(
        "effective_beta_zero_gap",
        effective_beta(&sched, 0.0, 10)?,
        0.0,
        0.0,
    ));
    Ok(checks)
}
