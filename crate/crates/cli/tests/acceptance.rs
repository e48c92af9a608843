//! End-to-end acceptance run. Every criterion prints one `PASS`/`FAIL` line;
//! the test fails if any hard criterion fails.
//!
//! Run with `cargo test -p rfpnapo-cli --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rfpnapo_cli::manifest::{manifest_path, metrics_path, read_manifest};
use rfpnapo_core::baselines::{dpo_loss, DpoSampleDraw};
use rfpnapo_core::config::RunConfig;
use rfpnapo_core::corpus::{planted_corpus, read_tsv, write_tsv, PlantedCorpusSpec};
use rfpnapo_core::numerics::read_checkpoint;
use rfpnapo_core::pnapo::pnapo_loss;
use rfpnapo_core::prefdata::{audit_dataset, read_dataset};
use rfpnapo_core::rectflow::SamplerConfig;
use rfpnapo_core::{seeded_rng, Model};
use serde_json::Value;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TOY_PAIRS: usize = 5000;
const WIN_RATE_THRESHOLD: f64 = 0.55;
const REQUIRED_SEEDS: usize = 4;
const E2E_BUDGET: Duration = Duration::from_secs(600);

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rfpnapo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfpnapo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Result<Output, String> {
    let o = rfpnapo(args);
    if o.status.success() {
        Ok(o)
    } else {
        Err(format!(
            "`rfpnapo {}` exited {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).trim()
        ))
    }
}

/// Copies a fixture config with `key = value` overrides applied.
fn config_with(src: &Path, dir: &Path, name: &str, overrides: &[(&str, String)]) -> PathBuf {
    let text = fs::read_to_string(src).unwrap();
    let mut lines: Vec<String> = text
        .lines()
        .filter(|l| {
            let key = l.split('=').next().unwrap().trim();
            !overrides.iter().any(|(k, _)| *k == key)
        })
        .map(str::to_string)
        .collect();
    lines.extend(overrides.iter().map(|(k, v)| format!("{k} = {v}")));
    let path = dir.join(name);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn load_model(path: &Path) -> Model {
    read_checkpoint(fs::File::open(path).unwrap()).unwrap()
}

/// `(mean_reward, win_rate)` per row of an eval CSV.
fn eval_rows(path: &Path) -> Vec<(f64, Option<f64>)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[3].parse().ok())
        })
        .collect()
}

struct SeedRun {
    seed: u64,
    reference: PathBuf,
    pairs: PathBuf,
    dynamic: PathBuf,
    fixed: PathBuf,
    ref_reward: f64,
    dynamic_reward: f64,
    fixed_reward: f64,
    win_rate: f64,
}

struct ToyRuns {
    runs: Vec<SeedRun>,
    /// Wall time of the PNAPO pipeline alone (pretrain, pairs, align, eval).
    pnapo_time: Duration,
}

fn align_and_eval(
    cfg: &Path,
    reference: &Path,
    pairs: &Path,
    out: &Path,
) -> Result<(f64, f64, f64), String> {
    run_ok(&[
        "align",
        "--config",
        s(cfg),
        "--method",
        "pnapo",
        "--model",
        s(reference),
        "--pairs",
        s(pairs),
        "--out",
        s(out),
    ])?;
    let csv = out.with_extension("eval.csv");
    run_ok(&[
        "eval",
        "--config",
        s(cfg),
        "--model",
        s(out),
        "--against",
        s(reference),
        "--out",
        s(&csv),
    ])?;
    let rows = eval_rows(&csv);
    Ok((rows[0].0, rows[1].0, rows[0].1.unwrap()))
}

fn toy_runs(dir: &Path) -> Result<ToyRuns, String> {
    let mut runs = Vec::new();
    let mut pnapo_time = Duration::ZERO;
    for seed in SEEDS {
        let d = dir.join(format!("seed{seed}"));
        fs::create_dir_all(&d).unwrap();
        let seed_str = seed.to_string();
        let cfg = config_with(
            &fixture("toy.conf"),
            &d,
            "toy.conf",
            &[("seed", seed_str.clone())],
        );
        let fixed_cfg = config_with(
            &fixture("ablation/fixed.conf"),
            &d,
            "fixed.conf",
            &[("seed", seed_str)],
        );
        let reference = d.join("reference.ckpt");
        let pairs = d.join("pairs.txt");
        let dynamic = d.join("dynamic.ckpt");
        let fixed = d.join("fixed.ckpt");

        let start = Instant::now();
        run_ok(&["pretrain", "--config", s(&cfg), "--out", s(&reference)])?;
        let n = TOY_PAIRS.to_string();
        run_ok(&[
            "gen-pairs",
            "--config",
            s(&cfg),
            "--model",
            s(&reference),
            "--n",
            &n,
            "--out",
            s(&pairs),
        ])?;
        let (dynamic_reward, ref_reward, win_rate) =
            align_and_eval(&cfg, &reference, &pairs, &dynamic)?;
        pnapo_time += start.elapsed();
        let (fixed_reward, _, _) = align_and_eval(&fixed_cfg, &reference, &pairs, &fixed)?;
        runs.push(SeedRun {
            seed,
            reference,
            pairs,
            dynamic,
            fixed,
            ref_reward,
            dynamic_reward,
            fixed_reward,
            win_rate,
        });
    }
    Ok(ToyRuns { runs, pnapo_time })
}

fn reference_point_identity(toy: &ToyRuns) -> Outcome {
    let run = &toy.runs[0];
    let reference = load_model(&run.reference);
    let (_, records) =
        read_dataset(fs::File::open(&run.pairs).unwrap()).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(17);
    let grid = [0.0, 1e-9, 0.25, 0.5, 0.75, 1.0 - 1e-9, 1.0];
    let mut worst = 0.0f64;
    let mut evaluated = 0usize;
    for rec in records.iter().take(500) {
        let draw = DpoSampleDraw::sample(rec.x0_w.len(), &mut rng);
        for t in grid.iter().copied().chain([draw.t]) {
            for beta in [1.0, 50.0, 2000.0] {
                let l =
                    pnapo_loss(&reference, &reference, rec, t, beta).map_err(|e| e.to_string())?;
                worst = worst.max((l - std::f64::consts::LN_2).abs());
                evaluated += 1;
            }
        }
        for beta in [1.0, 50.0, 2000.0] {
            let l =
                dpo_loss(&reference, &reference, rec, &draw, beta).map_err(|e| e.to_string())?;
            worst = worst.max((l - std::f64::consts::LN_2).abs());
            evaluated += 1;
        }
    }
    ensure!(
        worst <= 1e-9,
        "max |loss - ln 2| = {worst:.3e} over {evaluated} evaluations"
    );
    Ok(format!(
        "max |loss - ln 2| = {worst:.1e} over {evaluated} evaluations"
    ))
}

fn verify_suite(suite: &str, budget: Option<Duration>) -> Outcome {
    let start = Instant::now();
    let o = rfpnapo(&["verify", "--suite", suite]);
    let elapsed = start.elapsed();
    let report = String::from_utf8_lossy(&o.stdout).into_owned();
    let failed: Vec<&str> = report.lines().filter(|l| l.contains(",FAIL,")).collect();
    ensure!(
        o.status.success(),
        "exit {:?}; failing checks: {failed:?}",
        o.status.code()
    );
    if let Some(b) = budget {
        ensure!(elapsed < b, "took {elapsed:.1?}, budget {b:?}");
    }
    let checks = report.lines().count() - 1;
    Ok(format!("{checks} checks in {elapsed:.2?}"))
}

fn estimator_pinning() -> Outcome {
    let o = rfpnapo(&["verify", "--suite", "variance"]);
    let report = String::from_utf8_lossy(&o.stdout).into_owned();
    ensure!(o.status.success(), "exit {:?}\n{report}", o.status.code());
    let row = |name: &str| -> Result<Vec<String>, String> {
        report
            .lines()
            .find(|l| l.starts_with(name))
            .map(|l| l.split(',').map(str::to_string).collect())
            .ok_or_else(|| format!("no `{name}` row"))
    };
    let pnapo = row("pnapo_variance_fixed_t")?;
    let dpo = row("dpo_variance_fixed_t")?;
    let ratio = row("variance_ratio_dpo_over_pnapo_uniform_t")?;
    Ok(format!(
        "fixed t: var_pnapo={} var_dpo={}; uniform-t ratio var_dpo/var_pnapo={} (reported only)",
        pnapo[2], dpo[2], ratio[2]
    ))
}

fn fixture_config(name: &str) -> RunConfig {
    fs::read_to_string(fixture(name)).unwrap().parse().unwrap()
}

fn dataset_self_consistency(toy: &ToyRuns) -> Outcome {
    let steps = fixture_config("toy.conf")
        .sampler()
        .map_err(|e| e.to_string())?
        .steps;
    let mut total = 0;
    for run in &toy.runs {
        let reference = load_model(&run.reference);
        let (header, records) =
            read_dataset(fs::File::open(&run.pairs).unwrap()).map_err(|e| e.to_string())?;
        ensure!(
            header.steps == steps,
            "header steps {} != {steps}",
            header.steps
        );
        let audit = audit_dataset(
            &reference,
            &SamplerConfig { steps },
            &records,
            0..records.len(),
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            audit.is_ok(),
            "seed {}: record {} does not replay",
            run.seed,
            audit.unwrap_err()
        );
        ensure!(
            records.iter().all(|r| r.delta_r >= 0.0),
            "seed {}: negative delta_r",
            run.seed
        );
        total += records.len();
    }
    Ok(format!("{total} records replay exactly, all delta_r >= 0"))
}

fn toy_alignment(toy: &ToyRuns) -> Outcome {
    let mut lines = Vec::new();
    let mut passed = 0;
    for r in &toy.runs {
        let ok = r.dynamic_reward > r.ref_reward && r.win_rate > WIN_RATE_THRESHOLD;
        passed += ok as usize;
        lines.push(format!(
            "seed {}: ref {:.4} aligned {:.4} win_rate {:.3}{}",
            r.seed,
            r.ref_reward,
            r.dynamic_reward,
            r.win_rate,
            if ok { "" } else { " (miss)" }
        ));
    }
    let summary = format!(
        "{passed}/{} seeds, pipeline time {:.1?}\n      {}",
        toy.runs.len(),
        toy.pnapo_time,
        lines.join("\n      ")
    );
    ensure!(passed >= REQUIRED_SEEDS, "{summary}");
    ensure!(toy.pnapo_time < E2E_BUDGET, "over budget: {summary}");
    Ok(summary)
}

/// Hard part: both variants complete with comparable metrics. Soft part:
/// dynamic >= fixed in 3 of 5 seeds, reported either way.
fn ablation(toy: &ToyRuns) -> Result<(String, bool), String> {
    let mut wins = 0;
    let mut lines = Vec::new();
    for r in &toy.runs {
        let a = fs::read_to_string(metrics_path(&r.dynamic)).map_err(|e| e.to_string())?;
        let b = fs::read_to_string(metrics_path(&r.fixed)).map_err(|e| e.to_string())?;
        ensure!(
            a.lines().next() == b.lines().next(),
            "seed {}: metrics headers differ",
            r.seed
        );
        ensure!(
            a.lines().count() == b.lines().count(),
            "seed {}: metrics lengths differ",
            r.seed
        );
        let sched = |p: &Path| read_manifest(p).map(|m| m.details["schedule"].clone());
        ensure!(
            sched(&r.dynamic).ok() == Some(Value::from("f*g")),
            "seed {}: dynamic schedule label",
            r.seed
        );
        ensure!(
            sched(&r.fixed).ok() == Some(Value::from("fixed")),
            "seed {}: fixed schedule label",
            r.seed
        );
        let win = r.dynamic_reward >= r.fixed_reward;
        wins += win as usize;
        lines.push(format!(
            "seed {}: dynamic {:.4} fixed {:.4}{}",
            r.seed,
            r.dynamic_reward,
            r.fixed_reward,
            if win { "" } else { " (fixed ahead)" }
        ));
    }
    Ok((
        format!(
            "dynamic >= fixed in {wins}/{} seeds\n      {}",
            toy.runs.len(),
            lines.join("\n      ")
        ),
        wins >= 3,
    ))
}

fn corpus_pipeline(dir: &Path) -> Outcome {
    let planted = planted_corpus(&PlantedCorpusSpec::default(), 11).map_err(|e| e.to_string())?;
    let dim = planted.records[0].embedding.len();
    let input = dir.join("planted.tsv");
    let out = dir.join("resampled.tsv");
    let mut buf = Vec::new();
    write_tsv(&mut buf, &planted.records, dim).map_err(|e| e.to_string())?;
    fs::write(&input, buf).unwrap();
    let cfg = fixture("corpus.conf");
    run_ok(&[
        "corpus",
        "--config",
        s(&cfg),
        "--input",
        s(&input),
        "--out",
        s(&out),
    ])?;

    let m = read_manifest(&out).map_err(|e| e.message)?;
    let c = &m.details["stage_counts"];
    let got = |k: &str| c[k].as_u64().unwrap() as usize;
    let expected = [
        ("input", 1000),
        ("after_toxicity", planted.expected_after_toxicity),
        ("after_jaccard", planted.expected_after_jaccard),
        ("after_embedding", planted.expected_after_embedding),
    ];
    ensure!(
        (
            planted.expected_after_toxicity,
            planted.expected_after_jaccard,
            planted.expected_after_embedding
        ) == (850, 800, 760),
        "planted ground truth drifted"
    );
    for (k, want) in expected {
        ensure!(got(k) == want, "{k}: got {} want {want}", got(k));
    }

    let per_cluster = fixture_config("corpus.conf")
        .corpus()
        .map_err(|e| e.to_string())?
        .per_cluster;
    let sizes: Vec<usize> = c["cluster_sizes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as usize)
        .collect();
    let want_total: usize = sizes.iter().map(|&n| n.min(per_cluster)).sum();
    ensure!(
        got("after_resample") == want_total,
        "resample {} != {want_total}",
        got("after_resample")
    );

    // Survivors per planted cluster, before and after resampling.
    let cluster_of: BTreeMap<&str, usize> = planted
        .records
        .iter()
        .zip(&planted.clusters)
        .map(|(r, &k)| (r.id.as_str(), k))
        .collect();
    let (kept, _) = read_tsv(&fs::read(&out).unwrap()[..]).map_err(|e| e.to_string())?;
    let mut out_counts = BTreeMap::new();
    for r in &kept {
        *out_counts
            .entry(cluster_of[r.id.as_str()])
            .or_insert(0usize) += 1;
    }
    let mut out_sorted: Vec<usize> = out_counts.values().copied().collect();
    out_sorted.sort_unstable();
    let mut want_sorted: Vec<usize> = sizes.iter().map(|&n| n.min(per_cluster)).collect();
    want_sorted.sort_unstable();
    ensure!(
        out_sorted == want_sorted,
        "per-cluster output {out_sorted:?} != {want_sorted:?}"
    );
    Ok(format!(
        "1000 -> {} -> {} -> {} -> {} (k = {}, sizes {sizes:?})",
        got("after_toxicity"),
        got("after_jaccard"),
        got("after_embedding"),
        got("after_resample"),
        got("k_used")
    ))
}

/// Runs `args` twice writing to `out`; artifacts and manifests (minus the
/// wall time) must match byte for byte.
fn rerun_identical(args: &[&str], out: &Path, extra: &[PathBuf]) -> Result<(), String> {
    let snapshot = |paths: &[PathBuf]| -> Vec<Vec<u8>> {
        paths
            .iter()
            .map(|p| fs::read(p).unwrap_or_default())
            .collect()
    };
    let manifest = || -> Value {
        let mut v: Value = serde_json::from_slice(&fs::read(manifest_path(out)).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("wall_time_s");
        v
    };
    let mut files = vec![out.to_path_buf()];
    files.extend_from_slice(extra);
    run_ok(args)?;
    let (first, m1) = (snapshot(&files), manifest());
    run_ok(args)?;
    let (second, m2) = (snapshot(&files), manifest());
    ensure!(
        first == second,
        "`{}` artifacts differ between runs",
        args[0]
    );
    ensure!(m1 == m2, "`{}` manifests differ between runs", args[0]);
    Ok(())
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = fixture("smoke.conf");
    let (model, pairs) = (dir.join("ref.ckpt"), dir.join("pairs.txt"));
    rerun_identical(
        &["pretrain", "--config", s(&cfg), "--out", s(&model)],
        &model,
        &[metrics_path(&model)],
    )?;
    rerun_identical(
        &[
            "gen-pairs",
            "--config",
            s(&cfg),
            "--model",
            s(&model),
            "--n",
            "64",
            "--out",
            s(&pairs),
        ],
        &pairs,
        &[],
    )?;
    let mut checked = vec!["pretrain", "gen-pairs"];
    for method in ["pnapo", "dpo", "sft"] {
        let out = dir.join(format!("{method}.ckpt"));
        rerun_identical(
            &[
                "align",
                "--config",
                s(&cfg),
                "--method",
                method,
                "--model",
                s(&model),
                "--pairs",
                s(&pairs),
                "--out",
                s(&out),
            ],
            &out,
            &[metrics_path(&out)],
        )?;
    }
    checked.push("align x3");
    let eval_out = dir.join("eval.csv");
    let aligned = dir.join("pnapo.ckpt");
    rerun_identical(
        &[
            "eval",
            "--config",
            s(&cfg),
            "--model",
            s(&aligned),
            "--against",
            s(&model),
            "--out",
            s(&eval_out),
        ],
        &eval_out,
        &[],
    )?;
    checked.push("eval");
    for suite in ["gradcheck", "kl", "variance", "schedule"] {
        let out = dir.join(format!("verify_{suite}.csv"));
        rerun_identical(&["verify", "--suite", suite, "--out", s(&out)], &out, &[])?;
    }
    checked.push("verify x4");
    let planted = planted_corpus(&PlantedCorpusSpec::default(), 11).map_err(|e| e.to_string())?;
    let input = dir.join("corpus_in.tsv");
    let mut buf = Vec::new();
    write_tsv(
        &mut buf,
        &planted.records,
        planted.records[0].embedding.len(),
    )
    .map_err(|e| e.to_string())?;
    fs::write(&input, buf).unwrap();
    let out = dir.join("corpus_out.tsv");
    rerun_identical(
        &[
            "corpus",
            "--config",
            s(&fixture("corpus.conf")),
            "--input",
            s(&input),
            "--out",
            s(&out),
        ],
        &out,
        &[],
    )?;
    checked.push("corpus");
    Ok(checked.join(", "))
}

/// Irreducible flow-matching loss for a single isotropic Gaussian mode with
/// variance `s2` in `dim` dimensions: `E_t[dim * Var(u | x_t)]`.
fn cfm_floor(s2: f64, dim: usize) -> f64 {
    let n = 100_000;
    let total: f64 = (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let cov = t - (1.0 - t) * s2;
            let var_x = (1.0 - t).powi(2) * s2 + t * t;
            1.0 + s2 - cov * cov / var_x
        })
        .sum();
    dim as f64 * total / n as f64
}

/// Pretraining on the two-condition fixture must bring the smoothed final
/// loss under 20% of the loss at step 10, and close to the analytic floor.
fn pretraining_curve(dir: &Path) -> Outcome {
    let out = dir.join("two_mode.ckpt");
    run_ok(&[
        "pretrain",
        "--config",
        s(&fixture("two_mode.conf")),
        "--out",
        s(&out),
    ])?;
    let csv = fs::read_to_string(metrics_path(&out)).unwrap();
    let losses: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    let ratio = final_loss / losses[9];
    let mixture = fixture_config("two_mode.conf")
        .mixture()
        .map_err(|e| e.to_string())?;
    let floor = cfm_floor(mixture.std * mixture.std, mixture.dim);
    let detail = format!(
        "final/step-10 loss = {ratio:.3} (final {final_loss:.3}, step 10 {:.3}, floor {floor:.3})",
        losses[9]
    );
    ensure!(ratio < 0.2, "{detail}");
    ensure!(final_loss < 1.15 * floor, "not converged: {detail}");
    Ok(detail)
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let mut results: Vec<(String, bool)> = Vec::new();
    let mut record = |id: &str, name: &str, outcome: Outcome| {
        let pass = outcome.is_ok();
        let detail = outcome.unwrap_or_else(|e| e);
        println!(
            "[{}] {id:>2} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        results.push((format!("{id} {name}"), pass));
    };

    let toy = toy_runs(&dir.path().join("toy"));
    let toy_err = || Err::<String, _>(format!("toy runs failed: {}", toy.as_ref().err().unwrap()));

    record(
        "1",
        "reference-point identity",
        toy.as_ref()
            .map_or_else(|_| toy_err(), reference_point_identity),
    );
    record(
        "2",
        "gradient check",
        verify_suite("gradcheck", Some(Duration::from_secs(60))),
    );
    record("3", "schedule properties", verify_suite("schedule", None));
    record(
        "4",
        "KL inequality",
        verify_suite("kl", Some(Duration::from_secs(30))),
    );
    record("5", "estimator pinning", estimator_pinning());
    record(
        "6",
        "dataset self-consistency",
        toy.as_ref()
            .map_or_else(|_| toy_err(), dataset_self_consistency),
    );
    record(
        "7",
        "toy alignment",
        toy.as_ref().map_or_else(|_| toy_err(), toy_alignment),
    );
    let ablation = toy.as_ref().map_err(|e| e.clone()).and_then(ablation);
    let soft = ablation.as_ref().map(|a| a.1).unwrap_or(false);
    record(
        "8",
        "ablation harness",
        ablation
            .map(|(detail, _)| format!("both variants complete with comparable metrics; {detail}")),
    );
    println!(
        "[{}]  8 ablation direction (soft, reported only): dynamic >= fixed in at least 3/5 seeds",
        if soft { "PASS" } else { "FAIL" }
    );
    let corpus_dir = dir.path().join("corpus");
    fs::create_dir_all(&corpus_dir).unwrap();
    record("9", "corpus pipeline", corpus_pipeline(&corpus_dir));
    let det_dir = dir.path().join("det");
    fs::create_dir_all(&det_dir).unwrap();
    record("10", "determinism", determinism(&det_dir));
    record("--", "pretraining curve", pretraining_curve(dir.path()));

    println!("acceptance finished in {:.1?}", started.elapsed());
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.1)
        .map(|r| r.0.as_str())
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
