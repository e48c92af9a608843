use std::path::Path;

use rfpnapo_core::analytics::{paired_win_rate, sample_rewards, summarize};
use rfpnapo_core::config::RunConfig;
use rfpnapo_core::corpus::{read_tsv, run_pipeline, write_tsv};
use rfpnapo_core::numerics::{checkpoint_bytes, read_checkpoint};
use rfpnapo_core::pnapo::{align as run_align, write_metrics_csv, Method};
use rfpnapo_core::prefdata::{
    audit_dataset, audit_indices, fmt_real, generate_dataset, read_dataset, write_dataset,
    DatasetHeader,
};
use rfpnapo_core::rectflow::pretrain as run_pretrain;
use rfpnapo_core::{sha256_hex, Error, Model};
use serde_json::json;

use crate::manifest::{metrics_path, ManifestBuilder};
use crate::verify::{format_report, run_suite};
use crate::{CliError, CliResult};

const AUDIT_RECORDS: usize = 10;

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::missing(path)),
        Err(e) => Err(e.into()),
    }
}

fn load_config(path: &Path, mb: Option<&mut ManifestBuilder>) -> CliResult<RunConfig> {
    let bytes = read_input(path)?;
    if let Some(mb) = mb {
        mb.input(path, &bytes);
    }
    let text = String::from_utf8(bytes).map_err(|_| CliError::new(2, "config is not UTF-8"))?;
    Ok(text.parse::<RunConfig>()?)
}

/// Reads a checkpoint; a malformed file is a parse failure.
fn load_model(path: &Path, mb: &mut ManifestBuilder) -> CliResult<(Model, String)> {
    let bytes = read_input(path)?;
    mb.input(path, &bytes);
    let model = read_checkpoint(&bytes[..]).map_err(|e| match e {
        Error::Data(m) => CliError::new(5, format!("{}: {m}", path.display())),
        other => other.into(),
    })?;
    Ok((model, sha256_hex(&bytes)))
}

fn check_dims(model: &Model, dim: usize, cdim: usize, what: &str) -> CliResult<()> {
    if model.spec.data_dim != dim || model.spec.cond_dim != cdim {
        return Err(CliError::new(
            4,
            format!(
                "{what} has dim={dim}, cdim={cdim} but the checkpoint has dim={}, cdim={}",
                model.spec.data_dim, model.spec.cond_dim
            ),
        ));
    }
    Ok(())
}

pub fn pretrain(config: &Path, out: &Path, argv: &[String]) -> CliResult<u8> {
    let mut mb = ManifestBuilder::new("pretrain", argv);
    let cfg = load_config(config, Some(&mut mb))?;
    let mixture = cfg.mixture()?;
    let spec = cfg.mlp_spec()?;
    let pcfg = cfg.pretrain()?;
    let init = Model::init(spec, pcfg.seed)?;
    let (model, losses) = run_pretrain(init, &mixture, &pcfg)?;

    let mut csv = String::from("step,cfm_loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, fmt_real(*l)));
    }
    mb.write_output(out, &checkpoint_bytes(&model))?;
    mb.write_output(&metrics_path(out), csv.as_bytes())?;
    mb.detail("n_params", model.params.len());
    mb.detail("final_loss", *losses.last().expect("steps >= 1"));
    if let Some(l10) = losses.get(9) {
        mb.detail("step10_loss", *l10);
    }
    mb.manifest_config(&cfg);
    mb.finish(out)?;
    Ok(0)
}

pub fn gen_pairs(
    config: &Path,
    model: &Path,
    n: usize,
    out: &Path,
    argv: &[String],
) -> CliResult<u8> {
    let mut mb = ManifestBuilder::new("gen-pairs", argv);
    let cfg = load_config(config, Some(&mut mb))?;
    let (reference, refhash) = load_model(model, &mut mb)?;
    let mixture = cfg.mixture()?;
    check_dims(&reference, mixture.dim, mixture.conditions, "config")?;
    let reward = cfg.reward()?;
    let sampler = cfg.sampler()?;
    let seed = cfg.seed()?;
    let records = generate_dataset(
        &reference,
        &reward,
        &mixture.condition_vectors(),
        &sampler,
        n,
        seed,
    )?;

    let audited = audit_indices(records.len(), AUDIT_RECORDS, seed);
    let audit = audit_dataset(&reference, &sampler, &records, audited.iter().copied())?;
    let header = DatasetHeader {
        dim: mixture.dim,
        cdim: mixture.conditions,
        steps: sampler.steps,
        refhash: refhash.clone(),
    };
    let mut buf = Vec::new();
    write_dataset(&mut buf, &header, &records)?;
    mb.write_output(out, &buf)?;
    mb.detail("refhash", refhash);
    mb.detail("n_records", records.len());
    mb.detail("audited_records", json!(audited));
    mb.detail("audit", if audit.is_ok() { "pass" } else { "fail" });
    mb.manifest_config(&cfg);
    mb.finish(out)?;
    match audit {
        Ok(()) => Ok(0),
        Err(i) => Err(CliError::new(
            1,
            format!("record {i} does not replay to its stored sample"),
        )),
    }
}

pub fn align(
    config: &Path,
    method: &str,
    model: &Path,
    pairs: &Path,
    out: &Path,
    argv: &[String],
) -> CliResult<u8> {
    let mut mb = ManifestBuilder::new("align", argv);
    let cfg = load_config(config, Some(&mut mb))?;
    let method: Method = method.parse()?;
    let (reference, refhash) = load_model(model, &mut mb)?;
    let bytes = read_input(pairs)?;
    mb.input(pairs, &bytes);
    let (header, records) = read_dataset(&bytes[..])?;
    check_dims(&reference, header.dim, header.cdim, "dataset")?;
    if header.refhash != refhash {
        return Err(CliError::new(
            4,
            format!(
                "dataset was generated by reference {} but --model hashes to {refhash}",
                header.refhash
            ),
        ));
    }
    let acfg = cfg.align(method)?;
    let (aligned, metrics) = run_align(reference.clone(), &reference, &records, &acfg)?;

    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &metrics)?;
    mb.write_output(out, &checkpoint_bytes(&aligned))?;
    mb.write_output(&metrics_path(out), &csv)?;
    mb.detail("method", method.name());
    mb.detail("schedule", acfg.schedule.label());
    mb.detail("steps", metrics.len());
    mb.detail("final_loss", metrics.last().map_or(f64::NAN, |m| m.loss));
    mb.manifest_config(&cfg);
    mb.finish(out)?;
    Ok(0)
}

fn model_label(path: &Path) -> String {
    path.file_name().map_or_else(
        || path.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

pub fn eval(
    config: &Path,
    model: &Path,
    against: Option<&Path>,
    n: Option<usize>,
    out: &Path,
    argv: &[String],
) -> CliResult<u8> {
    let mut mb = ManifestBuilder::new("eval", argv);
    let cfg = load_config(config, Some(&mut mb))?;
    let (a, _) = load_model(model, &mut mb)?;
    let b = against.map(|p| load_model(p, &mut mb)).transpose()?;
    let mixture = cfg.mixture()?;
    check_dims(&a, mixture.dim, mixture.conditions, "config")?;
    if let Some((b, _)) = &b {
        check_dims(b, mixture.dim, mixture.conditions, "config")?;
    }
    let per_condition = match n {
        Some(0) => return Err(CliError::new(2, "--n must be at least 1")),
        Some(n) => n,
        None => cfg.eval_n()?,
    };
    let reward = cfg.reward()?;
    let sampler = cfg.sampler()?;
    let seed = cfg.seed()?;
    let conds = mixture.condition_vectors();

    let ra = sample_rewards(&a, &reward, &conds, per_condition, &sampler, seed)?;
    let mut rows = vec![(model_label(model), summarize(&ra, seed))];
    if let (Some((b, _)), Some(path)) = (&b, against) {
        let rb = sample_rewards(b, &reward, &conds, per_condition, &sampler, seed)?;
        rows[0].1.win_rate = Some(paired_win_rate(&ra, &rb)?);
        let mut rep_b = summarize(&rb, seed);
        rep_b.win_rate = Some(paired_win_rate(&rb, &ra)?);
        rows.push((model_label(path), rep_b));
    }
    let mut csv = String::from("model,mean_reward,median_reward,win_rate,n,seed\n");
    for (label, r) in &rows {
        let wr = r.win_rate.map(fmt_real).unwrap_or_default();
        csv.push_str(&format!(
            "{label},{},{},{wr},{},{}\n",
            fmt_real(r.mean_reward),
            fmt_real(r.median_reward),
            r.n_samples,
            r.seed
        ));
    }
    mb.write_output(out, csv.as_bytes())?;
    if let Some(wr) = rows[0].1.win_rate {
        mb.detail("win_rate", wr);
    }
    mb.manifest_config(&cfg);
    mb.finish(out)?;
    Ok(0)
}

pub fn verify(suite: &str, out: Option<&Path>, argv: &[String]) -> CliResult<u8> {
    let checks = run_suite(suite)?;
    let report = format_report(&checks);
    print!("{report}");
    let failed = checks.iter().filter(|c| !c.pass).count();
    if let Some(out) = out {
        let mut mb = ManifestBuilder::new("verify", argv);
        mb.write_output(out, report.as_bytes())?;
        mb.detail("suite", suite);
        mb.detail("checks", checks.len());
        mb.detail("failed", failed);
        mb.finish(out)?;
    }
    if failed > 0 {
        eprintln!("{failed} of {} checks failed", checks.len());
        Ok(1)
    } else {
        Ok(0)
    }
}

pub fn corpus(config: &Path, input: &Path, out: &Path, argv: &[String]) -> CliResult<u8> {
    let mut mb = ManifestBuilder::new("corpus", argv);
    let cfg = load_config(config, Some(&mut mb))?;
    let ccfg = cfg.corpus()?;
    let bytes = read_input(input)?;
    mb.input(input, &bytes);
    let (records, dim) = read_tsv(&bytes[..])?;
    let (kept, counts) = run_pipeline(&records, &ccfg)?;
    let mut buf = Vec::new();
    write_tsv(&mut buf, &kept, dim)?;
    mb.write_output(out, &buf)?;
    mb.detail(
        "stage_counts",
        json!({
            "input": counts.input,
            "after_toxicity": counts.after_toxicity,
            "after_jaccard": counts.after_jaccard,
            "after_embedding": counts.after_embedding,
            "k_used": counts.k_used,
            "cluster_sizes": counts.cluster_sizes,
            "after_resample": counts.after_resample,
        }),
    );
    mb.manifest_config(&cfg);
    mb.finish(out)?;
    Ok(0)
}
