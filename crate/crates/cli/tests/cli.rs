use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rfpnapo_cli::manifest::{manifest_path, metrics_path, read_manifest};
use rfpnapo_core::sha256_hex;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn rfpnapo(args: &[&str]) -> Output {
    rfpnapo_env(args, &[])
}

fn rfpnapo_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rfpnapo"));
    cmd.args(args).env_remove("RFPNAPO_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Copies the smoke config with some keys replaced or appended.
fn smoke_config(dir: &Path, name: &str, overrides: &[(&str, &str)]) -> PathBuf {
    let base = fs::read_to_string(fixture("smoke.conf")).unwrap();
    let mut lines: Vec<String> = base
        .lines()
        .filter(|l| {
            !overrides
                .iter()
                .any(|(k, _)| l.split('=').next().unwrap().trim() == *k)
        })
        .map(str::to_string)
        .collect();
    for (k, v) in overrides {
        lines.push(format!("{k} = {v}"));
    }
    let path = dir.join(name);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

struct Smoke {
    dir: tempfile::TempDir,
    config: PathBuf,
    model: PathBuf,
    pairs: PathBuf,
}

fn smoke_pipeline(n: usize) -> Smoke {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture("smoke.conf");
    let model = dir.path().join("ref.ckpt");
    let pairs = dir.path().join("pairs.txt");
    let o = rfpnapo(&["pretrain", "--config", s(&config), "--out", s(&model)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = rfpnapo(&[
        "gen-pairs",
        "--config",
        s(&config),
        "--model",
        s(&model),
        "--n",
        &n.to_string(),
        "--out",
        s(&pairs),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Smoke {
        dir,
        config,
        model,
        pairs,
    }
}

fn align(sm: &Smoke, method: &str, pairs: &Path, out: &Path) -> Output {
    rfpnapo(&[
        "align",
        "--config",
        s(&sm.config),
        "--method",
        method,
        "--model",
        s(&sm.model),
        "--pairs",
        s(pairs),
        "--out",
        s(out),
    ])
}

#[test]
fn pipeline_writes_artifacts_and_matching_manifests() {
    let sm = smoke_pipeline(40);
    let out = sm.dir.path().join("aligned.ckpt");
    assert_eq!(code(&align(&sm, "pnapo", &sm.pairs, &out)), 0);
    for artifact in [&sm.model, &sm.pairs, &out] {
        let m = read_manifest(artifact).unwrap();
        assert!(!m.outputs.is_empty());
        for f in m.outputs.iter().chain(&m.inputs) {
            let bytes = fs::read(&f.path).unwrap();
            assert_eq!(sha256_hex(&bytes), f.sha256, "{}", f.path);
        }
    }
    let gen = read_manifest(&sm.pairs).unwrap();
    assert_eq!(gen.details["audit"], "pass");
    assert_eq!(
        gen.details["refhash"],
        sha256_hex(&fs::read(&sm.model).unwrap())
    );
    let csv = fs::read_to_string(metrics_path(&out)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,loss,margin_mean,beta_eff_mean,grad_norm"
    );
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "1");
    let loss: f64 = first[1].parse().unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-9, "{loss}");
    assert_eq!(csv.lines().count(), 1 + 8);
}

#[test]
fn gen_pairs_zero_is_header_only() {
    let sm = smoke_pipeline(0);
    let text = fs::read_to_string(&sm.pairs).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("rfpnapo-pairs v1 dim=2 cdim=4 steps=10 refhash="));
}

#[test]
fn dpo_ignores_stored_noise_but_pnapo_does_not() {
    let sm = smoke_pipeline(30);
    let text = fs::read_to_string(&sm.pairs).unwrap();
    let mut lines = text.lines();
    let mut corrupted = String::from(lines.next().unwrap());
    corrupted.push('\n');
    for line in lines {
        let mut fields: Vec<String> = line.split(" | ").map(str::to_string).collect();
        fields[3] = "9.0 -9.0".into();
        fields[4] = "-7.5 7.5".into();
        corrupted.push_str(&fields.join(" | "));
        corrupted.push('\n');
    }
    let bad = sm.dir.path().join("corrupt.txt");
    fs::write(&bad, corrupted).unwrap();
    let d = sm.dir.path();
    for (method, same) in [("dpo", true), ("pnapo", false)] {
        let a = d.join(format!("{method}_clean.ckpt"));
        let b = d.join(format!("{method}_corrupt.ckpt"));
        assert_eq!(code(&align(&sm, method, &sm.pairs, &a)), 0);
        assert_eq!(code(&align(&sm, method, &bad, &b)), 0);
        assert_eq!(
            fs::read(&a).unwrap() == fs::read(&b).unwrap(),
            same,
            "{method}"
        );
    }
}

#[test]
fn eval_against_itself_is_even_and_deterministic() {
    let sm = smoke_pipeline(1);
    let a = sm.dir.path().join("eval_a.csv");
    let b = sm.dir.path().join("eval_b.csv");
    for out in [&a, &b] {
        let o = rfpnapo(&[
            "eval",
            "--config",
            s(&sm.config),
            "--model",
            s(&sm.model),
            "--against",
            s(&sm.model),
            "--out",
            s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(
        text.lines().next().unwrap(),
        "model,mean_reward,median_reward,win_rate,n,seed"
    );
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.5);
        assert_eq!(r[4], "80");
    }
}

#[test]
fn exit_codes() {
    let sm = smoke_pipeline(5);
    let d = sm.dir.path();

    let zero_steps = smoke_config(d, "zero.conf", &[("train.steps", "0")]);
    assert_eq!(
        code(&rfpnapo(&[
            "pretrain",
            "--config",
            s(&zero_steps),
            "--out",
            s(&d.join("z"))
        ])),
        2
    );
    let unknown = d.join("unknown.conf");
    fs::write(&unknown, "seed = 1\nmystery = 2\n").unwrap();
    assert_eq!(
        code(&rfpnapo(&[
            "pretrain",
            "--config",
            s(&unknown),
            "--out",
            s(&d.join("u"))
        ])),
        2
    );
    assert_eq!(code(&align(&sm, "ppo", &sm.pairs, &d.join("x"))), 2);
    assert_eq!(code(&rfpnapo(&["verify", "--suite", "everything"])), 2);
    assert_eq!(
        code(&rfpnapo_env(
            &["verify", "--suite", "schedule"],
            &[("RFPNAPO_THREADS", "zero")]
        )),
        2
    );

    let missing = d.join("absent.ckpt");
    let o = rfpnapo(&[
        "gen-pairs",
        "--config",
        s(&sm.config),
        "--model",
        s(&missing),
        "--n",
        "3",
        "--out",
        s(&d.join("p")),
    ]);
    assert_eq!(code(&o), 3);
    assert_eq!(
        code(&rfpnapo(&[
            "pretrain",
            "--config",
            s(&d.join("nope.conf")),
            "--out",
            s(&d.join("n"))
        ])),
        3
    );

    let two_cond = smoke_config(d, "two.conf", &[("data.conditions", "2")]);
    let other = d.join("other.ckpt");
    assert_eq!(
        code(&rfpnapo(&[
            "pretrain",
            "--config",
            s(&two_cond),
            "--out",
            s(&other)
        ])),
        0
    );
    let o = rfpnapo(&[
        "align",
        "--config",
        s(&sm.config),
        "--model",
        s(&other),
        "--pairs",
        s(&sm.pairs),
        "--out",
        s(&d.join("m")),
    ]);
    assert_eq!(code(&o), 4);

    let garbage = d.join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = rfpnapo(&[
        "gen-pairs",
        "--config",
        s(&sm.config),
        "--model",
        s(&garbage),
        "--n",
        "2",
        "--out",
        s(&d.join("g")),
    ]);
    assert_eq!(code(&o), 5);

    let tsv = d.join("bad.tsv");
    fs::write(
        &tsv,
        "id\ttext\ttox\te0\na\thello\t0.01\t1.0\nb\tworld\tlots\t1.0\n",
    )
    .unwrap();
    let o = rfpnapo(&[
        "corpus",
        "--config",
        s(&fixture("corpus.conf")),
        "--input",
        s(&tsv),
        "--out",
        s(&d.join("c.tsv")),
    ]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn corpus_empty_input_gives_empty_output() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("empty.tsv");
    fs::write(&input, "id\ttext\ttox\te0\te1\n").unwrap();
    let out = d.path().join("out.tsv");
    let o = rfpnapo(&[
        "corpus",
        "--config",
        s(&fixture("corpus.conf")),
        "--input",
        s(&input),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&out).unwrap(), "id\ttext\ttox\te0\te1\n");
    assert!(manifest_path(&out).exists());
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let cfg = fixture("smoke.conf");
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let model = d.path().join(format!("m{threads}.ckpt"));
        let pairs = d.path().join(format!("p{threads}.txt"));
        let env = [("RFPNAPO_THREADS", threads)];
        assert_eq!(
            code(&rfpnapo_env(
                &["pretrain", "--config", s(&cfg), "--out", s(&model)],
                &env
            )),
            0
        );
        let o = rfpnapo_env(
            &[
                "gen-pairs",
                "--config",
                s(&cfg),
                "--model",
                s(&model),
                "--n",
                "50",
                "--out",
                s(&pairs),
            ],
            &env,
        );
        assert_eq!(code(&o), 0);
        outputs.push((fs::read(&model).unwrap(), fs::read(&pairs).unwrap()));
    }
    assert!(outputs[0] == outputs[1]);
}
