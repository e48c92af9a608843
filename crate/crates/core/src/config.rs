//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Unknown keys and repeated keys are rejected at parse time, and missing
//! required keys are reported when a subcommand asks for them.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::corpus::CorpusPipelineConfig;
use crate::numerics::MlpSpec;
use crate::pnapo::{AlignConfig, BetaSchedule, Method};
use crate::prefdata::RewardSpec;
use crate::rectflow::{PretrainConfig, SamplerConfig, ToyMixture};
use crate::{Error, Result};

/// Every accepted key.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "data.dim",
    "data.conditions",
    "data.mixture.modes",
    "data.mixture.radius",
    "data.mixture.std",
    "model.hidden",
    "train.lr",
    "train.steps",
    "train.batch",
    "train.weight_decay",
    "align.lr",
    "align.steps",
    "align.batch",
    "pnapo.beta",
    "pnapo.n1",
    "pnapo.n2",
    "pnapo.dynamic",
    "pnapo.shared_t",
    "sampler.steps",
    "reward.kind",
    "reward.params",
    "eval.n",
    "corpus.toxicity_threshold",
    "corpus.jaccard_threshold",
    "corpus.cosine_threshold",
    "corpus.k_clusters",
    "corpus.per_cluster",
    "corpus.kmeans_iters",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: key {k:?} set twice",
                    i + 1
                )));
            }
        }
        Ok(RunConfig { values })
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Sets a key, subject to the same validation as parsing.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Canonical text form: sorted keys, one per line.
    pub fn snapshot(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
            })
            .transpose()
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parsed(key)?
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn positive<T: FromStr + PartialOrd + Default + Copy + std::fmt::Display>(
        &self,
        key: &str,
        v: T,
    ) -> Result<T> {
        if v > T::default() {
            Ok(v)
        } else {
            Err(Error::Config(format!("{key} must be >= 1, got {v}")))
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.required("seed")
    }

    pub fn mixture(&self) -> Result<ToyMixture> {
        ToyMixture::new(
            self.required("data.dim")?,
            self.required("data.conditions")?,
            self.or("data.mixture.modes", 2)?,
            self.or("data.mixture.radius", 3.0)?,
            self.or("data.mixture.std", 0.3)?,
        )
    }

    pub fn mlp_spec(&self) -> Result<MlpSpec> {
        let hidden = self
            .get("model.hidden")
            .ok_or_else(|| Error::Config("missing required key model.hidden".into()))?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("invalid model.hidden entry {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        MlpSpec::new(
            self.required("data.dim")?,
            self.required("data.conditions")?,
            hidden,
        )
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let steps = self.or("sampler.steps", 50usize)?;
        Ok(SamplerConfig {
            steps: self.positive("sampler.steps", steps)?,
        })
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let steps = self.required("train.steps")?;
        let batch = self.required("train.batch")?;
        Ok(PretrainConfig {
            steps: self.positive("train.steps", steps)?,
            batch: self.positive("train.batch", batch)?,
            lr: self.required("train.lr")?,
            weight_decay: self.or("train.weight_decay", 0.0)?,
            seed: self.seed()?,
        })
    }

    /// `pnapo.dynamic` is `true`, `false`, `f_only` or `g_only`.
    pub fn schedule(&self) -> Result<BetaSchedule> {
        let beta = self.required("pnapo.beta")?;
        let n1 = self.or("pnapo.n1", 1000u64)?;
        let n2 = self.or("pnapo.n2", 2000u64)?;
        let mode = self.get("pnapo.dynamic").unwrap_or("true");
        let (dynamic, use_f, use_g) = match mode {
            "true" => (true, true, true),
            "false" => (false, true, true),
            "f_only" => (true, true, false),
            "g_only" => (true, false, true),
            other => {
                return Err(Error::Config(format!(
                    "pnapo.dynamic must be true, false, f_only or g_only, got {other:?}"
                )))
            }
        };
        Ok(BetaSchedule::new(beta, n1, n2, dynamic)?.with_controllers(use_f, use_g))
    }

    /// Alignment settings; `align.*` fall back to `train.*`. SFT ignores β.
    pub fn align(&self, method: Method) -> Result<AlignConfig> {
        let schedule = match method {
            Method::Sft => match self.schedule() {
                Ok(s) => s,
                Err(_) => BetaSchedule::fixed(1.0)?,
            },
            _ => self.schedule()?,
        };
        let steps = match self.parsed("align.steps")? {
            Some(s) => s,
            None => self.required("train.steps")?,
        };
        let batch = match self.parsed("align.batch")? {
            Some(b) => b,
            None => self.required("train.batch")?,
        };
        let lr = match self.parsed("align.lr")? {
            Some(l) => l,
            None => self.required("train.lr")?,
        };
        Ok(AlignConfig {
            schedule,
            steps: self.positive("align.steps", steps)?,
            batch_size: self.positive("align.batch", batch)?,
            lr,
            weight_decay: self.or("train.weight_decay", 0.0)?,
            seed: self.seed()?,
            method,
            shared_t: self.or("pnapo.shared_t", true)?,
        })
    }

    /// The configured reward. Without `reward.params`, `mode_distance`
    /// targets the first mixture mode of each condition.
    pub fn reward(&self) -> Result<RewardSpec> {
        let kind = self
            .get("reward.kind")
            .ok_or_else(|| Error::Config("missing required key reward.kind".into()))?;
        match self.get("reward.params") {
            Some(p) => RewardSpec::parse(kind, p),
            None if kind == "mode_distance" => {
                let m = self.mixture()?;
                let targets = (0..m.conditions)
                    .map(|k| m.mode_centers(k).swap_remove(0))
                    .collect();
                Ok(RewardSpec::ModeDistance { targets })
            }
            None => Err(Error::Config(format!(
                "reward.kind {kind:?} needs reward.params"
            ))),
        }
    }

    pub fn eval_n(&self) -> Result<usize> {
        let n = self.or("eval.n", 500usize)?;
        self.positive("eval.n", n)
    }

    pub fn corpus(&self) -> Result<CorpusPipelineConfig> {
        let d = CorpusPipelineConfig::default();
        let cfg = CorpusPipelineConfig {
            toxicity_threshold: self.or("corpus.toxicity_threshold", d.toxicity_threshold)?,
            jaccard_threshold: self.or("corpus.jaccard_threshold", d.jaccard_threshold)?,
            cosine_threshold: self.or("corpus.cosine_threshold", d.cosine_threshold)?,
            k_clusters: self.or("corpus.k_clusters", d.k_clusters)?,
            per_cluster: self.or("corpus.per_cluster", d.per_cluster)?,
            kmeans_iters: self.or("corpus.kmeans_iters", d.kmeans_iters)?,
            seed: self.or("seed", 0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
