//! Python bindings: models, preference records, the schedule, losses, the
//! tabular KL check and the corpus filters.

use std::fs::File;
use std::io::BufWriter;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rfpnapo_core::analytics::{estimator_variance, tabular_kl_check as core_kl_check, TimeDraw};
use rfpnapo_core::baselines::{dpo_loss as core_dpo_loss, DpoSampleDraw};
use rfpnapo_core::corpus::{self, CorpusPipelineConfig};
use rfpnapo_core::numerics::{read_checkpoint, write_checkpoint};
use rfpnapo_core::pnapo::{self, AlignConfig};
use rfpnapo_core::prefdata::{generate_dataset, RewardSpec};
use rfpnapo_core::rectflow::{self, PretrainConfig, SamplerConfig, ToyMixture};
use rfpnapo_core::{BetaSchedule, Error, Method, VelocityField};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::NumericOverflow { .. } | Error::Divergence { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for rfpnapo_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "MlpSpec", module = "rfpnapo", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMlpSpec(rfpnapo_core::MlpSpec);

#[pymethods]
impl PyMlpSpec {
    #[new]
    fn new(data_dim: usize, cond_dim: usize, hidden: Vec<usize>) -> PyResult<Self> {
        rfpnapo_core::MlpSpec::new(data_dim, cond_dim, hidden)
            .py()
            .map(Self)
    }

    #[getter]
    fn data_dim(&self) -> usize {
        self.0.data_dim
    }

    #[getter]
    fn cond_dim(&self) -> usize {
        self.0.cond_dim
    }

    #[getter]
    fn hidden(&self) -> Vec<usize> {
        self.0.hidden.clone()
    }

    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "MlpSpec(data_dim={}, cond_dim={}, hidden={:?})",
            self.0.data_dim, self.0.cond_dim, self.0.hidden
        )
    }
}

#[pyclass(name = "Model", module = "rfpnapo", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(rfpnapo_core::Model);

#[pymethods]
impl PyModel {
    /// Glorot-initialised model.
    #[staticmethod]
    fn init(spec: &PyMlpSpec, seed: u64) -> PyResult<Self> {
        rfpnapo_core::Model::init(spec.0.clone(), seed)
            .py()
            .map(Self)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        read_checkpoint(f).py().map(Self)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        write_checkpoint(BufWriter::new(f), &self.0).py()
    }

    #[getter]
    fn spec(&self) -> PyMlpSpec {
        PyMlpSpec(self.0.spec.clone())
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.0.params.values.clone()
    }

    fn n_params(&self) -> usize {
        self.0.params.len()
    }

    fn velocity(&self, x: Vec<f64>, t: f64, c: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.velocity(&x, t, &c).py()
    }

    /// Euler integration from noise (t = 1) to data (t = 0).
    fn sample(&self, noise: Vec<f64>, c: Vec<f64>, steps: usize) -> PyResult<Vec<f64>> {
        rectflow::euler_sample_final(&self.0, &noise, &c, &SamplerConfig { steps }).py()
    }

    fn __repr__(&self) -> String {
        format!("Model(n_params={})", self.0.params.len())
    }
}

#[pyclass(name = "PreferenceRecord", module = "rfpnapo", frozen, from_py_object)]
#[derive(Clone)]
struct PyRecord(rfpnapo_core::PreferenceRecord);

#[pymethods]
impl PyRecord {
    #[new]
    fn new(
        cond: Vec<f64>,
        x0_w: Vec<f64>,
        x0_l: Vec<f64>,
        noise_w: Vec<f64>,
        noise_l: Vec<f64>,
        delta_r: f64,
    ) -> PyResult<Self> {
        let rec = rfpnapo_core::PreferenceRecord {
            cond,
            x0_w,
            x0_l,
            noise_w,
            noise_l,
            delta_r,
        };
        rec.validate(rec.x0_w.len(), rec.cond.len()).py()?;
        Ok(Self(rec))
    }

    #[getter]
    fn cond(&self) -> Vec<f64> {
        self.0.cond.clone()
    }
    #[getter]
    fn x0_w(&self) -> Vec<f64> {
        self.0.x0_w.clone()
    }
    #[getter]
    fn x0_l(&self) -> Vec<f64> {
        self.0.x0_l.clone()
    }
    #[getter]
    fn noise_w(&self) -> Vec<f64> {
        self.0.noise_w.clone()
    }
    #[getter]
    fn noise_l(&self) -> Vec<f64> {
        self.0.noise_l.clone()
    }
    #[getter]
    fn delta_r(&self) -> f64 {
        self.0.delta_r
    }
}

#[pyfunction]
fn f_controller(delta_r: f64) -> PyResult<f64> {
    pnapo::f_controller(delta_r).py()
}

#[pyfunction]
fn g_controller(n: u64, n1: u64, n2: u64) -> PyResult<f64> {
    pnapo::g_controller(n, n1, n2).py()
}

#[pyfunction]
#[pyo3(signature = (beta, delta_r, n, n1 = 1000, n2 = 2000, dynamic = true))]
fn effective_beta(
    beta: f64,
    delta_r: f64,
    n: u64,
    n1: u64,
    n2: u64,
    dynamic: bool,
) -> PyResult<f64> {
    let sched = BetaSchedule::new(beta, n1, n2, dynamic).py()?;
    pnapo::effective_beta(&sched, delta_r, n).py()
}

#[pyfunction]
fn pnapo_loss(
    model: &PyModel,
    reference: &PyModel,
    rec: &PyRecord,
    t: f64,
    beta: f64,
) -> PyResult<f64> {
    pnapo::pnapo_loss(&model.0, &reference.0, &rec.0, t, beta).py()
}

/// DPO loss with explicit fresh noises `eps_w`, `eps_l` and time `t`.
#[pyfunction]
fn dpo_loss(
    model: &PyModel,
    reference: &PyModel,
    rec: &PyRecord,
    eps_w: Vec<f64>,
    eps_l: Vec<f64>,
    t: f64,
    beta: f64,
) -> PyResult<f64> {
    let draw = DpoSampleDraw { eps_w, eps_l, t };
    core_dpo_loss(&model.0, &reference.0, &rec.0, &draw, beta).py()
}

/// `(var_pnapo, var_dpo)` of the per-record score difference over `n_draws`;
/// `t=None` draws the time uniformly.
#[pyfunction]
#[pyo3(signature = (model, reference, rec, n_draws, seed, t = None))]
fn score_variance(
    model: &PyModel,
    reference: &PyModel,
    rec: &PyRecord,
    n_draws: usize,
    seed: u64,
    t: Option<f64>,
) -> PyResult<(f64, f64)> {
    let time = t.map_or(TimeDraw::Uniform, TimeDraw::Fixed);
    let v = estimator_variance(&model.0, &reference.0, &rec.0, n_draws, seed, time).py()?;
    Ok((v.var_pnapo, v.var_dpo))
}

/// Pretrains on the toy mixture; returns the model and per-step losses.
#[pyfunction]
#[pyo3(signature = (model, conditions, modes = 1, radius = 3.0, std = 0.3, steps = 1000, batch = 128, lr = 2e-3, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    py: Python<'_>,
    model: &PyModel,
    conditions: usize,
    modes: usize,
    radius: f64,
    std: f64,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> PyResult<(PyModel, Vec<f64>)> {
    let mixture = ToyMixture::new(model.0.spec.data_dim, conditions, modes, radius, std).py()?;
    let cfg = PretrainConfig {
        steps,
        batch,
        lr,
        weight_decay: 0.0,
        seed,
    };
    let start = model.0.clone();
    let (m, losses) = py
        .detach(|| rectflow::pretrain(start, &mixture, &cfg))
        .py()?;
    Ok((PyModel(m), losses))
}

/// Noise-tracked pairs with the mode-distance reward on the toy mixture.
#[pyfunction]
#[pyo3(signature = (reference, conditions, n, seed, modes = 1, radius = 3.0, sampler_steps = 50))]
#[allow(clippy::too_many_arguments)]
fn generate_pairs(
    py: Python<'_>,
    reference: &PyModel,
    conditions: usize,
    n: usize,
    seed: u64,
    modes: usize,
    radius: f64,
    sampler_steps: usize,
) -> PyResult<Vec<PyRecord>> {
    let mixture =
        ToyMixture::new(reference.0.spec.data_dim, conditions, modes, radius, 0.0).py()?;
    let reward = RewardSpec::ModeDistance {
        targets: (0..conditions)
            .map(|k| mixture.mode_centers(k).swap_remove(0))
            .collect(),
    };
    let conds = mixture.condition_vectors();
    let cfg = SamplerConfig {
        steps: sampler_steps,
    };
    let records = py
        .detach(|| generate_dataset(&reference.0, &reward, &conds, &cfg, n, seed))
        .py()?;
    Ok(records.into_iter().map(PyRecord).collect())
}

/// Aligns a copy of `reference`; returns the policy and per-step losses.
#[pyfunction]
#[pyo3(signature = (reference, records, method = "pnapo", beta = 50.0, steps = 100, batch = 64, lr = 1e-4, seed = 0, dynamic = true, n1 = 1000, n2 = 2000, shared_t = true))]
#[allow(clippy::too_many_arguments)]
fn align(
    py: Python<'_>,
    reference: &PyModel,
    records: Vec<PyRecord>,
    method: &str,
    beta: f64,
    steps: u64,
    batch: usize,
    lr: f64,
    seed: u64,
    dynamic: bool,
    n1: u64,
    n2: u64,
    shared_t: bool,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = AlignConfig {
        schedule: BetaSchedule::new(beta, n1, n2, dynamic).py()?,
        steps,
        batch_size: batch,
        lr,
        weight_decay: 0.0,
        seed,
        method: method.parse::<Method>().py()?,
        shared_t,
    };
    let data: Vec<_> = records.into_iter().map(|r| r.0).collect();
    let (m, metrics) = py
        .detach(|| pnapo::align(reference.0.clone(), &reference.0, &data, &cfg))
        .py()?;
    Ok((PyModel(m), metrics.iter().map(|s| s.loss).collect()))
}

/// `(lhs, rhs)` of the conditional-vs-path KL inequality on a random
/// tabular chain with matched endpoint marginals.
#[pyfunction]
#[pyo3(signature = (seed, n_states = 4, horizon = 3))]
fn tabular_kl_check(seed: u64, n_states: usize, horizon: usize) -> PyResult<(f64, f64)> {
    core_kl_check(seed, n_states, horizon).py()
}

type RecordTuple = (String, String, f64, Vec<f64>);
type StageCounts = (usize, usize, usize, usize, usize);

fn to_records(rows: Vec<RecordTuple>) -> Vec<corpus::PromptRecord> {
    rows.into_iter()
        .map(|(id, text, toxicity, embedding)| corpus::PromptRecord {
            id,
            text,
            toxicity,
            embedding,
        })
        .collect()
}

fn ids(records: Vec<corpus::PromptRecord>) -> Vec<String> {
    records.into_iter().map(|r| r.id).collect()
}

#[pyfunction]
fn jaccard(a: &str, b: &str) -> f64 {
    corpus::jaccard(&corpus::token_set(a), &corpus::token_set(b))
}

/// Ids surviving the toxicity filter; rows are `(id, text, toxicity, embedding)`.
#[pyfunction]
fn toxicity_filter(rows: Vec<RecordTuple>, threshold: f64) -> PyResult<Vec<String>> {
    corpus::toxicity_filter(&to_records(rows), threshold)
        .py()
        .map(ids)
}

#[pyfunction]
fn jaccard_dedup(rows: Vec<RecordTuple>, threshold: f64) -> PyResult<Vec<String>> {
    corpus::jaccard_dedup(&to_records(rows), threshold)
        .py()
        .map(ids)
}

#[pyfunction]
fn embedding_dedup(rows: Vec<RecordTuple>, threshold: f64) -> PyResult<Vec<String>> {
    corpus::embedding_dedup(&to_records(rows), threshold)
        .py()
        .map(ids)
}

/// Full pipeline; returns surviving ids and the per-stage counts
/// `(input, after_toxicity, after_jaccard, after_embedding, after_resample)`.
#[pyfunction]
#[pyo3(signature = (rows, k_clusters = 100, per_cluster = 200, seed = 0))]
fn corpus_pipeline(
    py: Python<'_>,
    rows: Vec<RecordTuple>,
    k_clusters: usize,
    per_cluster: usize,
    seed: u64,
) -> PyResult<(Vec<String>, StageCounts)> {
    let cfg = CorpusPipelineConfig {
        k_clusters,
        per_cluster,
        seed,
        ..CorpusPipelineConfig::default()
    };
    let records = to_records(rows);
    let (kept, c) = py.detach(|| corpus::run_pipeline(&records, &cfg)).py()?;
    Ok((
        ids(kept),
        (
            c.input,
            c.after_toxicity,
            c.after_jaccard,
            c.after_embedding,
            c.after_resample,
        ),
    ))
}

#[pymodule]
fn rfpnapo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMlpSpec>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRecord>()?;
    m.add_function(wrap_pyfunction!(f_controller, m)?)?;
    m.add_function(wrap_pyfunction!(g_controller, m)?)?;
    m.add_function(wrap_pyfunction!(effective_beta, m)?)?;
    m.add_function(wrap_pyfunction!(pnapo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(score_variance, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(generate_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(tabular_kl_check, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(toxicity_filter, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard_dedup, m)?)?;
    m.add_function(wrap_pyfunction!(embedding_dedup, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_pipeline, m)?)?;
    Ok(())
}
