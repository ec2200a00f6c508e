//! Python bindings: corpora, base models, marginalization and probes.
//!
//! Configs cross the boundary as JSON strings with the same fields as the
//! TOML sections of the command-line tool.

use mtplab::data::{Corpus, CorpusSpec, SequencePair};
use mtplab::marginal::{candidate_set, second_token_exact, second_token_truncated, MarginalSpec};
use mtplab::model::{next_token_dist, Checkpoint, ModelConfig};
use mtplab::probes::{entropy, kl_profile, top_p_count};
use mtplab::train::TrainPlan;
use mtplab::{MtpError, ProbDist};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: MtpError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn dist(probs: Vec<f64>) -> PyResult<ProbDist> {
    ProbDist::new(probs).map_err(py_err)
}

fn pairs(raw: Vec<(Vec<u32>, usize)>) -> PyResult<Vec<SequencePair>> {
    raw.into_iter()
        .map(|(ids, n)| SequencePair::new(ids, n).map_err(py_err))
        .collect()
}

type RawPairs = Vec<(Vec<u32>, usize)>;

/// `(train, eval)` as lists of `(ids, target_len)`.
#[pyfunction]
#[pyo3(signature = (spec_json=None))]
fn gen_corpus(spec_json: Option<&str>) -> PyResult<(RawPairs, RawPairs)> {
    let spec: CorpusSpec = from_json(spec_json)?;
    let c = Corpus::generate(&spec).map_err(py_err)?;
    let conv = |v: Vec<SequencePair>| v.into_iter().map(|p| (p.ids, p.target_len)).collect();
    Ok((conv(c.train), conv(c.eval)))
}

#[pyfunction]
fn entropy_of(probs: Vec<f64>) -> PyResult<f64> {
    Ok(entropy(&dist(probs)?))
}

#[pyfunction]
fn top_p_count_of(probs: Vec<f64>, p: f64) -> PyResult<usize> {
    Ok(top_p_count(&dist(probs)?, p))
}

#[pyfunction]
fn top_p_set(probs: Vec<f64>, p: f64) -> PyResult<Vec<usize>> {
    Ok(candidate_set(&dist(probs)?, p))
}

/// A base decoder-only model.
#[pyclass(module = "mtplab_py")]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let config: ModelConfig = from_json(config_json)?;
        Ok(Model {
            inner: Checkpoint::init(config, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model {
            inner: Checkpoint::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.config.n_layers
    }

    /// NTP pretraining on `(ids, target_len)` pairs; returns per-step losses.
    #[pyo3(signature = (train, plan_json=None))]
    fn pretrain(&mut self, train: RawPairs, plan_json: Option<&str>) -> PyResult<Vec<f64>> {
        let plan: TrainPlan = from_json(plan_json)?;
        let corpus = pairs(train)?;
        let (ck, records) = mtplab::train::run_training(
            &TrainPlan {
                mode: mtplab::train::TrainMode::PretrainNtp,
                ..plan
            },
            mtplab::train::Trainee::Base(self.inner.clone()),
            &corpus,
            None,
        )
        .map_err(py_err)?;
        self.inner = ck.into_base().map_err(py_err)?;
        Ok(records.iter().map(|r| r.total_loss).collect())
    }

    fn next_token(&self, ids: Vec<u32>) -> PyResult<Vec<f64>> {
        Ok(next_token_dist(&self.inner, &ids).map_err(py_err)?.into_vec())
    }

    /// Marginal distribution of the token after next.
    #[pyo3(signature = (ids, top_p=0.99))]
    fn second_token(&self, ids: Vec<u32>, top_p: f64) -> PyResult<Vec<f64>> {
        let spec = MarginalSpec {
            top_p,
            ..Default::default()
        };
        Ok(second_token_truncated(&self.inner, &ids, &spec).map_err(py_err)?.into_vec())
    }

    fn second_token_exact(&self, ids: Vec<u32>) -> PyResult<Vec<f64>> {
        Ok(second_token_exact(&self.inner, &ids).map_err(py_err)?.into_vec())
    }

    /// Mean KL from each backbone layer's distribution to the output.
    fn kl_profile(&self, pairs_raw: RawPairs) -> PyResult<Vec<f64>> {
        let p = pairs(pairs_raw)?;
        Ok(kl_profile(&self.inner, &p).map_err(py_err)?.values)
    }
}

#[pymodule]
fn mtplab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_of, m)?)?;
    m.add_function(wrap_pyfunction!(top_p_count_of, m)?)?;
    m.add_function(wrap_pyfunction!(top_p_set, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
