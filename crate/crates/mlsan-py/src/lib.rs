//! Python bindings: the autodiff tensor, corpus generation with the Bayes
//! oracle, model training, and evaluation, mirroring the Rust API closely
//! enough to drive small experiments from a notebook.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mlsan::config::RunConfig;
use mlsan::data::{bayes_oracle, generate_corpus, read_corpus, split_corpus, write_corpus};
use mlsan::experiment::{effective_ablation, evaluate};
use mlsan::model::Ablation;
use mlsan::tensor::Tensor;
use mlsan::train::{train, Checkpoint};

fn err(e: mlsan::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A 2-D (or scalar) float tensor recording operations for reverse-mode
/// differentiation. Leaves created with `requires_grad=True` receive
/// gradients after `backward()` on a downstream scalar.
#[pyclass(name = "Tensor", unsendable)]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, requires_grad=false))]
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let inner = if requires_grad {
            Tensor::param(shape, data)
        } else {
            Tensor::from_vec(shape, data)
        }
        .map_err(err)?;
        Ok(PyTensor { inner })
    }

    #[staticmethod]
    fn scalar(v: f64) -> Self {
        PyTensor {
            inner: Tensor::scalar(v),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.inner.requires_grad()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data()
    }

    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn matmul(&self, rhs: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.matmul(&rhs.inner).map_err(err)?,
        })
    }

    fn add(&self, rhs: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.add(&rhs.inner).map_err(err)?,
        })
    }

    fn sub(&self, rhs: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.sub(&rhs.inner).map_err(err)?,
        })
    }

    fn mul(&self, rhs: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.mul(&rhs.inner).map_err(err)?,
        })
    }

    fn sigmoid(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.sigmoid(),
        }
    }

    fn relu(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.relu(),
        }
    }

    fn scale(&self, c: f64) -> PyTensor {
        PyTensor {
            inner: self.inner.scale(c),
        }
    }

    fn sum(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.sum(),
        }
    }

    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn parse_config(config_toml: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match config_toml {
        Some(text) => toml::from_str::<RunConfig>(text)
            .map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Generates a synthetic corpus into `out_dir` and returns
/// `(utterance_count, bayes_oracle_accuracy)`.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml=None))]
fn generate(out_dir: PathBuf, config_toml: Option<&str>) -> PyResult<(usize, f64)> {
    let cfg = parse_config(config_toml)?;
    let (corpus, artifacts) = generate_corpus(&cfg.generator).map_err(err)?;
    write_corpus(&corpus, &out_dir).map_err(err)?;
    let oracle = bayes_oracle(&corpus, &artifacts).map_err(err)?;
    Ok((corpus.utterance_count(), oracle))
}

/// Trains on a generated corpus directory, saves a checkpoint, and returns
/// the test report as a JSON string. `ablation` is one of
/// "full", "no_film", "no_gate", "no_aux".
#[pyfunction]
#[pyo3(signature = (corpus_dir, checkpoint_path, config_toml=None, ablation=None))]
fn train_model(
    corpus_dir: PathBuf,
    checkpoint_path: PathBuf,
    config_toml: Option<&str>,
    ablation: Option<&str>,
) -> PyResult<String> {
    let mut cfg = parse_config(config_toml)?;
    if let Some(name) = ablation {
        cfg.train.ablation = name
            .parse::<Ablation>()
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
    }
    let corpus = read_corpus(&corpus_dir).map_err(err)?;
    let model_cfg = cfg.model_config(&corpus);
    let (tr, va, te) = split_corpus(&corpus, cfg.split.fractions, cfg.split.seed).map_err(err)?;
    let outcome = train(&tr, &va, &model_cfg, &cfg.train).map_err(err)?;
    outcome.checkpoint.save(&checkpoint_path).map_err(err)?;
    let best = outcome.checkpoint.best_model().map_err(err)?;
    let metrics = evaluate(&best, &te, effective_ablation(&cfg.train)).map_err(err)?;
    serde_json::to_string_pretty(&metrics).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Evaluates a saved checkpoint on the test split of a corpus directory,
/// returning the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (corpus_dir, checkpoint_path, config_toml=None))]
fn evaluate_checkpoint(
    corpus_dir: PathBuf,
    checkpoint_path: PathBuf,
    config_toml: Option<&str>,
) -> PyResult<String> {
    let cfg = parse_config(config_toml)?;
    let corpus = read_corpus(&corpus_dir).map_err(err)?;
    let (_, _, te) = split_corpus(&corpus, cfg.split.fractions, cfg.split.seed).map_err(err)?;
    let ckpt = Checkpoint::load(&checkpoint_path).map_err(err)?;
    let best = ckpt.best_model().map_err(err)?;
    let metrics = evaluate(&best, &te, effective_ablation(&ckpt.train_config)).map_err(err)?;
    serde_json::to_string_pretty(&metrics).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// The default experiment configuration as a TOML string.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().snapshot()
}

#[pymodule]
fn mlsan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
