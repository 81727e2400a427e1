//! Python module `gdtc`: vocabulary/dataset handling, model training and
//! evaluation, checkpoints, and the numerical utilities, mirroring the
//! Rust API at document granularity.

use gdtc_core::config;
use gdtc_core::data::{self, Document};
use gdtc_core::experiments::{self, FittedModel, ModelKind};
use gdtc_core::{checkpoint, synth, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::collections::BTreeMap;
use std::path::PathBuf;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn doc(ids: Vec<u32>) -> Document {
    Document { ids }
}

/// Token <-> id map with reserved <unk>/<s>/</s> entries.
#[pyclass]
struct Vocabulary {
    inner: data::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    /// Build from raw texts by frequency with a size cap and count floor.
    #[staticmethod]
    fn build(texts: Vec<String>, max_vocab: usize, min_count: usize) -> PyResult<Self> {
        let corpus: Vec<Vec<String>> = texts.iter().map(|t| data::tokenize(t)).collect();
        Ok(Vocabulary {
            inner: data::build_vocab(&corpus, max_vocab, min_count).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Vocabulary {
            inner: data::Vocabulary::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn size(&self) -> usize {
        self.inner.size()
    }

    fn id(&self, token: &str) -> u32 {
        self.inner.id(token)
    }

    fn token(&self, id: u32) -> PyResult<String> {
        if (id as usize) >= self.inner.size() {
            return Err(PyValueError::new_err(format!("id {id} out of range")));
        }
        Ok(self.inner.token(id).to_string())
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Tokenize and map to ids, appending the end-of-sequence id.
    fn encode(&self, text: &str) -> Vec<u32> {
        data::encode(text, &self.inner).ids
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }
}

/// Labeled encoded documents.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (examples, num_classes, name = "py".to_string()))]
    fn new(examples: Vec<(Vec<u32>, usize)>, num_classes: usize, name: String) -> PyResult<Self> {
        for (ids, y) in &examples {
            if *y >= num_classes {
                return Err(PyValueError::new_err(format!(
                    "label {y} >= num_classes {num_classes}"
                )));
            }
            if ids.is_empty() {
                return Err(PyValueError::new_err("empty document"));
            }
        }
        Ok(Dataset {
            inner: data::Dataset {
                examples: examples.into_iter().map(|(ids, y)| (doc(ids), y)).collect(),
                num_classes,
                name,
            },
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    fn examples(&self) -> Vec<(Vec<u32>, usize)> {
        self.inner
            .examples
            .iter()
            .map(|(d, y)| (d.ids.clone(), *y))
            .collect()
    }

    /// Deterministically draw exactly n examples per class.
    fn subsample(&self, n: usize, seed: u64) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: data::subsample_per_class(&self.inner, n, seed).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Flat configuration (optimizer, dimensions, experiment grids).
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: config::Config,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (preset = None))]
    fn new(preset: Option<&str>) -> PyResult<Self> {
        let inner = match preset {
            Some(name) => config::Config::preset(name).map_err(err)?,
            None => config::Config::default(),
        };
        Ok(Config { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn to_dict(&self) -> BTreeMap<String, String> {
        self.inner.to_map()
    }
}

/// Evaluation metrics in percent.
#[pyclass]
struct Metrics {
    #[pyo3(get)]
    accuracy: f64,
    #[pyo3(get)]
    precision: Vec<f64>,
    #[pyo3(get)]
    recall: Vec<f64>,
    #[pyo3(get)]
    confusion: Vec<Vec<usize>>,
    #[pyo3(get)]
    support: Vec<usize>,
}

impl From<experiments::Metrics> for Metrics {
    fn from(m: experiments::Metrics) -> Self {
        Metrics {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            confusion: m.confusion,
            support: m.support,
        }
    }
}

/// A fitted classifier of any of the six kinds.
#[pyclass]
struct Model {
    inner: FittedModel,
    kind: String,
    best_dev_accuracy: Option<f64>,
}

#[pymethods]
impl Model {
    #[getter]
    fn kind(&self) -> String {
        self.kind.clone()
    }

    /// Dev accuracy at the restored best epoch (neural kinds only).
    #[getter]
    fn best_dev_accuracy(&self) -> Option<f64> {
        self.best_dev_accuracy
    }

    fn predict(&self, ids: Vec<u32>) -> PyResult<usize> {
        self.inner.predict(&doc(ids)).map_err(err)
    }

    /// log p(x | y) for generative kinds.
    fn doc_loglik(&self, ids: Vec<u32>, y: usize) -> PyResult<f64> {
        let scorer = self
            .inner
            .as_scorer()
            .ok_or_else(|| PyValueError::new_err("discriminative model has no p(x|y)"))?;
        scorer.doc_loglik(&doc(ids), y).map_err(err)
    }

    /// log p(x) marginalized over classes (generative kinds).
    fn marginal_loglik(&self, ids: Vec<u32>) -> PyResult<f64> {
        let scorer = self
            .inner
            .as_scorer()
            .ok_or_else(|| PyValueError::new_err("discriminative model has no p(x)"))?;
        gdtc_core::models::marginal_loglik(scorer, &doc(ids)).map_err(err)
    }

    /// Write a binary checkpoint (parameterized kinds only).
    fn save(&self, path: PathBuf, vocab_hash: &str, class_names: Vec<String>) -> PyResult<()> {
        checkpoint::save_model(&self.inner, vocab_hash, &class_names, &path).map_err(err)
    }

    /// Load a checkpoint, refusing a vocabulary-hash mismatch.
    #[staticmethod]
    fn load(path: PathBuf, vocab_hash: &str) -> PyResult<(Model, Vec<String>)> {
        let (inner, class_names) = checkpoint::load_model(&path, vocab_hash).map_err(err)?;
        let kind = match &inner {
            FittedModel::Disc(_) => "disc",
            FittedModel::GenShared(_) => "gen-shared",
            FittedModel::GenIndep(_) => "gen-indep",
            FittedModel::NaiveBayes(_) => "naive-bayes",
            FittedModel::KneserNey(_) => "kneser-ney",
            FittedModel::MlpNaiveBayes(_) => "mlp-naive-bayes",
        }
        .to_string();
        Ok((
            Model {
                inner,
                kind,
                best_dev_accuracy: None,
            },
            class_names,
        ))
    }
}

/// Fit one model; kind is one of disc, gen-shared, gen-indep,
/// naive-bayes/nb, kneser-ney/kn, mlp-naive-bayes/mlp-nb.
#[pyfunction]
fn train_model(
    kind: &str,
    train: &Dataset,
    dev: &Dataset,
    vocab_size: usize,
    config: &Config,
    seed: u64,
) -> PyResult<Model> {
    let kind: ModelKind = kind.parse().map_err(err)?;
    let (inner, report) = experiments::fit_model(
        kind,
        &train.inner,
        &dev.inner,
        vocab_size,
        &config.inner,
        seed,
    )
    .map_err(err)?;
    Ok(Model {
        inner,
        kind: kind.as_str().to_string(),
        best_dev_accuracy: report.map(|r| r.best_dev_accuracy),
    })
}

/// Accuracy and per-class precision/recall of a model on a dataset.
#[pyfunction]
fn evaluate(model: &Model, test: &Dataset) -> PyResult<Metrics> {
    Ok(experiments::evaluate(&model.inner, &test.inner)
        .map_err(err)?
        .into())
}

/// The shipped two-class separable fixture: (vocabulary, train, dev, test).
#[pyfunction]
fn fixture() -> (Vocabulary, Dataset, Dataset, Dataset) {
    let fx = synth::fixture_f1();
    (
        Vocabulary { inner: fx.vocab },
        Dataset { inner: fx.train },
        Dataset { inner: fx.dev },
        Dataset { inner: fx.test },
    )
}

/// Lowercase whitespace tokenizer with edge punctuation stripped.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    data::tokenize(text)
}

/// Max relative gradient errors (discriminative NLL, generative loglik)
/// against central finite differences on the fixture.
#[pyfunction]
fn gradcheck() -> PyResult<(f64, f64)> {
    experiments::fixture_grad_errors().map_err(err)
}

/// Mann-Whitney rank-sum: (U for a, z, one-sided p that b is lower).
#[pyfunction]
fn rank_sum_test(a: Vec<f64>, b: Vec<f64>) -> (f64, f64, f64) {
    experiments::rank_sum_test(&a, &b)
}

#[pymodule]
fn gdtc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Config>()?;
    m.add_class::<Metrics>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fixture, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(rank_sum_test, m)?)?;
    Ok(())
}
