//! Python bindings: corpora, checkpoints, adaptation schemes, training,
//! evaluation and the transducer loss.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use car_core::corpus::{gen_language, LanguageSpec};
use car_core::harness::checkpoint::Checkpoint;
use car_core::harness::config::HarnessConfig;
use car_core::harness::study::run_study;
use car_core::harness::train::{train, TrainConfig};
use car_core::harness::wer::{evaluate_wer, wer};
use car_core::model::{build_hooks, init_backbone, transcribe, ModelConfig};
use car_core::peft::{apply_freezing_scheme, count_params, AdaptationScheme, SchemeId};
use car_core::transducer::rnnt_forward_backward;
use car_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numeric { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A synthetic speech corpus.
#[pyclass(name = "Corpus", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCorpus {
    inner: car_core::corpus::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        car_core::corpus::Corpus::load(&path).map(|inner| PyCorpus { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.utterances.iter().map(|u| u.id.clone()).collect()
    }

    fn transcripts(&self) -> Vec<Vec<u16>> {
        self.inner.utterances.iter().map(|u| u.transcript.0.clone()).collect()
    }

    /// Frames of utterance `i` as a list of rows.
    fn features(&self, i: usize) -> PyResult<Vec<Vec<f32>>> {
        let u = self
            .inner
            .utterances
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("utterance {i} out of range")))?;
        let f = &u.features.frames;
        Ok((0..f.rows()).map(|r| f.row(r).to_vec()).collect())
    }
}

/// Model parameters together with the scheme they are trained under.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    config: ModelConfig,
    scheme: AdaptationScheme,
    store: car_core::params::ParamStore<f32>,
}

#[pymethods]
impl PyModel {
    /// Fresh backbone for a named preset ("toy" or "desk").
    #[staticmethod]
    #[pyo3(signature = (preset = "toy", ssl = false, seed = 0))]
    fn init(preset: &str, ssl: bool, seed: u64) -> PyResult<Self> {
        let config = ModelConfig::preset(preset).map_err(to_py)?;
        let store = init_backbone(&config, ssl, seed);
        Ok(PyModel {
            config,
            scheme: AdaptationScheme::from_id(if ssl { SchemeId::J0 } else { SchemeId::F0 }),
            store,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        let scheme = AdaptationScheme::from_id(ck.meta.scheme.unwrap_or(SchemeId::B0));
        Ok(PyModel {
            config: ck.meta.model,
            scheme,
            store: ck.store,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(&self.config, Some(self.scheme.id), self.store.clone())
            .save(&path)
            .map_err(to_py)
    }

    #[getter]
    fn scheme(&self) -> String {
        self.scheme.id.to_string()
    }

    /// Copy of this model with `scheme`'s modules added and freezing applied.
    #[pyo3(signature = (scheme, seed = 0))]
    fn adapt(&self, scheme: &str, seed: u64) -> PyResult<Self> {
        let scheme = AdaptationScheme::parse(scheme).map_err(to_py)?;
        let store = apply_freezing_scheme(&self.store, &scheme, &self.config, seed).map_err(to_py)?;
        Ok(PyModel {
            config: self.config.clone(),
            scheme,
            store,
        })
    }

    /// `(total, trainable, backbone)` parameter counts.
    fn param_counts(&self) -> PyResult<(usize, usize, usize)> {
        let r = count_params(&self.store).map_err(to_py)?;
        Ok((r.total_params, r.trainable_params, r.backbone_params))
    }

    /// Trains in place and returns the per-step loss trace.
    #[pyo3(signature = (corpus, steps = 200, lr = 1e-3, batch_size = 4, seed = 0))]
    fn train(&mut self, corpus: &PyCorpus, steps: usize, lr: f64, batch_size: usize, seed: u64) -> PyResult<Vec<f64>> {
        let mut cfg = TrainConfig {
            steps,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        cfg.adam.lr = lr;
        let out = train(&cfg, &self.config, &self.scheme, &corpus.inner, self.store.clone()).map_err(to_py)?;
        self.store = out.store;
        Ok(out.trace)
    }

    fn wer(&self, corpus: &PyCorpus) -> PyResult<f64> {
        evaluate_wer(&self.store, &self.config, &build_hooks(&self.config, &self.scheme), &corpus.inner).map_err(to_py)
    }

    /// Greedy transcription of every utterance.
    fn transcribe(&self, corpus: &PyCorpus) -> PyResult<Vec<Vec<u16>>> {
        let hooks = build_hooks(&self.config, &self.scheme);
        corpus
            .inner
            .utterances
            .iter()
            .map(|u| transcribe(&self.store, &self.config, &hooks, &u.features.frames).map(|t| t.0))
            .collect::<Result<_, _>>()
            .map_err(to_py)
    }
}

/// Generates utterances of one synthetic language.
#[pyfunction]
#[pyo3(signature = (seed, n_utts, subset_size = 20, overlap = 1.0, proto_overlap = 1.0, sigma = 0.1, split = 0, min_len = 3, max_len = 6))]
#[allow(clippy::too_many_arguments)]
fn gen_corpus(
    seed: u64,
    n_utts: usize,
    subset_size: usize,
    overlap: f64,
    proto_overlap: f64,
    sigma: f64,
    split: u64,
    min_len: usize,
    max_len: usize,
) -> PyResult<PyCorpus> {
    let spec = LanguageSpec {
        seed,
        subset_size,
        overlap,
        proto_overlap,
        sigma,
        split,
        ..LanguageSpec::default()
    };
    gen_language(&spec, n_utts, (min_len, max_len))
        .map(|inner| PyCorpus { inner })
        .map_err(to_py)
}

/// Transducer loss and its gradient with respect to `logp`, a flat
/// `[frames, len(labels) + 1, vocab]` array of log-probabilities.
#[pyfunction]
fn rnnt_loss(logp: Vec<f64>, frames: usize, vocab: usize, labels: Vec<usize>) -> PyResult<(f64, Vec<f64>)> {
    rnnt_forward_backward(&logp, frames, vocab, &labels).map_err(to_py)
}

/// Corpus-level word error rate over `(reference, hypothesis)` pairs.
#[pyfunction(name = "wer")]
fn py_wer(pairs: Vec<(Vec<u16>, Vec<u16>)>) -> PyResult<f64> {
    wer(&pairs).map_err(to_py)
}

#[pyfunction]
fn schemes() -> Vec<String> {
    SchemeId::ALL.iter().map(|s| s.to_string()).collect()
}

/// Runs study 1, 2 or 3 and returns the report text. `config` is JSON.
#[pyfunction]
#[pyo3(signature = (id, config = None))]
fn study(py: Python<'_>, id: u8, config: Option<&str>) -> PyResult<String> {
    let cfg = match config {
        Some(s) => HarnessConfig::from_json(s).map_err(to_py)?,
        None => HarnessConfig::default(),
    };
    py.detach(|| run_study(id, &cfg, None)).map(|r| r.to_text()).map_err(to_py)
}

/// Adds the module contents to `m`; also used to embed the bindings.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(rnnt_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_wer, m)?)?;
    m.add_function(wrap_pyfunction!(schemes, m)?)?;
    m.add_function(wrap_pyfunction!(study, m)?)?;
    Ok(())
}

#[pymodule]
fn car(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
