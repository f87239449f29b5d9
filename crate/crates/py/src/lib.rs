//! Python bindings: the measures as plain functions, plus wrappers around
//! the corpus, embedding and model artifacts and the pipeline driver.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use diachron_core::corpus::{self, WindowedCorpus};
use diachron_core::detm::DetmState;
use diachron_core::embeddings::EmbeddingMatrix;
use diachron_core::measures;
use diachron_core::report::{self, PipelineConfig, Stage};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

/// Evenness-and-exhaustiveness of the top two entries of a distribution,
/// in (0, 1].
#[pyfunction]
fn bimodality(dist: Vec<f64>) -> PyResult<f64> {
    measures::bimodality(&dist).map_err(value_err)
}

/// Jensen-Shannon divergence (natural log, bounded by ln 2).
#[pyfunction]
fn jsd(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    measures::jsd(&p, &q).map_err(value_err)
}

/// Best two-segment split of a sequence under L2 cost. Returns
/// (cp_index, delta, left_mean, right_mean).
#[pyfunction]
#[pyo3(signature = (scores, min_seg_len = 1))]
fn single_change_point(scores: Vec<f64>, min_seg_len: usize) -> PyResult<(usize, f64, f64, f64)> {
    measures::single_change_point(&scores, min_seg_len).map_err(value_err)
}

/// Penalized optimal multi-segmentation (PELT); returns the indices where
/// new segments start.
#[pyfunction]
#[pyo3(signature = (scores, penalty, min_seg_len = 1))]
fn pelt_segment(scores: Vec<f64>, penalty: f64, min_seg_len: usize) -> PyResult<Vec<usize>> {
    if penalty <= 0.0 {
        return Err(PyValueError::new_err("penalty must be positive"));
    }
    Ok(measures::pelt_segment(&scores, penalty, min_seg_len))
}

/// Chunk a token list into sub-documents of at most `max_tokens` tokens.
#[pyfunction]
#[pyo3(signature = (tokens, max_tokens = 500))]
fn split_subdocs(tokens: Vec<String>, max_tokens: usize) -> PyResult<Vec<Vec<String>>> {
    if max_tokens == 0 {
        return Err(PyValueError::new_err("max_tokens must be positive"));
    }
    Ok(corpus::split_subdocs(&tokens, max_tokens))
}

/// Run the pipeline stages for a config file. `stage` is one of
/// "ingest", "embed", "train", "measure", "report". Returns the report
/// manifest as a list of (name, sha256) pairs, or None for earlier stages.
#[pyfunction]
#[pyo3(signature = (config_path, stage = "report", resume = false, seed = None, output_dir = None))]
fn run_pipeline(
    config_path: PathBuf,
    stage: &str,
    resume: bool,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
) -> PyResult<Option<Vec<(String, String)>>> {
    let mut cfg = PipelineConfig::load(&config_path).map_err(value_err)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    let upto = match stage {
        "ingest" => Stage::Corpus,
        "embed" => Stage::Embed,
        "train" => Stage::Train,
        "measure" => Stage::Measure,
        "report" => Stage::Report,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown stage {other:?} (expected ingest/embed/train/measure/report)"
            )))
        }
    };
    let bundle = report::run_pipeline(&cfg, upto, resume).map_err(value_err)?;
    Ok(bundle.map(|b| b.files.into_iter().map(|f| (f.name, f.sha256)).collect()))
}

/// A windowed bag-of-words corpus, as serialized by the ingest stage.
#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: WindowedCorpus,
}

#[pymethods]
impl PyCorpus {
    /// Load `corpus.json` from a pipeline output directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(io_err)?;
        let inner: WindowedCorpus = serde_json::from_str(&text).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocabulary.len()
    }

    #[getter]
    fn subdoc_count(&self) -> usize {
        self.inner.subdocs.len()
    }

    #[getter]
    fn window_count(&self) -> usize {
        self.inner.spec.count as usize
    }

    fn words(&self) -> Vec<String> {
        self.inner.vocabulary.words().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(windows={}, subdocs={}, vocab={})",
            self.inner.spec.count,
            self.inner.subdocs.len(),
            self.inner.vocabulary.len()
        )
    }
}

/// Trained word vectors with cosine nearest-neighbor lookup.
#[pyclass(name = "Embeddings")]
struct PyEmbeddings {
    inner: EmbeddingMatrix,
}

#[pymethods]
impl PyEmbeddings {
    /// Load the binary `embeddings.bin` format.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = EmbeddingMatrix::load_binary(&path).map_err(io_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn vector(&self, word: &str) -> PyResult<Vec<f32>> {
        let i = self
            .inner
            .index_of(word)
            .ok_or_else(|| PyValueError::new_err(format!("word {word:?} not in vocabulary")))?;
        Ok(self.inner.row(i).to_vec())
    }

    /// Top-n cosine neighbors of `word`, as (word, similarity) pairs.
    #[pyo3(signature = (word, n = 10))]
    fn nearest_neighbors(&self, word: &str, n: usize) -> PyResult<Vec<(String, f64)>> {
        self.inner.nearest_neighbors(word, n).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Embeddings(vocab={}, dim={})",
            self.inner.vocab_size(),
            self.inner.dim
        )
    }
}

/// A fitted dynamic topic model checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    inner: DetmState,
}

#[pymethods]
impl PyModel {
    /// Load the binary `model.bin` checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = DetmState::load_checkpoint(&path).map_err(io_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn topics(&self) -> usize {
        self.inner.topic_count()
    }

    #[getter]
    fn window_count(&self) -> usize {
        self.inner.t_count
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    /// Top-n words of topic `k` in window `t`, as (word, probability).
    #[pyo3(signature = (corpus, k, t, n = 10))]
    fn top_words(
        &self,
        corpus: &PyCorpus,
        k: usize,
        t: usize,
        n: usize,
    ) -> PyResult<Vec<(String, f64)>> {
        if k >= self.inner.topic_count() || t >= self.inner.t_count {
            return Err(PyValueError::new_err(format!(
                "topic {k} / window {t} out of range"
            )));
        }
        let beta = self.inner.beta();
        Ok(beta
            .top_words(k, t, n)
            .into_iter()
            .map(|(v, p)| (corpus.inner.vocabulary.word(v as u32).to_string(), p))
            .collect())
    }

    /// Per-window empirical topic distribution of `word`; rows of the
    /// returned matrix are windows, columns topics.
    fn word_topic_curve(&self, corpus: &PyCorpus, word: &str) -> PyResult<Vec<Vec<f64>>> {
        let curve = self
            .inner
            .word_topic_curve(&corpus.inner, word)
            .map_err(value_err)?;
        Ok(curve.phi)
    }

    /// Bimodality per window for `word` (unattested windows interpolated),
    /// with the change-point summary: (scores, cp_index, delta).
    fn bimodality_curve(
        &self,
        corpus: &PyCorpus,
        word: &str,
    ) -> PyResult<(Vec<f64>, usize, f64)> {
        let cp = measures::word_change_point(&self.inner, &corpus.inner, word, 1, 1)
            .map_err(value_err)?
            .ok_or_else(|| PyValueError::new_err(format!("word {word:?} too sparse")))?;
        let raw = measures::bimodality_curve(&self.inner, &corpus.inner, word)
            .map_err(value_err)?;
        let scores = measures::interpolate_missing(&raw.scores)
            .ok_or_else(|| PyValueError::new_err(format!("word {word:?} never attested")))?;
        Ok((scores, cp.cp_index, cp.delta))
    }

    /// Novelty (JSD against the previous window's aggregate) of an author
    /// writing in window `t`.
    fn author_novelty(&self, corpus: &PyCorpus, author: &str, t: usize) -> PyResult<f64> {
        measures::author_novelty_in_window(&self.inner, &corpus.inner, author, t)
            .map(|r| r.novelty)
            .map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(topics={}, windows={}, vocab={})",
            self.inner.topic_count(),
            self.inner.t_count,
            self.inner.vocab_size()
        )
    }
}

#[pymodule]
fn diachron(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bimodality, m)?)?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(single_change_point, m)?)?;
    m.add_function(wrap_pyfunction!(pelt_segment, m)?)?;
    m.add_function(wrap_pyfunction!(split_subdocs, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
