//! Python bindings for `tagsong`.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use tagsong::checkpoint::Checkpoint;
use tagsong::corpus::{Corpus, Preprocessor, Resources};
use tagsong::dataset::{filter_triplets, load_tag_names, load_triplets, make_split, SplitMode};
use tagsong::gradcheck::{gradient_check as run_gradient_check, GradCheckOptions};
use tagsong::model::{Model as CoreModel, ModelKind};
use tagsong::numerics::Rng as CoreRng;
use tagsong::retrieval::{ranking_from_scores, RankingResult};
use tagsong::text::{load_embeddings, StopWords};
use tagsong::training::LossKind;
use tagsong::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Numeric(_) => PyArithmeticError::new_err(err.to_string()),
        Error::Io { .. } => PyOSError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn parse<T: clap::ValueEnum>(value: &str, what: &str) -> PyResult<T> {
    T::from_str(value, false).map_err(|_| PyValueError::new_err(format!("unknown {what} {value:?}")))
}

/// Lowercases, strips punctuation and removes the bundled stop words.
#[pyfunction]
fn preprocess_lyric(text: &str) -> PyResult<Vec<String>> {
    tagsong::text::preprocess_lyric(text, &StopWords::bundled()).map_err(to_py)
}

/// `(loss, d_loss/d_v)` of the squared-error loss.
#[pyfunction]
fn mse_loss(v: Vec<f64>, l: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    tagsong::training::mse_loss(&v, &l).map_err(to_py)
}

/// `(loss, d_loss/d_v)` of the negative cosine loss.
#[pyfunction]
fn cosine_loss(v: Vec<f64>, l: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    tagsong::training::cosine_loss(&v, &l).map_err(to_py)
}

/// `(loss, d_loss/d_pos, d_loss/d_neg)` of the margin ranking loss.
#[pyfunction]
fn margin_loss(v: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    tagsong::training::margin_loss(&v, &positive, &negative).map_err(to_py)
}

fn build_rankings(scores: &[Vec<f64>], relevant: &[Vec<bool>]) -> PyResult<Vec<RankingResult>> {
    if scores.len() != relevant.len() {
        return Err(PyValueError::new_err("scores and relevant differ in length"));
    }
    scores
        .iter()
        .zip(relevant)
        .enumerate()
        .map(|(q, (s, r))| {
            let ids: Vec<String> = (0..s.len()).map(|j| j.to_string()).collect();
            ranking_from_scores(&q.to_string(), &ids, s, r).map_err(to_py)
        })
        .collect()
}

/// Percentage of queries (rows) with a relevant candidate in the top `k`.
#[pyfunction]
fn recall_at_k(scores: Vec<Vec<f64>>, relevant: Vec<Vec<bool>>, k: usize) -> PyResult<f64> {
    tagsong::retrieval::recall_at_k(&build_rankings(&scores, &relevant)?, k).map_err(to_py)
}

/// Median over queries of the best rank of a relevant candidate.
#[pyfunction]
fn median_rank(scores: Vec<Vec<f64>>, relevant: Vec<Vec<bool>>) -> PyResult<f64> {
    tagsong::retrieval::median_rank(&build_rankings(&scores, &relevant)?).map_err(to_py)
}

/// Filters a triplet file and splits it; returns `(train_ids, test_ids)`.
#[pyfunction]
#[pyo3(signature = (path, tag_dim, mode="dagger", seed=0, test_songs=100, min_occurrence=5, per_song=Some(5)))]
fn split_triplets(
    path: PathBuf,
    tag_dim: usize,
    mode: &str,
    seed: u64,
    test_songs: usize,
    min_occurrence: usize,
    per_song: Option<usize>,
) -> PyResult<(Vec<String>, Vec<String>)> {
    let mode: SplitMode = parse(mode, "split mode")?;
    let records = load_triplets(&path, tag_dim).map_err(to_py)?;
    let kept = filter_triplets(&records, min_occurrence, per_song);
    let split = make_split(&kept, mode, seed, test_songs).map_err(to_py)?;
    Ok((split.train, split.test))
}

/// The deterministic 64-bit generator used for initialisation and shuffling.
#[pyclass]
struct Rng(CoreRng);

#[pymethods]
impl Rng {
    #[new]
    fn new(seed: u64) -> Self {
        Rng(CoreRng::new(seed))
    }

    #[staticmethod]
    fn derive(seed: u64, stream: u64) -> Self {
        Rng(CoreRng::derive(seed, stream))
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn uniform(&mut self, low: f64, high: f64) -> f64 {
        self.0.uniform(low, high)
    }

    fn below(&mut self, n: usize) -> usize {
        self.0.below(n)
    }
}

/// `(image_ids, song_ids, scores)`
type ScoreTable = (Vec<String>, Vec<String>, Vec<Vec<f64>>);

/// A trained model loaded from a checkpoint together with its embeddings.
#[pyclass]
struct Model {
    model: CoreModel,
    resources: Resources,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (checkpoint, embeddings, tag_names=None))]
    fn load(checkpoint: PathBuf, embeddings: PathBuf, tag_names: Option<PathBuf>) -> PyResult<Self> {
        let ck = Checkpoint::load(&checkpoint).map_err(to_py)?;
        let table = load_embeddings(&embeddings, Some(ck.embed_dim)).map_err(to_py)?;
        let tag_names = tag_names
            .map(|p| load_tag_names(&p, ck.model.tag_space.dim))
            .transpose()
            .map_err(to_py)?;
        let model = ck.to_model(&table).map_err(to_py)?;
        Ok(Model {
            model,
            resources: Resources {
                table,
                tag_names,
                stop_words: StopWords::bundled(),
            },
        })
    }

    #[getter]
    fn kind(&self) -> String {
        self.model.config.kind.to_string()
    }

    #[getter]
    fn tag_group(&self) -> String {
        self.model.config.tag_group.to_string()
    }

    /// Projection of a lyric into tag space for an image with tag vector
    /// `tags` (the full vector; only used by attention models).
    #[pyo3(signature = (lyric, tags=None))]
    fn project(&self, lyric: &str, tags: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
        let options = self.model.config.corpus_options();
        let pre = Preprocessor::new(&self.resources, &options).map_err(to_py)?;
        let lyric = pre.lyric("query", lyric, None).map_err(to_py)?;
        let v_tilde = match tags {
            Some(t) => pre.image("query", &t, 0).map_err(to_py)?.v_tilde,
            None => None,
        };
        self.model
            .project(&lyric, v_tilde.as_deref(), &self.resources.table)
            .map_err(to_py)
    }

    /// Similarity matrix `[image][song]` over the records of a triplet
    /// file; returns `(image_ids, song_ids, scores)`.
    fn score_file(&self, py: Python<'_>, triplets: PathBuf) -> PyResult<ScoreTable> {
        let records = load_triplets(&triplets, self.model.config.tag_space.dim).map_err(to_py)?;
        let corpus =
            Corpus::build(&records, &self.resources, &self.model.config.corpus_options()).map_err(to_py)?;
        let scores = py
            .detach(|| self.model.score_matrix(&corpus, &self.resources.table))
            .map_err(to_py)?;
        Ok((
            corpus.images.iter().map(|i| i.id.clone()).collect(),
            corpus.lyrics.iter().map(|l| l.song_id.clone()).collect(),
            scores,
        ))
    }
}

/// Finite-difference gradient check on a toy model; returns
/// `(max_relative_error, passed)`.
#[pyfunction]
#[pyo3(signature = (model, loss, seed=0))]
fn gradient_check(model: &str, loss: &str, seed: u64) -> PyResult<(f64, bool)> {
    let kind: ModelKind = parse(model, "model kind")?;
    let loss: LossKind = parse(loss, "loss")?;
    let report = run_gradient_check(kind, loss, seed, &GradCheckOptions::default()).map_err(to_py)?;
    Ok((report.max_error(), report.passed()))
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("tagsong".to_string()).chain(args);
    py.detach(|| tagsong::cli::main_with_args(argv, &mut std::io::stdout(), &mut std::io::stderr()))
}

#[pymodule]
fn tagsong_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(preprocess_lyric, m)?)?;
    m.add_function(wrap_pyfunction!(mse_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_loss, m)?)?;
    m.add_function(wrap_pyfunction!(margin_loss, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(median_rank, m)?)?;
    m.add_function(wrap_pyfunction!(split_triplets, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Rng>()?;
    m.add_class::<Model>()?;
    Ok(())
}
