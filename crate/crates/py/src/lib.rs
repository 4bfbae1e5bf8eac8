use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use vernet::annotator::{self, Edit};
use vernet::checkpoint;
use vernet::cli;
use vernet::config::{ConfigMap, RunConfig};
use vernet::metrics;
use vernet::reranker::RankerWeights;
use vernet::textpipe;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// `(kind, start, end, replacement)`
type EditTuple = (String, usize, usize, Vec<String>);

fn edit_tuple(e: &Edit) -> EditTuple {
    let kind = e.to_line().split('\t').next().unwrap_or_default().to_string();
    (kind, e.start, e.end, e.replacement.clone())
}

fn edit_from(t: &EditTuple) -> PyResult<Edit> {
    Edit::from_line(&format!("{}\t{}\t{}\t{}", t.0, t.1, t.2, t.3.join(" "))).map_err(err)
}

fn run_config(seed: Option<u64>, options: Option<BTreeMap<String, String>>) -> PyResult<RunConfig> {
    let mut flags = ConfigMap::default();
    if let Some(s) = seed {
        flags.set("seed", s);
    }
    for (k, v) in options.unwrap_or_default() {
        flags.set(k, v);
    }
    RunConfig::resolve(&[&flags]).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (text, lowercase = false))]
fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    textpipe::tokenize(text, lowercase)
}

#[pyfunction]
fn extract_edits(sent: Vec<String>, gold: Vec<String>) -> Vec<EditTuple> {
    annotator::extract_edits(&sent, &gold).iter().map(edit_tuple).collect()
}

#[pyfunction]
fn apply_edits(sent: Vec<String>, edits: Vec<EditTuple>) -> PyResult<Vec<String>> {
    let edits = edits.iter().map(edit_from).collect::<PyResult<Vec<_>>>()?;
    annotator::apply_edits(&sent, &edits).map_err(err)
}

/// 1 = correct, 0 = incorrect; one label per token plus the trailing `[SEP]`.
#[pyfunction]
fn label_tokens(sent: Vec<String>, gold: Vec<String>) -> Vec<u8> {
    annotator::label_tokens(&sent, &gold).0
}

#[pyfunction]
fn edit_distance(sent: Vec<String>, gold: Vec<String>) -> usize {
    annotator::edit_distance(&sent, &gold)
}

#[pyfunction]
#[pyo3(signature = (precision, recall, beta = 0.5))]
fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    metrics::f_beta(precision, recall, beta)
}

#[pyfunction]
#[pyo3(signature = (candidate, source, references, max_n = 4))]
fn gleu(candidate: Vec<String>, source: Vec<String>, references: Vec<Vec<String>>, max_n: usize) -> f64 {
    metrics::gleu(&candidate, &source, &references, max_n)
}

#[pyfunction]
fn pcc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::pcc(&x, &y).map_err(err)
}

#[pyfunction]
fn sentence_f05(sent: Vec<String>, hypothesis: Vec<String>, references: Vec<Vec<String>>) -> f64 {
    let system = annotator::extract_edits(&sent, &hypothesis);
    let refs: Vec<Vec<Edit>> = references.iter().map(|r| annotator::extract_edits(&sent, r)).collect();
    metrics::sentence_f05(&system, &refs)
}

/// Synthetic dataset as JSON lines.
#[pyfunction]
#[pyo3(signature = (groups = 1000, k = 5, seed = None, options = None))]
fn synth(groups: usize, k: usize, seed: Option<u64>, options: Option<BTreeMap<String, String>>) -> PyResult<String> {
    let mut options = options.unwrap_or_default();
    options.insert("synth.groups".into(), groups.to_string());
    options.insert("synth.k".into(), k.to_string());
    cli::synth(&run_config(seed, Some(options))?).map_err(err)
}

/// Labels and edits for every record with gold, as JSON lines.
#[pyfunction]
#[pyo3(signature = (jsonl, options = None))]
fn annotate(jsonl: &str, options: Option<BTreeMap<String, String>>) -> PyResult<String> {
    Ok(cli::annotate(jsonl, &run_config(None, options)?).map_err(err)?.text)
}

/// Returns `(output_jsonl, weights_tsv)`. Without `weights`, fits them on
/// the input first.
#[pyfunction]
#[pyo3(signature = (jsonl, weights = None, seed = None, options = None))]
fn rerank(
    jsonl: &str,
    weights: Option<&str>,
    seed: Option<u64>,
    options: Option<BTreeMap<String, String>>,
) -> PyResult<(String, String)> {
    let config = run_config(seed, options)?;
    let given = weights.map(RankerWeights::from_tsv).transpose().map_err(err)?;
    let learn = given.is_none();
    let o = cli::rerank(jsonl, &config, given, learn).map_err(err)?;
    Ok((o.output.text, o.weights.to_tsv()))
}

#[pyfunction]
#[pyo3(signature = (jsonl, options = None))]
fn evaluate(jsonl: &str, options: Option<BTreeMap<String, String>>) -> PyResult<BTreeMap<String, f64>> {
    Ok(cli::eval(jsonl, &run_config(None, options)?).map_err(err)?.0)
}

/// Worst relative finite-difference error per parameter tensor.
#[pyfunction]
#[pyo3(signature = (seed = None, options = None))]
fn gradcheck(seed: Option<u64>, options: Option<BTreeMap<String, String>>) -> PyResult<Vec<(String, f64)>> {
    Ok(cli::gradcheck(&run_config(seed, options)?).map_err(err)?.per_param)
}

/// Trained scorer with its optimizer state.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: checkpoint::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Trains from JSON-lines records; `options` takes the same keys as a
    /// configuration file.
    #[staticmethod]
    #[pyo3(signature = (train, dev = None, seed = None, options = None))]
    fn train(
        py: Python<'_>,
        train: &str,
        dev: Option<&str>,
        seed: Option<u64>,
        options: Option<BTreeMap<String, String>>,
    ) -> PyResult<Self> {
        let config = run_config(seed, options)?;
        let o = py.detach(|| cli::train(train, dev, &config, None)).map_err(err)?;
        Ok(Self { inner: o.checkpoint })
    }

    /// Continues training until `epochs` epochs in total (default: one more).
    #[pyo3(signature = (train, dev = None, epochs = None))]
    fn resume(&mut self, py: Python<'_>, train: &str, dev: Option<&str>, epochs: Option<usize>) -> PyResult<()> {
        let ck = self.inner.clone();
        let mut config = RunConfig {
            model: ck.state.model.config.clone(),
            train: ck.state.config.clone(),
            ..RunConfig::default()
        };
        config.train.epochs = epochs.unwrap_or(ck.state.epoch + 1);
        let o = py.detach(|| cli::train(train, dev, &config, Some(ck))).map_err(err)?;
        self.inner = o.checkpoint;
        Ok(())
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = checkpoint::Checkpoint::load(path.as_ref()).map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::Checkpoint::from_text(text).map_err(err)?,
        })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.state.epoch
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.state.model.vocab.len()
    }

    /// Adds sentence and token scores to each record.
    #[pyo3(signature = (jsonl, baselines = false))]
    fn score(&self, py: Python<'_>, jsonl: &str, baselines: bool) -> PyResult<String> {
        Ok(py.detach(|| cli::score(jsonl, &self.inner, baselines)).map_err(err)?.text)
    }

    /// `(gamma, [f per hypothesis])` for one group.
    fn score_group(&self, source: &str, hypotheses: Vec<String>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let model = self.inner.scoring_model();
        let lc = model.config.lowercase;
        let hyps = hypotheses
            .iter()
            .map(|h| vernet::group::Hypothesis {
                tokens: textpipe::tokenize(h, lc),
                model_score: None,
            })
            .collect();
        let group = vernet::group::HypothesisGroup::new(textpipe::tokenize(source, lc), hyps).map_err(err)?;
        let s = model.score(&group, false).map_err(err)?;
        Ok((s.gamma, s.hypotheses.iter().map(|h| h.f).collect()))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.state.model.config.encoder;
        format!(
            "Checkpoint(epoch={}, d_model={}, layers={}, vocab={})",
            self.inner.state.epoch,
            c.d_model,
            c.layers,
            self.inner.state.model.vocab.len()
        )
    }
}

#[pymodule(name = "vernet")]
fn vernet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(extract_edits, m)?)?;
    m.add_function(wrap_pyfunction!(apply_edits, m)?)?;
    m.add_function(wrap_pyfunction!(label_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(f_beta, m)?)?;
    m.add_function(wrap_pyfunction!(gleu, m)?)?;
    m.add_function(wrap_pyfunction!(pcc, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_f05, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(annotate, m)?)?;
    m.add_function(wrap_pyfunction!(rerank, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
