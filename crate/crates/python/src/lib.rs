//! Python bindings: confusion networks, checkpoints, training and evaluation.

use std::collections::BTreeMap;

use confnet_dst::confnet::{self, Arc, ArcSet};
use confnet_dst::datagen::{self, NoiseModel};
use confnet_dst::encoder::EncoderVariant;
use confnet_dst::evalbench::{self, Mode};
use confnet_dst::numerics::Rng;
use confnet_dst::trainer::{self, Regime, TrainConfig};
use confnet_dst::Error;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

#[pyclass(name = "ConfusionNetwork", module = "confnet_py", from_py_object)]
#[derive(Clone)]
struct PyConfusionNetwork {
    inner: confnet::ConfusionNetwork,
}

#[pymethods]
impl PyConfusionNetwork {
    /// Builds a network from `[[(token, score), ...], ...]`.
    #[new]
    fn new(utterance_id: String, positions: Vec<Vec<(String, f64)>>) -> PyResult<Self> {
        let sets = positions
            .into_iter()
            .map(|arcs| ArcSet::new(arcs.into_iter().map(|(t, s)| Arc::new(t, s)).collect()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py)?;
        Ok(Self { inner: confnet::ConfusionNetwork::new(utterance_id, sets) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: confnet::parse_confnet(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_transcript(utterance_id: String, tokens: Vec<String>) -> PyResult<Self> {
        Ok(Self { inner: confnet::from_transcript(utterance_id, &tokens).map_err(to_py)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn utterance_id(&self) -> String {
        self.inner.utterance_id.clone()
    }

    #[getter]
    fn positions(&self) -> Vec<Vec<(String, f64)>> {
        self.inner
            .positions()
            .iter()
            .map(|p| p.iter().map(|a| (a.token.clone(), a.score)).collect())
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "ConfusionNetwork({:?}, positions={}, arcs={})",
            self.inner.utterance_id,
            self.inner.len(),
            self.inner.arc_count()
        )
    }

    fn prune(&self, threshold: f64) -> PyResult<Self> {
        Ok(Self { inner: confnet::prune(&self.inner, threshold).map_err(to_py)? })
    }

    fn truncate(&self, max_arcs: usize) -> PyResult<Self> {
        Ok(Self { inner: confnet::truncate_arcs(&self.inner, max_arcs).map_err(to_py)? })
    }

    /// Best `n` paths as `(tokens, score)`, best first.
    fn n_best(&self, n: usize) -> Vec<(Vec<String>, f64)> {
        confnet::n_best_paths(&self.inner, n)
            .into_iter()
            .map(|p| (p.tokens, p.score))
            .collect()
    }
}

#[pyclass(name = "Model", module = "confnet_py")]
struct PyModel {
    inner: confnet_dst::model::Model,
}

impl PyModel {
    fn named(&self, probs: &[f64]) -> BTreeMap<String, f64> {
        self.inner
            .ontology
            .pairs()
            .iter()
            .zip(probs)
            .map(|(sv, p)| (sv.to_string(), *p))
            .collect()
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: confnet_dst::model::Model::load(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    /// Ontology pairs as `slot=value` strings, in scorer order.
    #[getter]
    fn pairs(&self) -> Vec<String> {
        self.inner.ontology.pairs().iter().map(ToString::to_string).collect()
    }

    fn predict(&self, net: &PyConfusionNetwork) -> PyResult<BTreeMap<String, f64>> {
        let p = self.inner.predict_confnet(&net.inner).map_err(to_py)?;
        Ok(self.named(&p.probs))
    }

    fn predict_tokens(&self, tokens: Vec<String>) -> PyResult<BTreeMap<String, f64>> {
        let p = self.inner.predict_tokens(&tokens).map_err(to_py)?;
        Ok(self.named(&p.probs))
    }

    /// Weighted average over the `n` best paths of the preprocessed network.
    fn predict_asr(&self, net: &PyConfusionNetwork, n: usize) -> PyResult<BTreeMap<String, f64>> {
        let pre = self.inner.preprocess.apply(&net.inner).map_err(to_py)?;
        let p = self
            .inner
            .predict_asr_nlist(&confnet::n_best_paths(&pre, n))
            .map_err(to_py)?;
        Ok(self.named(&p.probs))
    }

    /// Per-position embeddings of the preprocessed network.
    fn encode(&self, net: &PyConfusionNetwork) -> PyResult<Vec<Vec<f64>>> {
        let pre = self.inner.preprocess.apply(&net.inner).map_err(to_py)?;
        let encs = self.inner.encode(&pre).map_err(to_py)?;
        Ok(encs.into_iter().map(|e| e.embedding.into_inner()).collect())
    }

    /// Attention heat map as CSV; V3 and V4 only.
    fn attention_csv(&self, net: &PyConfusionNetwork) -> PyResult<String> {
        Ok(evalbench::dump_attention(&self.inner, &net.inner).map_err(to_py)?.to_csv())
    }

    /// Metrics on a corpus file for `mode` (`confnet`, `confnet:K`, `asr-N`).
    #[pyo3(signature = (corpus_path, mode = "confnet", threshold = 0.5))]
    fn evaluate(&self, corpus_path: &str, mode: &str, threshold: f64) -> PyResult<BTreeMap<String, f64>> {
        let corpus = datagen::load_corpus(corpus_path).map_err(to_py)?;
        let r = evalbench::evaluate(&self.inner, &corpus, parse::<Mode>(mode)?, threshold).map_err(to_py)?;
        Ok(BTreeMap::from([
            ("joint_goal".to_string(), r.joint_goal),
            ("turn_inform".to_string(), r.turn_inform),
            ("turn_request".to_string(), r.turn_request),
            ("n_turns".to_string(), r.n_turns as f64),
        ]))
    }
}

/// Writes a synthetic corpus and returns it as JSONL.
#[pyfunction]
#[pyo3(signature = (dialogues, seed = 0, sub_prob = 0.5, max_confusions = 3, truth_drop = 0.3, slots = 4, values = 8))]
fn generate_corpus(
    dialogues: usize,
    seed: u64,
    sub_prob: f64,
    max_confusions: usize,
    truth_drop: f64,
    slots: usize,
    values: usize,
) -> PyResult<String> {
    let ontology = datagen::default_ontology(slots, values).map_err(to_py)?;
    let noise = NoiseModel { substitution_prob: sub_prob, max_confusions, truth_drop_prob: truth_drop };
    let corpus = datagen::generate_corpus(&ontology, dialogues, &noise, &mut Rng::new(seed)).map_err(to_py)?;
    let mut out = Vec::new();
    datagen::write_corpus(&corpus, &mut out).map_err(to_py)?;
    String::from_utf8(out).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Trains on corpus files, saves the best checkpoint to `out` and returns the
/// report as JSON.
#[pyfunction]
#[pyo3(signature = (train_path, dev_path, out, regime = "nonaug", variant = "v1", epochs = 10, seed = 0, emb_dim = 64, hidden_dim = 64, lr = 0.01, batch = 50, dropout = 0.2, lambda_ = 0.5))]
#[allow(clippy::too_many_arguments)]
fn train(
    train_path: &str,
    dev_path: &str,
    out: &str,
    regime: &str,
    variant: &str,
    epochs: usize,
    seed: u64,
    emb_dim: usize,
    hidden_dim: usize,
    lr: f64,
    batch: usize,
    dropout: f64,
    lambda_: f64,
) -> PyResult<String> {
    let config = TrainConfig {
        regime: parse::<Regime>(regime)?,
        variant: parse::<EncoderVariant>(variant)?,
        epochs,
        seed,
        emb_dim,
        hidden_dim,
        learning_rate: lr,
        batch_size: batch,
        dropout,
        lambda: lambda_,
        ..TrainConfig::default()
    };
    let train = datagen::load_corpus(train_path).map_err(to_py)?;
    let dev = datagen::load_corpus(dev_path).map_err(to_py)?;
    let ontology = datagen::infer_ontology([train.as_slice(), dev.as_slice()]).map_err(to_py)?;
    let (mut report, model) = trainer::train(&config, &train, &dev, &ontology).map_err(to_py)?;
    model.save(out).map_err(to_py)?;
    report.checkpoint = Some(out.to_string());
    serde_json::to_string(&report).map_err(json_err)
}

/// Worst relative error of analytic against finite-difference gradients on
/// a seeded random instance.
#[pyfunction]
#[pyo3(signature = (variant, seed = 0, dim = 8, hidden = 8))]
fn gradient_check(variant: &str, seed: u64, dim: usize, hidden: usize) -> PyResult<f64> {
    let r = trainer::gradient_check(parse::<EncoderVariant>(variant)?, seed, dim, hidden).map_err(to_py)?;
    Ok(r.max_rel_err)
}

#[pymodule]
fn confnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfusionNetwork>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    Ok(())
}
