//! Mini-batch SGD training for the four regimes: plain networks, networks
//! augmented with clean transcript lifts, joint training with the
//! similarity loss, and the N-best-list baseline.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confnet::{from_transcript, n_best_paths, ConfusionNetwork, Preprocess, EPSILON};
use crate::datagen::{augment, validate_against, Dialogue};
use crate::embeddings::{EmbeddingTable, Vocabulary, DEFAULT_DIM};
use crate::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::evalbench::{evaluate, EvalReport, Mode, DEFAULT_THRESHOLD};
use crate::model::{Example, L1Branch, Model, ModelGrads, Ontology};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    #[serde(rename = "nonaug")]
    NonAug,
    Aug,
    Joint,
    #[serde(rename = "asr-n")]
    AsrNBaseline,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::NonAug => "nonaug",
            Regime::Aug => "aug",
            Regime::Joint => "joint",
            Regime::AsrNBaseline => "asr-n",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonaug" => Ok(Regime::NonAug),
            "aug" => Ok(Regime::Aug),
            "joint" => Ok(Regime::Joint),
            "asr-n" => Ok(Regime::AsrNBaseline),
            other => Err(Error::Invalid(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub variant: EncoderVariant,
    pub max_arcs: usize,
    /// Hypotheses per turn for the N-best baseline.
    pub asr_list_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Similarity-loss weight; only read by the joint regime.
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub l1_branch: L1Branch,
    pub prune_threshold: f64,
    pub decision_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::NonAug,
            variant: EncoderVariant::V1,
            max_arcs: 5,
            asr_list_size: 5,
            learning_rate: 0.01,
            batch_size: 50,
            dropout: 0.2,
            lambda: 0.5,
            epochs: 10,
            seed: 0,
            emb_dim: DEFAULT_DIM,
            hidden_dim: DEFAULT_DIM,
            l1_branch: L1Branch::Confnet,
            prune_threshold: 0.001,
            decision_threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.max_arcs == 0 || self.asr_list_size == 0 {
            return fail("max_arcs and asr_list_size must be positive".into());
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be positive".into());
        }
        Ok(())
    }

    /// Mode used for dev evaluation.
    pub fn eval_mode(&self) -> Mode {
        match self.regime {
            Regime::AsrNBaseline => Mode::AsrN(self.asr_list_size),
            _ => Mode::Confnet { max_arcs: None },
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            prune_threshold: self.prune_threshold,
            max_arcs: self.max_arcs,
            ..Preprocess::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub examples_per_epoch: usize,
    /// Mean loss of the very first mini-batch, before any update.
    pub first_batch_loss: Option<f64>,
    /// Dev metrics of the freshly initialized model.
    pub initial_dev: EvalReport,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the selected checkpoint; 0 means the initial model.
    pub best_epoch: usize,
    pub best_dev: EvalReport,
    pub embedding_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Wall-clock numbers; excluded from reproducibility comparisons.
    pub timing: Timing,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
}

/// A preprocessed example with owned inputs.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub confnet: ConfusionNetwork,
    pub transcript: Option<ConfusionNetwork>,
    pub gold: Vec<f64>,
}

impl TrainExample {
    fn as_example(&self) -> Example<'_> {
        Example {
            confnet: &self.confnet,
            transcript: self.transcript.as_ref(),
            gold: &self.gold,
        }
    }
}

fn lift(id: &str, tokens: &[String]) -> Result<ConfusionNetwork> {
    if tokens.is_empty() {
        from_transcript(id, &[EPSILON])
    } else {
        from_transcript(id, tokens)
    }
}

/// Turns a corpus into per-turn training examples for `config.regime`.
pub fn build_examples(config: &TrainConfig, corpus: &[Dialogue], ontology: &Ontology) -> Result<Vec<TrainExample>> {
    let pre = config.preprocess();
    let source = match config.regime {
        Regime::Aug | Regime::AsrNBaseline => augment(corpus)?,
        _ => corpus.to_vec(),
    };
    let mut out = Vec::new();
    for d in &source {
        for turn in &d.turns {
            let gold = turn.gold_vector(ontology)?;
            let net = pre.apply(&turn.confnet)?;
            match config.regime {
                Regime::NonAug | Regime::Aug => out.push(TrainExample {
                    confnet: net,
                    transcript: None,
                    gold,
                }),
                Regime::Joint => out.push(TrainExample {
                    confnet: net,
                    transcript: Some(lift(&turn.confnet.utterance_id, &turn.transcript)?),
                    gold,
                }),
                Regime::AsrNBaseline => {
                    for (i, path) in n_best_paths(&net, config.asr_list_size).iter().enumerate() {
                        let id = format!("{}#{i}", turn.confnet.utterance_id);
                        out.push(TrainExample {
                            confnet: pre.apply(&lift(&id, &path.tokens)?)?,
                            transcript: None,
                            gold: gold.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sorted vocabulary over transcripts and every arc token of the corpora.
pub fn corpus_vocabulary<'a>(corpora: impl IntoIterator<Item = &'a [Dialogue]>) -> Vocabulary {
    let mut tokens = Vec::new();
    for turn in corpora.into_iter().flat_map(|c| c.iter()).flat_map(|d| &d.turns) {
        tokens.extend(turn.transcript.iter().cloned());
        for pos in turn.confnet.positions() {
            tokens.extend(pos.iter().map(|a| a.token.clone()));
        }
    }
    Vocabulary::sorted(tokens)
}

/// Fresh model for `config`. The RNG stream is split into fixed children so
/// the embedding table does not depend on the encoder variant.
pub fn init_model(config: &TrainConfig, ontology: Ontology, table: EmbeddingTable) -> Model {
    let mut root = Rng::new(config.seed);
    let _table_rng = root.fork();
    let mut init_rng = root.fork();
    let lambda = if config.regime == Regime::Joint { config.lambda } else { 0.0 };
    Model::init(ontology, table, config.variant, config.hidden_dim, lambda, config.preprocess(), &mut init_rng)
}

/// Embedding table seeded from `config.seed`.
pub fn default_table(config: &TrainConfig, vocab: Vocabulary) -> Result<EmbeddingTable> {
    let mut root = Rng::new(config.seed);
    let mut table_rng = root.fork();
    EmbeddingTable::build(vocab, config.emb_dim, &mut table_rng)
}

/// Runs one mini-batch: mean loss and mean gradients. Per-example work may
/// run in parallel; gradients are summed in example order.
pub fn batch_step(
    model: &Model,
    batch: &[&TrainExample],
    l1_branch: L1Branch,
    dropout: f64,
    rng: &mut Rng,
) -> Result<(f64, ModelGrads)> {
    let seeds: Vec<u64> = if dropout > 0.0 {
        batch.iter().map(|_| rng.next_u64()).collect()
    } else {
        vec![0; batch.len()]
    };
    let results = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(ex, &seed)| {
            let mut r = Rng::new(seed);
            let drop = (dropout > 0.0).then_some((dropout, &mut r));
            model.loss_and_grads(ex.as_example(), l1_branch, drop)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = ModelGrads::zeros(model.encoder.dim(), &model.params);
    let mut loss = 0.0;
    for (parts, g) in &results {
        loss += parts.total;
        grads.add(g);
    }
    let scale = 1.0 / batch.len() as f64;
    grads.encoder.w1.data_mut().iter_mut().for_each(|x| *x *= scale);
    grads.encoder.w2.iter_mut().for_each(|x| *x *= scale);
    grads.wf.data_mut().iter_mut().for_each(|x| *x *= scale);
    grads.bf.iter_mut().for_each(|x| *x *= scale);
    grads.sv.data_mut().iter_mut().for_each(|x| *x *= scale);
    grads.bias.iter_mut().for_each(|x| *x *= scale);
    Ok((loss * scale, grads))
}

/// Trains from an initialized model and returns the report together with
/// the best-dev model (earliest epoch on ties, epoch 0 being the initial
/// model).
pub fn train_model(
    config: &TrainConfig,
    mut model: Model,
    train: &[Dialogue],
    dev: &[Dialogue],
) -> Result<(TrainReport, Model)> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Invalid("training and dev corpora must be non-empty".into()));
    }
    validate_against(train, &model.ontology)?;
    validate_against(dev, &model.ontology)?;
    let start = Instant::now();
    let examples = build_examples(config, train, &model.ontology)?;
    let fingerprint = model.embeddings.fingerprint();

    let mut root = Rng::new(config.seed);
    let _ = (root.fork(), root.fork());
    let mut shuffle_rng = root.fork();
    let mut dropout_rng = root.fork();

    let mode = config.eval_mode();
    let initial_dev = evaluate(&model, dev, mode, config.decision_threshold)?;
    let mut best = (0usize, initial_dev.clone(), model.clone());
    let mut records = Vec::with_capacity(config.epochs);
    let mut first_batch_loss = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_step(&model, &batch, config.l1_branch, config.dropout, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            first_batch_loss.get_or_insert(loss);
            total += loss * batch.len() as f64;
            model.apply_grads(&grads, config.learning_rate);
            if !model.is_finite() {
                return Err(Error::NonFinite(format!("parameters at epoch {epoch}, batch {b}")));
            }
        }
        let dev_report = evaluate(&model, dev, mode, config.decision_threshold)?;
        if dev_report.joint_goal > best.1.joint_goal {
            best = (epoch, dev_report.clone(), model.clone());
        }
        records.push(EpochRecord {
            epoch,
            train_loss: total / examples.len() as f64,
            dev: dev_report,
        });
    }
    debug_assert_eq!(model.embeddings.fingerprint(), fingerprint);
    let report = TrainReport {
        config: config.clone(),
        examples_per_epoch: examples.len(),
        first_batch_loss,
        initial_dev,
        epochs: records,
        best_epoch: best.0,
        best_dev: best.1,
        embedding_fingerprint: fingerprint,
        checkpoint: None,
        timing: Timing {
            train_seconds: start.elapsed().as_secs_f64(),
        },
    };
    Ok((report, best.2))
}

/// Builds the vocabulary and table from the training corpus, initializes a
/// model and trains it.
pub fn train(
    config: &TrainConfig,
    train_corpus: &[Dialogue],
    dev_corpus: &[Dialogue],
    ontology: &Ontology,
) -> Result<(TrainReport, Model)> {
    config.validate()?;
    let vocab = corpus_vocabulary([train_corpus]);
    let table = default_table(config, vocab)?;
    let model = init_model(config, ontology.clone(), table);
    train_model(config, model, train_corpus, dev_corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub variant: EncoderVariant,
    pub seed: u64,
    pub positions: usize,
    pub arcs: usize,
    pub num_params: usize,
    pub max_rel_err: f64,
}

/// Central-difference check of the full pipeline (encoder, `f`, scorers and
/// the combined loss with lambda 0.5) on a seeded random instance with at
/// most four positions of at most four arcs. Embedding rows are drawn from
/// [-1, 1] rather than the training init.
pub fn gradient_check(variant: EncoderVariant, seed: u64, dim: usize, hidden: usize) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let mut vocab_tokens = words.clone();
    vocab_tokens.push(EPSILON.to_string());
    // unit-scale rows keep every gradient coordinate well above finite-difference noise
    let rows: String = words
        .iter()
        .map(|w| {
            let v: Vec<String> = (0..dim).map(|_| rng.uniform_in(-1.0, 1.0).to_string()).collect();
            format!("{w} {}\n", v.join(" "))
        })
        .collect();
    let table = EmbeddingTable::from_text(&rows, Vocabulary::sorted(vocab_tokens), dim, &mut rng.fork())?;
    let ontology = crate::datagen::default_ontology(2, 3)?;
    let model = Model::init(ontology, table, variant, hidden, 0.5, Preprocess::default(), &mut rng.fork());

    let mut positions = Vec::new();
    let mut arcs = 0;
    for _ in 0..1 + rng.below(4) {
        let k = 1 + rng.below(4);
        let mut pool: Vec<&str> = words.iter().map(String::as_str).chain([EPSILON]).collect();
        rng.shuffle(&mut pool);
        let raw: Vec<f64> = (0..k).map(|_| 0.05 + rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let set = pool[..k]
            .iter()
            .zip(&raw)
            .map(|(t, s)| crate::confnet::Arc::new(*t, s / total))
            .collect();
        positions.push(crate::confnet::ArcSet::new(set)?);
        arcs = arcs.max(k);
    }
    let net = ConfusionNetwork::new("gradcheck", positions);
    let transcript: Vec<&str> = (0..1 + rng.below(4)).map(|_| words[rng.below(words.len())].as_str()).collect();
    let transcript = from_transcript("gradcheck", &transcript)?;
    let gold: Vec<f64> = (0..model.ontology.num_pairs()).map(|_| if rng.bernoulli(0.3) { 1.0 } else { 0.0 }).collect();

    let example = Example { confnet: &net, transcript: Some(&transcript), gold: &gold };
    let (_, grads) = model.loss_and_grads(example, L1Branch::Confnet, None)?;
    let mut x = model.encoder.to_flat();
    let n_enc = x.len();
    x.extend(model.params.to_flat());
    let mut analytic = grads.encoder.to_flat();
    analytic.extend(grads.model_flat());
    let mut probe = model.clone();
    let max_rel_err = crate::numerics::grad_check(
        |flat| {
            probe.encoder.set_flat(&flat[..n_enc]);
            probe.params.set_flat(&flat[n_enc..]);
            probe.loss(example, L1Branch::Confnet).map(|l| l.total).unwrap_or(f64::NAN)
        },
        &x,
        &analytic,
        1e-5,
    )?;
    Ok(GradCheckReport {
        variant,
        seed,
        positions: net.len(),
        arcs,
        num_params: x.len(),
        max_rel_err,
    })
}
