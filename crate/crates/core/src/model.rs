//! Slot-value classifier on top of encoded networks.
//!
//! A shared context encoder `f` mean-pools `tanh(Wf · e_t + bf)` over the
//! position embeddings; every ontology (slot, value) pair then has its own
//! logistic scorer over the context vector. Training combines the binary
//! cross-entropy `L1` with the squared distance `L2` between the context
//! vectors of a clean transcript and of its noisy network:
//! `L = L1 + λ · L2`.

use std::collections::HashSet;
use std::fmt;
use std::path::Path as FsPath;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::confnet::{from_transcript, ConfusionNetwork, Path, Preprocess, EPSILON};
use crate::embeddings::EmbeddingTable;
use crate::encoder::{
    accumulate_position_grad, encode_network, EncoderGrads, EncoderParams, EncoderVariant,
    PositionEncoding,
};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, tanh_grad_from_output, Mat, Rng, Vector};

/// Pseudo-slot whose values are the requestable slot names.
pub const REQUEST_SLOT: &str = "request";

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the log.
pub const PROB_EPS: f64 = 1e-12;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotValue {
    pub slot: String,
    pub value: String,
}

impl SlotValue {
    pub fn new(slot: impl Into<String>, value: impl Into<String>) -> Self {
        SlotValue {
            slot: slot.into(),
            value: value.into(),
        }
    }

    pub fn is_request(&self) -> bool {
        self.slot == REQUEST_SLOT
    }
}

impl fmt::Display for SlotValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.slot, self.value)
    }
}

/// Informable slots with their values, plus requestable slot names.
///
/// Every scorer corresponds to one entry of [`Ontology::pairs`]: all
/// informable (slot, value) pairs in declaration order, then one
/// `(request, slot)` pair per requestable slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawOntology", into = "RawOntology")]
pub struct Ontology {
    slots: Vec<Slot>,
    requestable: Vec<String>,
    pairs: Vec<SlotValue>,
}

#[derive(Serialize, Deserialize)]
struct RawOntology {
    slots: Vec<Slot>,
    requestable: Vec<String>,
}

impl TryFrom<RawOntology> for Ontology {
    type Error = Error;
    fn try_from(raw: RawOntology) -> Result<Self> {
        Ontology::new(raw.slots, raw.requestable)
    }
}

impl From<Ontology> for RawOntology {
    fn from(o: Ontology) -> Self {
        RawOntology {
            slots: o.slots,
            requestable: o.requestable,
        }
    }
}

impl Ontology {
    pub fn new(slots: Vec<Slot>, requestable: Vec<String>) -> Result<Self> {
        if slots.is_empty() && requestable.is_empty() {
            return Err(Error::Invalid("ontology is empty".into()));
        }
        let mut names = HashSet::new();
        for s in &slots {
            if s.name == REQUEST_SLOT {
                return Err(Error::Invalid(format!("slot name {REQUEST_SLOT:?} is reserved")));
            }
            if !names.insert(s.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate slot {:?}", s.name)));
            }
            if s.values.is_empty() {
                return Err(Error::Invalid(format!("slot {:?} has no values", s.name)));
            }
            let unique: HashSet<&String> = s.values.iter().collect();
            if unique.len() != s.values.len() {
                return Err(Error::Invalid(format!("slot {:?} has duplicate values", s.name)));
            }
        }
        let unique: HashSet<&String> = requestable.iter().collect();
        if unique.len() != requestable.len() {
            return Err(Error::Invalid("duplicate requestable slot".into()));
        }
        let pairs = slots
            .iter()
            .flat_map(|s| s.values.iter().map(|v| SlotValue::new(&s.name, v)))
            .chain(requestable.iter().map(|r| SlotValue::new(REQUEST_SLOT, r)))
            .collect();
        Ok(Ontology {
            slots,
            requestable,
            pairs,
        })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn requestable(&self) -> &[String] {
        &self.requestable
    }

    pub fn pairs(&self) -> &[SlotValue] {
        &self.pairs
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair_index(&self, slot: &str, value: &str) -> Option<usize> {
        self.pairs.iter().position(|p| p.slot == slot && p.value == value)
    }

    pub fn has_informable(&self, slot: &str, value: &str) -> bool {
        slot != REQUEST_SLOT && self.pair_index(slot, value).is_some()
    }

    /// 0/1 targets aligned with [`Ontology::pairs`].
    pub fn gold_vector<'a, I, R>(&self, informs: I, requests: R) -> Result<Vec<f64>>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
        R: IntoIterator<Item = &'a str>,
    {
        let mut gold = vec![0.0; self.pairs.len()];
        for (slot, value) in informs {
            let i = self
                .pair_index(slot, value)
                .filter(|_| slot != REQUEST_SLOT)
                .ok_or_else(|| Error::Invalid(format!("inform {slot}={value} not in ontology")))?;
            gold[i] = 1.0;
        }
        for slot in requests {
            let i = self
                .pair_index(REQUEST_SLOT, slot)
                .ok_or_else(|| Error::Invalid(format!("request {slot:?} not in ontology")))?;
            gold[i] = 1.0;
        }
        Ok(gold)
    }
}

/// Which branch feeds the classification loss in joint training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L1Branch {
    #[default]
    Confnet,
    Both,
}

impl FromStr for L1Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confnet" => Ok(L1Branch::Confnet),
            "both" => Ok(L1Branch::Both),
            other => Err(Error::Invalid(format!("unknown L1 branch {other:?}"))),
        }
    }
}

/// Context encoder and scorer weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `h × d` projection of `f`.
    pub wf: Mat,
    pub bf: Vector,
    /// One `h`-vector per ontology pair, stacked as rows.
    pub sv: Mat,
    pub bias: Vector,
    pub lambda: f64,
}

impl ModelParams {
    pub fn init(input_dim: usize, hidden_dim: usize, num_pairs: usize, lambda: f64, rng: &mut Rng) -> Self {
        let wf = Mat::uniform(hidden_dim, input_dim, 1.0 / (input_dim as f64).sqrt(), rng);
        let sv = Mat::uniform(num_pairs, hidden_dim, 1.0 / (hidden_dim as f64).sqrt(), rng);
        ModelParams {
            wf,
            bf: Vector::zeros(hidden_dim),
            sv,
            bias: Vector::zeros(num_pairs),
            lambda,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, num_pairs: usize) -> Self {
        ModelParams {
            wf: Mat::zeros(hidden_dim, input_dim),
            bf: Vector::zeros(hidden_dim),
            sv: Mat::zeros(num_pairs, hidden_dim),
            bias: Vector::zeros(num_pairs),
            lambda: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.wf.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.wf.rows()
    }

    pub fn num_pairs(&self) -> usize {
        self.bias.len()
    }

    /// `wf`, `bf`, `sv`, `bias` concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        [self.wf.data(), &self.bf, self.sv.data(), &self.bias].concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut rest = flat;
        for dst in [
            self.wf.data_mut(),
            &mut self.bf,
            self.sv.data_mut(),
            &mut self.bias,
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.wf.is_finite() && self.bf.is_finite() && self.sv.is_finite() && self.bias.is_finite()
    }
}

/// Probabilities aligned with [`Ontology::pairs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prediction {
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn get(&self, ontology: &Ontology, slot: &str, value: &str) -> Option<f64> {
        ontology.pair_index(slot, value).map(|i| self.probs[i])
    }
}

/// Mean-pooled `tanh(wf · e_t + bf)`.
pub fn context(params: &ModelParams, encs: &[PositionEncoding]) -> Result<Vector> {
    context_of(params, encs.iter().map(|e| e.embedding.as_ref()))
}

fn context_of<'a>(params: &ModelParams, encs: impl ExactSizeIterator<Item = &'a [f64]>) -> Result<Vector> {
    let t = encs.len();
    if t == 0 {
        return Err(Error::Invalid("context of an empty sequence".into()));
    }
    let mut c = Vector::zeros(params.hidden_dim());
    for e in encs {
        if e.len() != params.input_dim() {
            return Err(Error::Dimension(format!(
                "position embedding of length {} for context input {}",
                e.len(),
                params.input_dim()
            )));
        }
        let mut z = params.wf.matvec_unchecked(e);
        z.axpy(1.0, &params.bf);
        c.axpy(1.0, &z.map(f64::tanh));
    }
    Ok(c.scaled(1.0 / t as f64))
}

fn scores_from_context(params: &ModelParams, c: &[f64]) -> Prediction {
    let logits = params.sv.matvec_unchecked(c);
    Prediction {
        probs: logits
            .iter()
            .zip(params.bias.iter())
            .map(|(l, b)| sigmoid(l + b))
            .collect(),
    }
}

pub fn predict(params: &ModelParams, encs: &[PositionEncoding]) -> Result<Prediction> {
    Ok(scores_from_context(params, &context(params, encs)?))
}

/// Mean binary cross-entropy over pairs.
pub fn bce_loss(pred: &Prediction, gold: &[f64]) -> Result<f64> {
    if gold.len() != pred.probs.len() {
        return Err(Error::Invalid(format!(
            "gold labels cover {} pairs, prediction has {}",
            gold.len(),
            pred.probs.len()
        )));
    }
    let n = gold.len().max(1) as f64;
    Ok(pred
        .probs
        .iter()
        .zip(gold)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n)
}

/// Squared Euclidean distance.
pub fn similarity_loss(c_transcript: &[f64], c_confnet: &[f64]) -> Result<f64> {
    if c_transcript.len() != c_confnet.len() {
        return Err(Error::Dimension(format!(
            "similarity loss on vectors of length {} and {}",
            c_transcript.len(),
            c_confnet.len()
        )));
    }
    Ok(c_transcript
        .iter()
        .zip(c_confnet)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

pub fn combined_loss(l1: f64, l2: f64, lambda: f64) -> f64 {
    l1 + lambda * l2
}

/// Gradients for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub wf: Mat,
    pub bf: Vector,
    pub sv: Mat,
    pub bias: Vector,
}

impl ModelGrads {
    pub fn zeros(encoder_dim: usize, params: &ModelParams) -> Self {
        ModelGrads {
            encoder: EncoderGrads::zeros(encoder_dim),
            wf: Mat::zeros(params.hidden_dim(), params.input_dim()),
            bf: Vector::zeros(params.hidden_dim()),
            sv: Mat::zeros(params.num_pairs(), params.hidden_dim()),
            bias: Vector::zeros(params.num_pairs()),
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        self.encoder.add(&other.encoder);
        self.wf.axpy(1.0, &other.wf);
        self.bf.axpy(1.0, &other.bf);
        self.sv.axpy(1.0, &other.sv);
        self.bias.axpy(1.0, &other.bias);
    }

    /// Same layout as [`ModelParams::to_flat`].
    pub fn model_flat(&self) -> Vec<f64> {
        [self.wf.data(), &self.bf, self.sv.data(), &self.bias].concat()
    }
}

/// A full tracker: frozen embeddings, encoder, context encoder and scorers,
/// plus the preprocessing applied to every incoming network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub version: u32,
    pub ontology: Ontology,
    pub preprocess: Preprocess,
    pub embeddings: EmbeddingTable,
    pub encoder: EncoderParams,
    pub params: ModelParams,
}

/// One training example: the network, the clean transcript when the loss
/// needs it, and 0/1 targets over the ontology pairs.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub confnet: &'a ConfusionNetwork,
    pub transcript: Option<&'a ConfusionNetwork>,
    pub gold: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

/// Forward state of one branch, kept for the backward pass.
struct Branch {
    /// Position embeddings after dropout.
    inputs: Vec<Vector>,
    /// Dropout multipliers per position (empty when dropout is off).
    masks: Vec<Vec<f64>>,
    hidden: Vec<Vector>,
    context: Vector,
}

fn dropout_masks(t: usize, d: usize, p: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let keep = 1.0 / (1.0 - p);
    (0..t)
        .map(|_| (0..d).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect())
        .collect()
}

impl Model {
    pub fn init(
        ontology: Ontology,
        embeddings: EmbeddingTable,
        variant: EncoderVariant,
        hidden_dim: usize,
        lambda: f64,
        preprocess: Preprocess,
        rng: &mut Rng,
    ) -> Self {
        let d = embeddings.dim();
        let encoder = EncoderParams::init(variant, d, rng);
        let params = ModelParams::init(d, hidden_dim, ontology.num_pairs(), lambda, rng);
        Model {
            version: CHECKPOINT_VERSION,
            ontology,
            preprocess,
            embeddings,
            encoder,
            params,
        }
    }

    pub fn variant(&self) -> EncoderVariant {
        self.encoder.variant
    }

    /// Encodes an already preprocessed network; an empty one becomes a
    /// single `<eps>` position so the context is always defined.
    pub fn encode(&self, net: &ConfusionNetwork) -> Result<Vec<PositionEncoding>> {
        if net.is_empty() {
            let eps = from_transcript(net.utterance_id.clone(), &[EPSILON])?;
            return encode_network(&self.encoder, &self.embeddings, &eps);
        }
        encode_network(&self.encoder, &self.embeddings, net)
    }

    /// Embedding sequence for a clean token sequence: the single-arc lift
    /// under the plain weighted-sum encoder, i.e. the raw embedding rows.
    pub fn transcript_embeddings<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<Vector> {
        if tokens.is_empty() {
            return vec![Vector::from(self.embeddings.lookup(EPSILON).to_vec())];
        }
        tokens
            .iter()
            .map(|t| Vector::from(self.embeddings.lookup(t.as_ref()).to_vec()))
            .collect()
    }

    pub fn predict_confnet(&self, net: &ConfusionNetwork) -> Result<Prediction> {
        let net = self.preprocess.apply(net)?;
        predict(&self.params, &self.encode(&net)?)
    }

    /// Prediction for a clean hypothesis, lifted to a single-arc network and
    /// run through the model's own encoder.
    pub fn predict_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Prediction> {
        let net = if tokens.is_empty() {
            from_transcript("hyp", &[EPSILON])?
        } else {
            from_transcript("hyp", tokens)?
        };
        predict(&self.params, &self.encode(&net)?)
    }

    /// Score-weighted average of per-hypothesis predictions, weights
    /// normalized to sum to one.
    pub fn predict_asr_nlist(&self, hyps: &[Path]) -> Result<Prediction> {
        if hyps.is_empty() {
            return Err(Error::Invalid("empty hypothesis list".into()));
        }
        let total: f64 = hyps.iter().map(|h| h.score).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Invalid("hypothesis scores sum to zero".into()));
        }
        let mut probs = vec![0.0; self.ontology.num_pairs()];
        for h in hyps {
            let w = h.score / total;
            let p = self.predict_tokens(&h.tokens)?;
            for (acc, x) in probs.iter_mut().zip(&p.probs) {
                *acc += w * x;
            }
        }
        Ok(Prediction { probs })
    }

    fn branch_forward(&self, embeddings: Vec<Vector>, dropout: Option<(f64, &mut Rng)>) -> Result<Branch> {
        let d = self.params.input_dim();
        let (inputs, masks) = match dropout {
            Some((p, rng)) if p > 0.0 => {
                let masks = dropout_masks(embeddings.len(), d, p, rng);
                let inputs = embeddings
                    .into_iter()
                    .zip(&masks)
                    .map(|(e, m)| Vector::from(e.iter().zip(m).map(|(x, k)| x * k).collect::<Vec<_>>()))
                    .collect();
                (inputs, masks)
            }
            _ => (embeddings, Vec::new()),
        };
        let mut hidden = Vec::with_capacity(inputs.len());
        let mut c = Vector::zeros(self.params.hidden_dim());
        for e in &inputs {
            if e.len() != d {
                return Err(Error::Dimension(format!("embedding length {} for input {d}", e.len())));
            }
            let mut z = self.params.wf.matvec_unchecked(e);
            z.axpy(1.0, &self.params.bf);
            let h = z.map(f64::tanh);
            c.axpy(1.0, &h);
            hidden.push(h);
        }
        if hidden.is_empty() {
            return Err(Error::Invalid("context of an empty sequence".into()));
        }
        let context = c.scaled(1.0 / hidden.len() as f64);
        Ok(Branch {
            inputs,
            masks,
            hidden,
            context,
        })
    }

    /// Adds `∂L/∂c` for the classification loss on `c` into `dc` and the
    /// scorer gradients into `grads`; returns the loss.
    fn classifier_backward(&self, c: &[f64], gold: &[f64], dc: &mut [f64], grads: &mut ModelGrads) -> Result<f64> {
        let pred = scores_from_context(&self.params, c);
        let loss = bce_loss(&pred, gold)?;
        let n = gold.len().max(1) as f64;
        for (k, (&p, &y)) in pred.probs.iter().zip(gold).enumerate() {
            // clamped probabilities make the loss locally constant
            let dlogit = if p < PROB_EPS || p > 1.0 - PROB_EPS {
                0.0
            } else {
                (p - y) / n
            };
            if dlogit == 0.0 {
                continue;
            }
            grads.bias[k] += dlogit;
            let row = self.params.sv.row(k);
            for j in 0..dc.len() {
                grads.sv.data_mut()[k * c.len() + j] += dlogit * c[j];
                dc[j] += dlogit * row[j];
            }
        }
        Ok(loss)
    }

    /// Backward through `f`; returns `∂L/∂e_t` before dropout.
    fn context_backward(&self, branch: &Branch, dc: &[f64], grads: &mut ModelGrads) -> Vec<Vector> {
        let inv_t = 1.0 / branch.hidden.len() as f64;
        branch
            .hidden
            .iter()
            .zip(&branch.inputs)
            .enumerate()
            .map(|(t, (h, e))| {
                let dz: Vec<f64> = h
                    .iter()
                    .zip(dc)
                    .map(|(&y, &g)| g * inv_t * tanh_grad_from_output(y))
                    .collect();
                grads.wf.add_outer(1.0, &dz, e);
                grads.bf.axpy(1.0, &dz);
                let mut de = self.params.wf.matvec_transposed(&dz);
                if let Some(mask) = branch.masks.get(t) {
                    for (g, m) in de.iter_mut().zip(mask) {
                        *g *= m;
                    }
                }
                de
            })
            .collect()
    }

    /// Loss and gradients for one example. `example.confnet` must already be
    /// preprocessed. With `dropout`, position embeddings of both branches
    /// get fresh inverted-dropout masks from the generator.
    pub fn loss_and_grads(
        &self,
        example: Example<'_>,
        l1_branch: L1Branch,
        mut dropout: Option<(f64, &mut Rng)>,
    ) -> Result<(LossParts, ModelGrads)> {
        let lambda = self.params.lambda;
        let mut grads = ModelGrads::zeros(self.encoder.dim(), &self.params);
        let cn_net;
        let net = if example.confnet.is_empty() {
            cn_net = from_transcript(example.confnet.utterance_id.clone(), &[EPSILON])?;
            &cn_net
        } else {
            example.confnet
        };
        let cn_embeddings: Vec<Vector> = encode_network(&self.encoder, &self.embeddings, net)?
            .into_iter()
            .map(|e| e.embedding)
            .collect();
        let cn = self.branch_forward(cn_embeddings, dropout.as_mut().map(|(p, r)| (*p, &mut **r)))?;
        let h = self.params.hidden_dim();
        let mut dc_cn = vec![0.0; h];
        let mut l1 = self.classifier_backward(&cn.context, example.gold, &mut dc_cn, &mut grads)?;

        let mut l2 = 0.0;
        let needs_transcript = lambda != 0.0 || l1_branch == L1Branch::Both;
        if let (Some(tr_net), true) = (example.transcript, needs_transcript) {
            let tokens: Vec<&str> = tr_net
                .positions()
                .iter()
                .map(|p| p.top().token.as_str())
                .collect();
            let tr = self.branch_forward(
                self.transcript_embeddings(&tokens),
                dropout.as_mut().map(|(p, r)| (*p, &mut **r)),
            )?;
            let mut dc_tr = vec![0.0; h];
            if l1_branch == L1Branch::Both {
                l1 += self.classifier_backward(&tr.context, example.gold, &mut dc_tr, &mut grads)?;
            }
            l2 = similarity_loss(&tr.context, &cn.context)?;
            for j in 0..h {
                let diff = 2.0 * lambda * (tr.context[j] - cn.context[j]);
                dc_tr[j] += diff;
                dc_cn[j] -= diff;
            }
            // transcript embeddings are frozen rows: nothing flows past f
            self.context_backward(&tr, &dc_tr, &mut grads);
        }

        let de = self.context_backward(&cn, &dc_cn, &mut grads);
        for (pos, g) in net.positions().iter().zip(&de) {
            accumulate_position_grad(&self.encoder, &self.embeddings, pos, g, &mut grads.encoder)?;
        }
        let parts = LossParts {
            l1,
            l2,
            total: combined_loss(l1, l2, lambda),
        };
        Ok((parts, grads))
    }

    /// Forward-only version of [`Model::loss_and_grads`] without dropout.
    pub fn loss(&self, example: Example<'_>, l1_branch: L1Branch) -> Result<LossParts> {
        let encs = self.encode(example.confnet)?;
        let c_cn = context(&self.params, &encs)?;
        let mut l1 = bce_loss(&scores_from_context(&self.params, &c_cn), example.gold)?;
        let mut l2 = 0.0;
        let lambda = self.params.lambda;
        if let (Some(tr_net), true) = (example.transcript, lambda != 0.0 || l1_branch == L1Branch::Both) {
            let tokens: Vec<&str> = tr_net.positions().iter().map(|p| p.top().token.as_str()).collect();
            let emb = self.transcript_embeddings(&tokens);
            let c_tr = context_of(&self.params, emb.iter().map(|v| v.as_ref()))?;
            if l1_branch == L1Branch::Both {
                l1 += bce_loss(&scores_from_context(&self.params, &c_tr), example.gold)?;
            }
            l2 = similarity_loss(&c_tr, &c_cn)?;
        }
        Ok(LossParts {
            l1,
            l2,
            total: combined_loss(l1, l2, lambda),
        })
    }

    /// Plain SGD step.
    pub fn apply_grads(&mut self, grads: &ModelGrads, learning_rate: f64) {
        if self.encoder.variant.uses_w1() {
            self.encoder.w1.axpy(-learning_rate, &grads.encoder.w1);
        }
        if self.encoder.variant.has_attention() {
            self.encoder.w2.axpy(-learning_rate, &grads.encoder.w2);
        }
        self.params.wf.axpy(-learning_rate, &grads.wf);
        self.params.bf.axpy(-learning_rate, &grads.bf);
        self.params.sv.axpy(-learning_rate, &grads.sv);
        self.params.bias.axpy(-learning_rate, &grads.bias);
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.params.is_finite()
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Model = serde_json::from_str(text)?;
        if model.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                model.version
            )));
        }
        let d = model.embeddings.dim();
        let p = &model.params;
        let consistent = model.encoder.dim() == d
            && model.encoder.w1.rows() == d
            && model.encoder.w1.cols() == d
            && p.input_dim() == d
            && p.bf.len() == p.hidden_dim()
            && p.sv.rows() == model.ontology.num_pairs()
            && p.sv.cols() == p.hidden_dim()
            && p.bias.len() == model.ontology.num_pairs()
            && model.is_finite();
        if !consistent {
            return Err(Error::Parse("checkpoint shapes are inconsistent".into()));
        }
        Ok(model)
    }
}
