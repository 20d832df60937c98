//! Confusion-network encoder.
//!
//! Each position (a set of weighted arcs) is reduced to one `d`-dimensional
//! vector, so a network becomes a plain sequence of embeddings that any
//! token-sequence model can consume. Four reductions are supported:
//!
//! | variant | position embedding |
//! |---------|--------------------|
//! | `V1` | `Σ_i π_i · emb(w_i)` |
//! | `V2` | `Σ_i π_i · tanh(W1 · emb(w_i))` |
//! | `V3` | `Σ_i α_i · q_i`, `q_i = tanh(W1 · emb(w_i))`, `α = softmax(w2ᵀ q)` |
//! | `V4` | as V3 but with `q_i = tanh(W1 · (π_i · emb(w_i)))` |
//!
//! `π_i` is the arc's confidence score. V3 never reads the scores. The
//! embedding table is frozen, so backward passes only produce gradients for
//! `W1` and `w2`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::confnet::{ArcSet, ConfusionNetwork};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::numerics::{softmax, softmax_backward, tanh_grad_from_output, Mat, Rng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    V1,
    V2,
    V3,
    V4,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 4] = [
        EncoderVariant::V1,
        EncoderVariant::V2,
        EncoderVariant::V3,
        EncoderVariant::V4,
    ];

    pub fn has_attention(self) -> bool {
        matches!(self, EncoderVariant::V3 | EncoderVariant::V4)
    }

    pub fn uses_w1(self) -> bool {
        self != EncoderVariant::V1
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EncoderVariant::V1 => "v1",
            EncoderVariant::V2 => "v2",
            EncoderVariant::V3 => "v3",
            EncoderVariant::V4 => "v4",
        };
        f.write_str(s)
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(EncoderVariant::V1),
            "v2" => Ok(EncoderVariant::V2),
            "v3" => Ok(EncoderVariant::V3),
            "v4" => Ok(EncoderVariant::V4),
            other => Err(Error::Invalid(format!("unknown encoder variant {other:?}"))),
        }
    }
}

/// Trainable encoder weights. Unused weights are still stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub variant: EncoderVariant,
    pub w1: Mat,
    pub w2: Vector,
}

impl EncoderParams {
    /// Entries uniform in `[-1/√d, 1/√d]`.
    pub fn init(variant: EncoderVariant, dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let w1 = Mat::uniform(dim, dim, bound, rng);
        let w2 = Vector::from((0..dim).map(|_| rng.uniform_in(-bound, bound)).collect::<Vec<_>>());
        EncoderParams { variant, w1, w2 }
    }

    pub fn dim(&self) -> usize {
        self.w2.len()
    }

    pub fn num_params(&self) -> usize {
        self.w1.data().len() + self.w2.len()
    }

    /// `W1` row-major followed by `w2`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w1.data().to_vec();
        v.extend_from_slice(&self.w2);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.w1.data().len();
        self.w1.data_mut().copy_from_slice(&flat[..n]);
        self.w2.copy_from_slice(&flat[n..]);
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite() && self.w2.is_finite()
    }
}

/// Gradients with respect to [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w1: Mat,
    pub w2: Vector,
}

impl EncoderGrads {
    pub fn zeros(dim: usize) -> Self {
        EncoderGrads {
            w1: Mat::zeros(dim, dim),
            w2: Vector::zeros(dim),
        }
    }

    pub fn add(&mut self, other: &EncoderGrads) {
        self.w1.axpy(1.0, &other.w1);
        self.w2.axpy(1.0, &other.w2);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w1.data().to_vec();
        v.extend_from_slice(&self.w2);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEncoding {
    pub embedding: Vector,
    /// Per-arc attention, in arc order; present for V3 and V4 only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vector>,
}

/// Forward intermediates for one position.
struct PositionCache {
    /// Input to `W1` per arc: `emb` (V2, V3) or `π · emb` (V4).
    inputs: Vec<Vector>,
    /// `tanh(W1 · input)` per arc.
    hidden: Vec<Vector>,
    attention: Option<Vector>,
    embedding: Vector,
}

fn check_dims(params: &EncoderParams, table: &EmbeddingTable) -> Result<()> {
    if params.dim() != table.dim() || params.w1.rows() != table.dim() || params.w1.cols() != table.dim() {
        return Err(Error::Dimension(format!(
            "encoder dimension {} does not match embedding dimension {}",
            params.dim(),
            table.dim()
        )));
    }
    Ok(())
}

fn forward(params: &EncoderParams, table: &EmbeddingTable, pos: &ArcSet) -> Result<PositionCache> {
    if pos.is_empty() {
        return Err(Error::Invalid("cannot encode an empty arc set".into()));
    }
    let d = table.dim();
    let mut cache = PositionCache {
        inputs: Vec::new(),
        hidden: Vec::new(),
        attention: None,
        embedding: Vector::zeros(d),
    };
    match params.variant {
        EncoderVariant::V1 => {
            for arc in pos {
                cache.embedding.axpy(arc.score, table.lookup(&arc.token));
            }
        }
        EncoderVariant::V2 => {
            for arc in pos {
                let x = Vector::from(table.lookup(&arc.token).to_vec());
                let q = params.w1.matvec_unchecked(&x).map(f64::tanh);
                cache.embedding.axpy(arc.score, &q);
                cache.inputs.push(x);
                cache.hidden.push(q);
            }
        }
        EncoderVariant::V3 | EncoderVariant::V4 => {
            for arc in pos {
                let emb = table.lookup(&arc.token);
                let x = if params.variant == EncoderVariant::V4 {
                    Vector::from(emb.iter().map(|v| arc.score * v).collect::<Vec<_>>())
                } else {
                    Vector::from(emb.to_vec())
                };
                cache.hidden.push(params.w1.matvec_unchecked(&x).map(f64::tanh));
                cache.inputs.push(x);
            }
            let logits: Vec<f64> = cache.hidden.iter().map(|q| params.w2.dot(q)).collect();
            let alpha = softmax(&logits);
            for (a, q) in alpha.iter().zip(&cache.hidden) {
                cache.embedding.axpy(*a, q);
            }
            cache.attention = Some(alpha);
        }
    }
    Ok(cache)
}

pub fn encode_position(
    params: &EncoderParams,
    table: &EmbeddingTable,
    pos: &ArcSet,
) -> Result<PositionEncoding> {
    check_dims(params, table)?;
    let cache = forward(params, table, pos)?;
    Ok(PositionEncoding {
        embedding: cache.embedding,
        attention: cache.attention,
    })
}

pub fn encode_network(
    params: &EncoderParams,
    table: &EmbeddingTable,
    net: &ConfusionNetwork,
) -> Result<Vec<PositionEncoding>> {
    check_dims(params, table)?;
    net.positions()
        .iter()
        .map(|pos| {
            forward(params, table, pos).map(|c| PositionEncoding {
                embedding: c.embedding,
                attention: c.attention,
            })
        })
        .collect()
}

/// Adds `∂(upstreamᵀ e)/∂params` for one position into `grads`.
pub(crate) fn accumulate_position_grad(
    params: &EncoderParams,
    table: &EmbeddingTable,
    pos: &ArcSet,
    upstream: &[f64],
    grads: &mut EncoderGrads,
) -> Result<()> {
    if params.variant == EncoderVariant::V1 {
        return Ok(());
    }
    let cache = forward(params, table, pos)?;
    let d = params.dim();
    // dL/dq_i for each arc
    let dhidden: Vec<Vector> = match &cache.attention {
        None => pos
            .iter()
            .map(|arc| Vector::from(upstream.iter().map(|g| arc.score * g).collect::<Vec<_>>()))
            .collect(),
        Some(alpha) => {
            let dalpha: Vec<f64> = cache.hidden.iter().map(|q| q.dot(upstream)).collect();
            let dlogits = softmax_backward(alpha, &dalpha);
            for (dl, q) in dlogits.iter().zip(&cache.hidden) {
                grads.w2.axpy(*dl, q);
            }
            alpha
                .iter()
                .zip(dlogits.iter())
                .map(|(&a, &dl)| {
                    Vector::from(
                        (0..d)
                            .map(|k| a * upstream[k] + dl * params.w2[k])
                            .collect::<Vec<_>>(),
                    )
                })
                .collect()
        }
    };
    for ((dq, q), x) in dhidden.iter().zip(&cache.hidden).zip(&cache.inputs) {
        let dz: Vec<f64> = dq
            .iter()
            .zip(q.iter())
            .map(|(g, &y)| g * tanh_grad_from_output(y))
            .collect();
        grads.w1.add_outer(1.0, &dz, x);
    }
    Ok(())
}

/// Gradients of `Σ_t upstream_tᵀ · e_t` with respect to `W1` and `w2`.
pub fn encode_backward(
    params: &EncoderParams,
    table: &EmbeddingTable,
    net: &ConfusionNetwork,
    upstream: &[Vector],
) -> Result<EncoderGrads> {
    check_dims(params, table)?;
    if upstream.len() != net.len() {
        return Err(Error::Dimension(format!(
            "{} upstream gradients for {} positions",
            upstream.len(),
            net.len()
        )));
    }
    let d = params.dim();
    let mut grads = EncoderGrads::zeros(d);
    for (pos, g) in net.positions().iter().zip(upstream) {
        if g.len() != d {
            return Err(Error::Dimension(format!(
                "upstream gradient of length {} for dimension {d}",
                g.len()
            )));
        }
        accumulate_position_grad(params, table, pos, g, &mut grads)?;
    }
    Ok(grads)
}
