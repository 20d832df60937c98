//! Word confusion networks: a sequence of positions, each holding parallel
//! weighted token hypotheses.
//!
//! Values here are immutable once built; every transformation returns a new
//! network that again satisfies the [`ArcSet`] invariants (non-empty, sorted
//! by score descending with token order breaking ties, scores in `(0, 1]`).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token for a null hypothesis.
pub const EPSILON: &str = "<eps>";

/// Default interjection stoplist.
pub const DEFAULT_INTERJECTIONS: [&str; 5] = ["um", "uh", "ah", "oh", "hmm"];

/// Slack allowed on the per-position score mass.
const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub token: String,
    pub score: f64,
}

impl Arc {
    pub fn new(token: impl Into<String>, score: f64) -> Self {
        Arc {
            token: token.into(),
            score,
        }
    }

    pub fn is_epsilon(&self) -> bool {
        self.token == EPSILON
    }
}

fn arc_order(a: &Arc, b: &Arc) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.token.cmp(&b.token))
}

/// The parallel arcs at one position.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ArcSet(Vec<Arc>);

impl ArcSet {
    /// Validates and sorts `arcs`.
    pub fn new(mut arcs: Vec<Arc>) -> Result<Self> {
        if arcs.is_empty() {
            return Err(Error::Invalid("empty arc set".into()));
        }
        for arc in &arcs {
            if arc.token.is_empty() {
                return Err(Error::Invalid("empty token".into()));
            }
            if !(arc.score > 0.0 && arc.score <= 1.0) {
                return Err(Error::Invalid(format!(
                    "score out of range (0, 1]: {} for token {:?}",
                    arc.score, arc.token
                )));
            }
        }
        let mass: f64 = arcs.iter().map(|a| a.score).sum();
        if mass > 1.0 + MASS_TOLERANCE {
            return Err(Error::Invalid(format!("arc scores sum to {mass} > 1")));
        }
        arcs.sort_by(arc_order);
        Ok(ArcSet(arcs))
    }

    /// Keeps an already sorted, non-empty subsequence of a valid set.
    fn from_valid(arcs: Vec<Arc>) -> Self {
        debug_assert!(!arcs.is_empty());
        ArcSet(arcs)
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn top(&self) -> &Arc {
        &self.0[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Arc> {
        self.0.iter()
    }

    pub fn mass(&self) -> f64 {
        self.0.iter().map(|a| a.score).sum()
    }
}

impl<'a> IntoIterator for &'a ArcSet {
    type Item = &'a Arc;
    type IntoIter = std::slice::Iter<'a, Arc>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfnet")]
pub struct ConfusionNetwork {
    pub utterance_id: String,
    positions: Vec<ArcSet>,
}

#[derive(Deserialize)]
struct RawConfnet {
    utterance_id: String,
    positions: Vec<Vec<Arc>>,
}

impl TryFrom<RawConfnet> for ConfusionNetwork {
    type Error = Error;

    fn try_from(raw: RawConfnet) -> Result<Self> {
        let positions = raw
            .positions
            .into_iter()
            .enumerate()
            .map(|(i, arcs)| {
                ArcSet::new(arcs).map_err(|e| Error::Parse(format!("position {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ConfusionNetwork {
            utterance_id: raw.utterance_id,
            positions,
        })
    }
}

/// One hypothesis through a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    /// Chosen tokens with epsilon arcs removed.
    pub tokens: Vec<String>,
    /// Product of the chosen arc scores.
    pub score: f64,
    /// Index of the chosen arc at each position.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arc_indices: Vec<usize>,
}

impl ConfusionNetwork {
    pub fn new(utterance_id: impl Into<String>, positions: Vec<ArcSet>) -> Self {
        ConfusionNetwork {
            utterance_id: utterance_id.into(),
            positions,
        }
    }

    pub fn positions(&self) -> &[ArcSet] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn arc_count(&self) -> usize {
        self.positions.iter().map(ArcSet::len).sum()
    }

    /// Number of distinct paths, saturating at `u128::MAX`.
    pub fn path_count(&self) -> u128 {
        self.positions
            .iter()
            .fold(1u128, |acc, p| acc.saturating_mul(p.len() as u128))
    }

    fn map_positions(&self, f: impl Fn(&ArcSet) -> Option<ArcSet>) -> ConfusionNetwork {
        ConfusionNetwork {
            utterance_id: self.utterance_id.clone(),
            positions: self.positions.iter().filter_map(f).collect(),
        }
    }

    /// Serializes to the single-line JSON document form.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("confnet serialization is infallible")
    }
}

/// Parses one confnet JSON document.
pub fn parse_confnet(input: &str) -> Result<ConfusionNetwork> {
    let raw: RawConfnet =
        serde_json::from_str(input).map_err(|e| Error::Parse(format!("malformed confnet: {e}")))?;
    ConfusionNetwork::try_from(raw)
}

/// Parses a JSONL stream of confnets, skipping blank lines.
pub fn parse_confnet_stream(input: &str) -> Result<Vec<ConfusionNetwork>> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_confnet(l).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Drops arcs scoring below `threshold`, always keeping each position's top
/// arc. Scores are not renormalized.
pub fn prune(net: &ConfusionNetwork, threshold: f64) -> Result<ConfusionNetwork> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Invalid(format!(
            "prune threshold must lie in [0, 1), got {threshold}"
        )));
    }
    Ok(net.map_positions(|pos| {
        let kept = pos
            .iter()
            .enumerate()
            .filter(|(i, a)| *i == 0 || a.score >= threshold)
            .map(|(_, a)| a.clone())
            .collect();
        Some(ArcSet::from_valid(kept))
    }))
}

/// Removes stoplisted tokens; a position left with no arcs is dropped.
pub fn remove_interjections<S: AsRef<str>>(
    net: &ConfusionNetwork,
    stoplist: &[S],
) -> ConfusionNetwork {
    let stop: HashSet<&str> = stoplist.iter().map(AsRef::as_ref).collect();
    net.map_positions(|pos| {
        let kept: Vec<Arc> = pos
            .iter()
            .filter(|a| !stop.contains(a.token.as_str()))
            .cloned()
            .collect();
        (!kept.is_empty()).then(|| ArcSet::from_valid(kept))
    })
}

/// Keeps the `max_arcs` best arcs at every position.
pub fn truncate_arcs(net: &ConfusionNetwork, max_arcs: usize) -> Result<ConfusionNetwork> {
    if max_arcs == 0 {
        return Err(Error::Invalid("max_arcs must be at least 1".into()));
    }
    Ok(net.map_positions(|pos| {
        Some(ArcSet::from_valid(
            pos.iter().take(max_arcs).cloned().collect(),
        ))
    }))
}

/// Rescales each position so its scores sum to one.
pub fn renormalize(net: &ConfusionNetwork) -> ConfusionNetwork {
    net.map_positions(|pos| {
        let mass = pos.mass();
        Some(ArcSet::from_valid(
            pos.iter()
                .map(|a| Arc::new(a.token.clone(), (a.score / mass).min(1.0)))
                .collect(),
        ))
    })
}

/// Lifts a clean transcript into a network with one weight-1 arc per token.
pub fn from_transcript<S: AsRef<str>>(
    utterance_id: impl Into<String>,
    tokens: &[S],
) -> Result<ConfusionNetwork> {
    if tokens.is_empty() {
        return Err(Error::Invalid("transcript has no tokens".into()));
    }
    let positions = tokens
        .iter()
        .map(|t| {
            let t = t.as_ref();
            if t.is_empty() {
                Err(Error::Invalid("empty token in transcript".into()))
            } else {
                Ok(ArcSet(vec![Arc::new(t, 1.0)]))
            }
        })
        .collect::<Result<_>>()?;
    Ok(ConfusionNetwork::new(utterance_id, positions))
}

fn path_from_indices(net: &ConfusionNetwork, indices: Vec<usize>, score: f64) -> Path {
    let tokens = net
        .positions
        .iter()
        .zip(&indices)
        .map(|(pos, &i)| &pos.arcs()[i])
        .filter(|a| !a.is_epsilon())
        .map(|a| a.token.clone())
        .collect();
    Path {
        tokens,
        score,
        arc_indices: indices,
    }
}

fn score_of(net: &ConfusionNetwork, indices: &[usize]) -> f64 {
    net.positions
        .iter()
        .zip(indices)
        .fold(1.0, |acc, (pos, &i)| acc * pos.arcs()[i].score)
}

struct Frontier {
    score: f64,
    indices: Vec<usize>,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier {
    // max-heap: higher score first, then lexicographically smaller indices
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.indices.cmp(&self.indices))
    }
}

/// The `n` highest-scoring paths, best first.
///
/// Positions are independent, so a path's score is the product of its arc
/// scores. Search starts at the all-top-arcs path and expands successors by
/// advancing one position to its next arc; a visited set keeps each index
/// vector from entering the frontier twice.
pub fn n_best_paths(net: &ConfusionNetwork, n: usize) -> Vec<Path> {
    if n == 0 {
        return Vec::new();
    }
    let start = vec![0usize; net.len()];
    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    seen.insert(start.clone());
    heap.push(Frontier {
        score: score_of(net, &start),
        indices: start,
    });
    let mut out = Vec::with_capacity(n.min(64));
    while let Some(Frontier { score, indices }) = heap.pop() {
        for t in 0..indices.len() {
            if indices[t] + 1 < net.positions[t].len() {
                let mut next = indices.clone();
                next[t] += 1;
                if seen.insert(next.clone()) {
                    heap.push(Frontier {
                        score: score_of(net, &next),
                        indices: next,
                    });
                }
            }
        }
        out.push(path_from_indices(net, indices, score));
        if out.len() == n {
            break;
        }
    }
    out
}

pub fn best_path(net: &ConfusionNetwork) -> Path {
    n_best_paths(net, 1)
        .pop()
        .expect("every network has at least one path")
}

/// Summary numbers for one network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfnetStats {
    pub utterance_id: String,
    pub positions: usize,
    pub arcs: usize,
    pub max_width: usize,
    pub epsilon_arcs: usize,
    pub log10_paths: f64,
    pub best_score: f64,
}

pub fn stats(net: &ConfusionNetwork) -> ConfnetStats {
    ConfnetStats {
        utterance_id: net.utterance_id.clone(),
        positions: net.len(),
        arcs: net.arc_count(),
        max_width: net.positions.iter().map(ArcSet::len).max().unwrap_or(0),
        epsilon_arcs: net
            .positions
            .iter()
            .flat_map(ArcSet::iter)
            .filter(|a| a.is_epsilon())
            .count(),
        log10_paths: net
            .positions
            .iter()
            .map(|p| (p.len() as f64).log10())
            .sum(),
        best_score: net.positions.iter().map(|p| p.top().score).product(),
    }
}

/// Cleanup applied to every network before encoding: interjection removal,
/// pruning, optional renormalization, then arc truncation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub interjections: Vec<String>,
    pub prune_threshold: f64,
    pub max_arcs: usize,
    #[serde(default)]
    pub renormalize: bool,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            interjections: DEFAULT_INTERJECTIONS.iter().map(|s| s.to_string()).collect(),
            prune_threshold: 0.001,
            max_arcs: 5,
            renormalize: false,
        }
    }
}

impl Preprocess {
    pub fn with_max_arcs(max_arcs: usize) -> Self {
        Preprocess {
            max_arcs,
            ..Preprocess::default()
        }
    }

    pub fn apply(&self, net: &ConfusionNetwork) -> Result<ConfusionNetwork> {
        let mut out = remove_interjections(net, &self.interjections);
        out = prune(&out, self.prune_threshold)?;
        if self.renormalize {
            out = renormalize(&out);
        }
        truncate_arcs(&out, self.max_arcs)
    }
}
