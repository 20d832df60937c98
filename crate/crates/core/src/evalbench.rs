//! Turn-level tracking metrics, multi-seed aggregation, inference timing
//! and attention export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confnet::{n_best_paths, ConfusionNetwork};
use crate::datagen::{Dialogue, Turn};
use crate::encoder::encode_network;
use crate::error::{Error, Result};
use crate::model::{Model, Prediction};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// How a turn's prediction is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Encode the network directly, optionally overriding the arc cap.
    Confnet { max_arcs: Option<usize> },
    /// Average predictions over the `n` best paths.
    AsrN(usize),
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Confnet { max_arcs: None } => write!(f, "confnet"),
            Mode::Confnet { max_arcs: Some(k) } => write!(f, "confnet:{k}"),
            Mode::AsrN(n) => write!(f, "asr-{n}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("unknown mode {s:?} (expected confnet, confnet:K or asr-N)"));
        if s == "confnet" {
            return Ok(Mode::Confnet { max_arcs: None });
        }
        if let Some(k) = s.strip_prefix("confnet:") {
            let k: usize = k.parse().map_err(|_| bad())?;
            return if k == 0 { Err(bad()) } else { Ok(Mode::Confnet { max_arcs: Some(k) }) };
        }
        if let Some(n) = s.strip_prefix("asr-") {
            let n: usize = n.parse().map_err(|_| bad())?;
            return if n == 0 { Err(bad()) } else { Ok(Mode::AsrN(n)) };
        }
        Err(bad())
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub joint_goal: f64,
    pub turn_inform: f64,
    pub turn_request: f64,
    pub n_turns: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<BTreeMap<String, f64>>,
}

/// Model for `mode`: the arc cap override swaps the preprocessing.
fn model_for_mode(model: &Model, mode: Mode) -> std::borrow::Cow<'_, Model> {
    match mode {
        Mode::Confnet { max_arcs: Some(k) } if k != model.preprocess.max_arcs => {
            let mut m = model.clone();
            m.preprocess.max_arcs = k;
            std::borrow::Cow::Owned(m)
        }
        _ => std::borrow::Cow::Borrowed(model),
    }
}

fn predict_turn(model: &Model, net: &ConfusionNetwork, mode: Mode) -> Result<Prediction> {
    match mode {
        Mode::Confnet { .. } => model.predict_confnet(net),
        Mode::AsrN(n) => {
            let net = model.preprocess.apply(net)?;
            model.predict_asr_nlist(&n_best_paths(&net, n))
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    turns: usize,
    goal: usize,
    inform: usize,
    request: usize,
}

impl Tally {
    fn add(self, o: Tally) -> Tally {
        Tally {
            turns: self.turns + o.turns,
            goal: self.goal + o.goal,
            inform: self.inform + o.inform,
            request: self.request + o.request,
        }
    }
}

/// Scores one dialogue given per-turn predictions.
fn score_dialogue(model: &Model, turns: &[Turn], preds: &[Prediction], threshold: f64) -> Tally {
    let ontology = &model.ontology;
    let mut goal: BTreeMap<String, String> = BTreeMap::new();
    let mut tally = Tally::default();
    for (turn, pred) in turns.iter().zip(preds) {
        let mut informs = BTreeSet::new();
        let mut requests = BTreeSet::new();
        // slot -> (prob, value); first maximum in ontology order wins
        let mut best: BTreeMap<&str, (f64, &str)> = BTreeMap::new();
        for (pair, &p) in ontology.pairs().iter().zip(&pred.probs) {
            if p <= threshold {
                continue;
            }
            if pair.is_request() {
                requests.insert(pair.value.clone());
            } else {
                informs.insert((pair.slot.clone(), pair.value.clone()));
                let e = best.entry(pair.slot.as_str()).or_insert((p, pair.value.as_str()));
                if p > e.0 {
                    *e = (p, pair.value.as_str());
                }
            }
        }
        for (slot, (_, value)) in best {
            goal.insert(slot.to_string(), value.to_string());
        }
        let gold_informs: BTreeSet<(String, String)> = turn.turn_inform.iter().cloned().collect();
        let gold_requests: BTreeSet<String> = turn.turn_request.iter().cloned().collect();
        tally.turns += 1;
        tally.inform += usize::from(informs == gold_informs);
        tally.request += usize::from(requests == gold_requests);
        tally.goal += usize::from(goal == turn.gold_goal);
    }
    tally
}

fn report_from(t: Tally) -> Result<EvalReport> {
    if t.turns == 0 {
        return Err(Error::Invalid("evaluation corpus has no turns".into()));
    }
    let n = t.turns as f64;
    Ok(EvalReport {
        joint_goal: t.goal as f64 / n,
        turn_inform: t.inform as f64 / n,
        turn_request: t.request as f64 / n,
        n_turns: t.turns,
        timing: None,
    })
}

/// Scores externally supplied per-turn predictions (one `Vec` per dialogue).
pub fn evaluate_predictions(
    model: &Model,
    corpus: &[Dialogue],
    predictions: &[Vec<Prediction>],
    threshold: f64,
) -> Result<EvalReport> {
    let total = corpus
        .iter()
        .zip(predictions)
        .map(|(d, p)| score_dialogue(model, &d.turns, p, threshold))
        .fold(Tally::default(), Tally::add);
    report_from(total)
}

/// Joint-goal, turn-inform and turn-request accuracy. Dialogues are scored
/// independently, so the result does not depend on corpus order.
pub fn evaluate(model: &Model, corpus: &[Dialogue], mode: Mode, threshold: f64) -> Result<EvalReport> {
    crate::datagen::validate_against(corpus, &model.ontology)?;
    let m = model_for_mode(model, mode);
    let tallies = corpus
        .par_iter()
        .map(|d| {
            let preds = d
                .turns
                .iter()
                .map(|t| predict_turn(&m, &t.confnet, mode))
                .collect::<Result<Vec<_>>>()?;
            Ok(score_dialogue(&m, &d.turns, &preds, threshold))
        })
        .collect::<Result<Vec<_>>>()?;
    report_from(tallies.into_iter().fold(Tally::default(), Tally::add))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Standard error: sample standard deviation over `√runs`.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub runs: usize,
    pub joint_goal: MeanSe,
    pub turn_inform: MeanSe,
    pub turn_request: MeanSe,
}

pub fn mean_se(values: &[f64]) -> Result<MeanSe> {
    if values.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 runs for a standard error, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(MeanSe {
        mean,
        se: var.sqrt() / n.sqrt(),
    })
}

pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<SeedAggregate> {
    let col = |f: fn(&EvalReport) -> f64| mean_se(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(SeedAggregate {
        runs: reports.len(),
        joint_goal: col(|r| r.joint_goal)?,
        turn_inform: col(|r| r.turn_inform)?,
        turn_request: col(|r| r.turn_request)?,
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median seconds per batch for each mode. Every mode sees the same turns;
/// each timed pass covers preprocessing, path extraction (ASR modes) and
/// prediction, and is preceded by one untimed warm-up pass. Runs on the
/// calling thread only.
pub fn bench_inference(
    model: &Model,
    corpus: &[Dialogue],
    modes: &[Mode],
    batch_size: usize,
    repetitions: usize,
) -> Result<BTreeMap<String, f64>> {
    if repetitions < 3 {
        return Err(Error::Invalid(format!(
            "bench needs at least 3 repetitions, got {repetitions}"
        )));
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let nets: Vec<&ConfusionNetwork> = corpus.iter().flat_map(|d| &d.turns).map(|t| &t.confnet).collect();
    if nets.is_empty() {
        return Err(Error::Invalid("bench corpus has no turns".into()));
    }
    let n_batches = nets.len().div_ceil(batch_size);
    let mut out = BTreeMap::new();
    for &mode in modes {
        let m = model_for_mode(model, mode);
        let pass = || -> Result<f64> {
            let mut checksum = 0.0;
            for batch in nets.chunks(batch_size) {
                for net in batch {
                    checksum += predict_turn(&m, net, mode)?.probs[0];
                }
            }
            Ok(checksum)
        };
        std::hint::black_box(pass()?);
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            std::hint::black_box(pass()?);
            times.push(start.elapsed().as_secs_f64() / n_batches as f64);
        }
        out.insert(mode.to_string(), median(times));
    }
    Ok(out)
}

/// Attention weights of one network, arcs in score order per position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionMatrix {
    pub utterance_id: String,
    /// Per position: `(token, asr score, attention)` sorted by score.
    pub columns: Vec<Vec<(String, f64, f64)>>,
}

impl AttentionMatrix {
    /// One column per position, row 1 holding each position's best arc;
    /// cells read `token:weight`, short columns padded with empty cells.
    pub fn to_csv(&self) -> String {
        let rows = self.columns.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = String::new();
        let header: Vec<String> = (0..self.columns.len()).map(|i| i.to_string()).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for r in 0..rows {
            let cells: Vec<String> = self
                .columns
                .iter()
                .map(|c| c.get(r).map_or_else(String::new, |(t, _, w)| format!("{}:{w}", csv_escape(t))))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn csv_escape(token: &str) -> String {
    if token.contains([',', '"', '\n']) {
        format!("\"{}\"", token.replace('"', "\"\""))
    } else {
        token.to_string()
    }
}

pub fn dump_attention(model: &Model, net: &ConfusionNetwork) -> Result<AttentionMatrix> {
    if !model.variant().has_attention() {
        return Err(Error::Invalid("variant has no attention weights".into()));
    }
    let net = model.preprocess.apply(net)?;
    let encs = encode_network(&model.encoder, &model.embeddings, &net)?;
    let columns = net
        .positions()
        .iter()
        .zip(encs)
        .map(|(pos, enc)| {
            let att = enc.attention.expect("attention variant");
            pos.iter()
                .zip(att.iter())
                .map(|(a, &w)| (a.token.clone(), a.score, w))
                .collect()
        })
        .collect();
    Ok(AttentionMatrix {
        utterance_id: net.utterance_id.clone(),
        columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confnet::{from_transcript, Preprocess};
    use crate::embeddings::{build_table, Vocabulary};
    use crate::encoder::EncoderVariant;
    use crate::model::{Ontology, Slot};
    use crate::numerics::Rng;

    fn ontology() -> Ontology {
        Ontology::new(
            vec![
                Slot { name: "food".into(), values: vec!["thai".into(), "basque".into()] },
                Slot { name: "area".into(), values: vec!["north".into()] },
            ],
            vec!["phone".into()],
        )
        .unwrap()
    }

    fn model(variant: EncoderVariant) -> Model {
        let vocab = Vocabulary::sorted(["i", "need", "thai", "basque", "food", "north", "phone"]);
        let table = build_table(vocab, 6, &mut Rng::new(1)).unwrap();
        Model::init(ontology(), table, variant, 4, 0.0, Preprocess::default(), &mut Rng::new(2))
    }

    fn turn(tokens: &[&str], informs: &[(&str, &str)], requests: &[&str], goal: &[(&str, &str)]) -> Turn {
        Turn {
            transcript: tokens.iter().map(|s| s.to_string()).collect(),
            confnet: from_transcript("u", tokens).unwrap(),
            turn_inform: informs.iter().map(|(s, v)| (s.to_string(), v.to_string())).collect(),
            turn_request: requests.iter().map(|s| s.to_string()).collect(),
            gold_goal: goal.iter().map(|(s, v)| (s.to_string(), v.to_string())).collect(),
        }
    }

    fn corpus() -> Vec<Dialogue> {
        vec![
            Dialogue {
                dialogue_id: "a".into(),
                turns: vec![
                    turn(&["thai", "food"], &[("food", "thai")], &[], &[("food", "thai")]),
                    turn(&["north", "phone"], &[("area", "north")], &["phone"], &[("food", "thai"), ("area", "north")]),
                ],
            },
            Dialogue {
                dialogue_id: "b".into(),
                turns: vec![turn(&["basque"], &[("food", "basque")], &[], &[("food", "basque")])],
            },
        ]
    }

    fn oracle(m: &Model, c: &[Dialogue]) -> Vec<Vec<Prediction>> {
        c.iter()
            .map(|d| {
                d.turns
                    .iter()
                    .map(|t| Prediction { probs: t.gold_vector(&m.ontology).unwrap().iter().map(|y| if *y > 0.5 { 0.9 } else { 0.1 }).collect() })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let m = model(EncoderVariant::V1);
        let c = corpus();
        let r = evaluate_predictions(&m, &c, &oracle(&m, &c), DEFAULT_THRESHOLD).unwrap();
        assert_eq!((r.joint_goal, r.turn_inform, r.turn_request, r.n_turns), (1.0, 1.0, 1.0, 3));
    }

    #[test]
    fn empty_predictions_miss_every_inform() {
        let m = model(EncoderVariant::V1);
        let c = corpus();
        let empty: Vec<Vec<Prediction>> = c
            .iter()
            .map(|d| d.turns.iter().map(|_| Prediction { probs: vec![0.0; 4] }).collect())
            .collect();
        let r = evaluate_predictions(&m, &c, &empty, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.turn_inform, 0.0);
        assert_eq!(r.joint_goal, 0.0);
        assert!((r.turn_request - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_turn_goal_counts() {
        let m = model(EncoderVariant::V1);
        let c = vec![corpus()[1].clone()];
        let mut preds = oracle(&m, &c);
        // extra wrong inform lowers turn_inform but the goal keeps the higher value
        preds[0][0].probs[0] = 0.6;
        let r = evaluate_predictions(&m, &c, &preds, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.joint_goal, 1.0);
        assert_eq!(r.turn_inform, 0.0);
    }

    #[test]
    fn evaluate_checks_ontology_and_order_independence() {
        let m = model(EncoderVariant::V2);
        let c = corpus();
        let r1 = evaluate(&m, &c, Mode::Confnet { max_arcs: None }, 0.5).unwrap();
        let mut rev = c.clone();
        rev.reverse();
        assert_eq!(r1, evaluate(&m, &rev, Mode::Confnet { max_arcs: None }, 0.5).unwrap());
        let mut bad = c.clone();
        bad[0].turns[0].turn_inform[0].1 = "pizza".into();
        assert!(evaluate(&m, &bad, Mode::AsrN(1), 0.5).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let rep = |x: f64| EvalReport { joint_goal: x, turn_inform: x, turn_request: x, n_turns: 1, timing: None };
        let a = aggregate_seeds(&[rep(0.5), rep(0.5), rep(0.5)]).unwrap();
        assert_eq!(a.joint_goal.se, 0.0);
        let a = aggregate_seeds(&[rep(0.70), rep(0.72)]).unwrap();
        assert!((a.joint_goal.mean - 0.71).abs() < 1e-12);
        assert!((a.joint_goal.se - 0.01).abs() < 1e-12);
        assert!(aggregate_seeds(&[rep(0.7)]).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("confnet".parse::<Mode>().unwrap(), Mode::Confnet { max_arcs: None });
        assert_eq!("confnet:9".parse::<Mode>().unwrap(), Mode::Confnet { max_arcs: Some(9) });
        assert_eq!("asr-5".parse::<Mode>().unwrap(), Mode::AsrN(5));
        for bad in ["asr-0", "asr", "cnet", "confnet:x"] {
            assert!(bad.parse::<Mode>().is_err(), "{bad}");
        }
        assert_eq!(Mode::AsrN(9).to_string(), "asr-9");
    }

    #[test]
    fn bench_requires_three_reps() {
        let m = model(EncoderVariant::V1);
        assert!(bench_inference(&m, &corpus(), &[Mode::AsrN(1)], 50, 1).is_err());
        let t = bench_inference(&m, &corpus(), &[Mode::AsrN(1), Mode::Confnet { max_arcs: None }], 2, 3).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.values().all(|&s| s >= 0.0));
    }

    #[test]
    fn attention_dump_rules() {
        assert!(dump_attention(&model(EncoderVariant::V1), &from_transcript("u", &["thai"]).unwrap())
            .unwrap_err()
            .to_string()
            .contains("variant has no attention weights"));
        let m = model(EncoderVariant::V4);
        let a = dump_attention(&m, &from_transcript("u", &["i", "need", "thai"]).unwrap()).unwrap();
        let csv = a.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, vec!["0,1,2", "i:1,need:1,thai:1"]);
    }
}
