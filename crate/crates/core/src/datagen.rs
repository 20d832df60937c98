//! Dialogue corpora: schema, JSONL I/O, transcript augmentation and a seeded
//! synthetic generator with a simple ASR confusion model.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::confnet::{from_transcript, Arc, ArcSet, ConfusionNetwork, EPSILON};
use crate::error::{Error, Result};
use crate::model::{Ontology, Slot};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub transcript: Vec<String>,
    pub confnet: ConfusionNetwork,
    pub turn_inform: Vec<(String, String)>,
    pub turn_request: Vec<String>,
    /// Accumulated user goal after this turn.
    pub gold_goal: BTreeMap<String, String>,
}

impl Turn {
    pub fn gold_vector(&self, ontology: &Ontology) -> Result<Vec<f64>> {
        ontology.gold_vector(
            self.turn_inform.iter().map(|(s, v)| (s.as_str(), v.as_str())),
            self.turn_request.iter().map(String::as_str),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
}

/// Checks the goal-accumulation invariant: each turn's goal equals the
/// previous goal updated with its informs, last write winning.
pub fn check_goal_consistency(dialogue: &Dialogue) -> Result<()> {
    let mut goal = BTreeMap::new();
    for (i, turn) in dialogue.turns.iter().enumerate() {
        for (slot, value) in &turn.turn_inform {
            goal.insert(slot.clone(), value.clone());
        }
        if goal != turn.gold_goal {
            return Err(Error::Invalid(format!(
                "dialogue {} turn {i}: gold_goal does not match accumulated informs",
                dialogue.dialogue_id
            )));
        }
    }
    Ok(())
}

/// Checks that every label exists in `ontology`.
pub fn validate_against(corpus: &[Dialogue], ontology: &Ontology) -> Result<()> {
    for d in corpus {
        for turn in &d.turns {
            turn.gold_vector(ontology).map_err(|e| {
                Error::Invalid(format!("dialogue {}: {e}", d.dialogue_id))
            })?;
        }
    }
    Ok(())
}

/// Ontology spanning every label that appears in the corpora, sorted.
pub fn infer_ontology<'a>(corpora: impl IntoIterator<Item = &'a [Dialogue]>) -> Result<Ontology> {
    let mut slots: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut requests = BTreeSet::new();
    for corpus in corpora {
        for turn in corpus.iter().flat_map(|d| &d.turns) {
            for (s, v) in &turn.turn_inform {
                slots.entry(s.clone()).or_default().insert(v.clone());
            }
            requests.extend(turn.turn_request.iter().cloned());
        }
    }
    Ontology::new(
        slots
            .into_iter()
            .map(|(name, values)| Slot {
                name,
                values: values.into_iter().collect(),
            })
            .collect(),
        requests.into_iter().collect(),
    )
}

pub fn load_corpus(path: impl AsRef<FsPath>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Vec<Dialogue>> {
    let mut ids = HashSet::new();
    let mut corpus = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let dialogue: Dialogue = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("corpus line {lineno}: {e}")))?;
        if dialogue.turns.is_empty() {
            return Err(Error::Parse(format!("corpus line {lineno}: dialogue has no turns")));
        }
        if !ids.insert(dialogue.dialogue_id.clone()) {
            return Err(Error::Parse(format!(
                "corpus line {lineno}: duplicate dialogue_id {:?}",
                dialogue.dialogue_id
            )));
        }
        check_goal_consistency(&dialogue)
            .map_err(|e| Error::Parse(format!("corpus line {lineno}: {e}")))?;
        corpus.push(dialogue);
    }
    Ok(corpus)
}

pub fn write_corpus<W: Write>(corpus: &[Dialogue], mut out: W) -> Result<()> {
    for d in corpus {
        let line = serde_json::to_string(d)?;
        writeln!(out, "{line}").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &[Dialogue], path: impl AsRef<FsPath>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_corpus(corpus, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Suffix appended to the ids of clean transcript copies.
pub const CLEAN_SUFFIX: &str = "#clean";

/// Originals followed by copies whose networks are the single-arc lifts of
/// their transcripts.
pub fn augment(corpus: &[Dialogue]) -> Result<Vec<Dialogue>> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot augment an empty corpus".into()));
    }
    let mut out = corpus.to_vec();
    for d in corpus {
        let turns = d
            .turns
            .iter()
            .map(|t| {
                let id = format!("{}{CLEAN_SUFFIX}", t.confnet.utterance_id);
                Ok(Turn {
                    confnet: from_transcript(id, &t.transcript)?,
                    ..t.clone()
                })
            })
            .collect::<Result<_>>()?;
        out.push(Dialogue {
            dialogue_id: format!("{}{CLEAN_SUFFIX}", d.dialogue_id),
            turns,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Chance that a position is replaced by a confusion set.
    pub substitution_prob: f64,
    /// Upper bound on the number of wrong alternatives per confusion set.
    pub max_confusions: usize,
    /// Chance that the true token is left out of a confusion set.
    pub truth_drop_prob: f64,
}

impl NoiseModel {
    pub fn clean() -> Self {
        NoiseModel {
            substitution_prob: 0.0,
            max_confusions: 1,
            truth_drop_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("substitution_prob", self.substitution_prob),
            ("truth_drop_prob", self.truth_drop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.max_confusions == 0 {
            return Err(Error::Invalid("max_confusions must be at least 1".into()));
        }
        Ok(())
    }
}

const SLOT_LEXICON: [(&str, &str, [&str; 8]); 4] = [
    ("food", "food", ["thai", "basque", "italian", "korean", "indian", "french", "turkish", "mexican"]),
    ("area", "area", ["north", "south", "east", "west", "centre", "riverside", "harbour", "uptown"]),
    ("pricerange", "price", ["cheap", "moderate", "expensive", "budget", "luxury", "affordable", "pricey", "bargain"]),
    ("name", "place", ["lotus", "anchor", "olive", "maple", "saffron", "juniper", "cedar", "ember"]),
];

const REQUESTABLE: [&str; 3] = ["phone", "address", "postcode"];

const FILLER: [&str; 19] = [
    "i", "need", "want", "a", "the", "restaurant", "what", "about", "is", "may", "have", "please",
    "and", "in", "with", "food", "area", "price", "place",
];

/// `slots × values` ontology over a fixed lexicon; slots beyond the lexicon
/// get synthetic names.
pub fn default_ontology(num_slots: usize, num_values: usize) -> Result<Ontology> {
    if num_slots == 0 || num_values == 0 {
        return Err(Error::Invalid("ontology needs at least one slot and one value".into()));
    }
    let slots = (0..num_slots)
        .map(|s| {
            let (name, lex) = match SLOT_LEXICON.get(s) {
                Some((name, _, lex)) => (name.to_string(), Some(lex)),
                None => (format!("slot{s}"), None),
            };
            let values = (0..num_values)
                .map(|v| match lex.and_then(|l| l.get(v)) {
                    Some(w) => w.to_string(),
                    None => format!("{name}v{v}"),
                })
                .collect();
            Slot { name, values }
        })
        .collect();
    Ontology::new(slots, REQUESTABLE.iter().map(|s| s.to_string()).collect())
}

fn slot_noun(slot: &str) -> String {
    SLOT_LEXICON
        .iter()
        .find(|(name, _, _)| *name == slot)
        .map_or_else(|| slot.to_string(), |(_, noun, _)| noun.to_string())
}

/// Every token the generator can emit for `ontology`, sorted.
pub fn generator_vocabulary(ontology: &Ontology) -> Vec<String> {
    let mut words: BTreeSet<String> = FILLER.iter().map(|s| s.to_string()).collect();
    words.extend(["um", "uh"].iter().map(|s| s.to_string()));
    for slot in ontology.slots() {
        words.insert(slot_noun(&slot.name));
        words.extend(slot.values.iter().cloned());
    }
    words.extend(ontology.requestable().iter().cloned());
    words.into_iter().collect()
}

fn inform_phrase(slot: &str, value: &str, rng: &mut Rng) -> Vec<String> {
    let noun = slot_noun(slot);
    let words: Vec<&str> = match rng.below(3) {
        0 => vec!["i", "need", value, &noun],
        1 => vec!["what", "about", value],
        _ => vec!["i", "want", "a", value, &noun, "restaurant"],
    };
    words.into_iter().map(String::from).collect()
}

fn request_phrase(slot: &str, rng: &mut Rng) -> Vec<String> {
    let words: Vec<&str> = match rng.below(2) {
        0 => vec!["what", "is", "the", slot],
        _ => vec!["may", "i", "have", "the", slot, "please"],
    };
    words.into_iter().map(String::from).collect()
}

fn noisy_position(token: &str, vocab: &[String], noise: &NoiseModel, rng: &mut Rng) -> Result<ArcSet> {
    if !rng.bernoulli(noise.substitution_prob) {
        return ArcSet::new(vec![Arc::new(token, 1.0)]);
    }
    let keep_truth = !rng.bernoulli(noise.truth_drop_prob);
    let n_alt = 1 + rng.below(noise.max_confusions);
    let mut pool: Vec<&str> = vocab
        .iter()
        .map(String::as_str)
        .chain(std::iter::once(EPSILON))
        .filter(|w| *w != token)
        .collect();
    let mut chosen: Vec<&str> = Vec::with_capacity(n_alt + 1);
    if keep_truth {
        chosen.push(token);
    }
    for _ in 0..n_alt.min(pool.len()) {
        let i = rng.below(pool.len());
        chosen.push(pool.swap_remove(i));
    }
    // (0, 1] draws, normalized
    let raw: Vec<f64> = chosen.iter().map(|_| 1.0 - rng.uniform()).collect();
    let total: f64 = raw.iter().sum();
    ArcSet::new(
        chosen
            .into_iter()
            .zip(raw)
            .map(|(t, r)| Arc::new(t, (r / total).min(1.0)))
            .collect(),
    )
}

/// Seeded synthetic dialogues. Each turn mentions up to two informable
/// slots and at most one requestable slot through a small template grammar;
/// its network is the transcript lift with positions randomly swapped for
/// confusion sets according to `noise`.
pub fn generate_corpus(
    ontology: &Ontology,
    n_dialogues: usize,
    noise: &NoiseModel,
    rng: &mut Rng,
) -> Result<Vec<Dialogue>> {
    if n_dialogues == 0 {
        return Err(Error::Invalid("n_dialogues must be at least 1".into()));
    }
    if ontology.slots().is_empty() {
        return Err(Error::Invalid("ontology has no informable slots".into()));
    }
    noise.validate()?;
    let vocab = generator_vocabulary(ontology);
    let mut corpus = Vec::with_capacity(n_dialogues);
    for d in 0..n_dialogues {
        let dialogue_id = format!("d{d:05}");
        let n_turns = 1 + rng.below(5);
        let mut goal = BTreeMap::new();
        let mut turns = Vec::with_capacity(n_turns);
        for t in 0..n_turns {
            let mut n_inform = rng.below(3);
            let n_request = if ontology.requestable().is_empty() { 0 } else { rng.below(2) };
            if n_inform + n_request == 0 {
                n_inform = 1;
            }
            let mut slot_ids: Vec<usize> = (0..ontology.slots().len()).collect();
            rng.shuffle(&mut slot_ids);
            let mut transcript = Vec::new();
            if rng.bernoulli(0.15) {
                transcript.push(if rng.bernoulli(0.5) { "um" } else { "uh" }.to_string());
            }
            let mut turn_inform = Vec::new();
            for &s in slot_ids.iter().take(n_inform) {
                let slot = &ontology.slots()[s];
                let value = &slot.values[rng.below(slot.values.len())];
                if !turn_inform.is_empty() {
                    transcript.push("and".into());
                }
                transcript.extend(inform_phrase(&slot.name, value, rng));
                turn_inform.push((slot.name.clone(), value.clone()));
                goal.insert(slot.name.clone(), value.clone());
            }
            let mut turn_request = Vec::new();
            if n_request > 0 {
                let r = &ontology.requestable()[rng.below(ontology.requestable().len())];
                if !turn_inform.is_empty() {
                    transcript.push("and".into());
                }
                transcript.extend(request_phrase(r, rng));
                turn_request.push(r.clone());
            }
            let positions = transcript
                .iter()
                .map(|tok| noisy_position(tok, &vocab, noise, rng))
                .collect::<Result<_>>()?;
            turns.push(Turn {
                confnet: ConfusionNetwork::new(format!("{dialogue_id}-t{t}"), positions),
                transcript,
                turn_inform,
                turn_request,
                gold_goal: goal.clone(),
            });
        }
        corpus.push(Dialogue { dialogue_id, turns });
    }
    Ok(corpus)
}
