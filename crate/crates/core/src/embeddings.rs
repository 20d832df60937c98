//! Token vocabulary and the frozen embedding table.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::confnet::EPSILON;
use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};

pub const UNK: &str = "<unk>";

/// Default embedding width.
pub const DEFAULT_DIM: usize = 64;

const INIT_RANGE: f64 = 0.1;

/// Ordered set of tokens. `<unk>` and `<eps>` always occupy indices 0 and 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then `tokens` in order of first appearance.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        vocab.insert(UNK.to_string());
        vocab.insert(EPSILON.to_string());
        for t in tokens {
            vocab.insert(t.into());
        }
        vocab
    }

    /// Reserved tokens followed by `tokens` in sorted order.
    pub fn sorted<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        Vocabulary::new(set)
    }

    fn insert(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to `<unk>`.
    pub fn index_or_unk(&self, token: &str) -> usize {
        self.get(token).unwrap_or(0)
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK)
            || tokens.get(1).map(String::as_str) != Some(EPSILON)
        {
            return Err(Error::Parse(format!(
                "vocabulary must start with {UNK} and {EPSILON}"
            )));
        }
        let vocab = Vocabulary::new(tokens.iter().cloned());
        if vocab.len() != tokens.len() {
            return Err(Error::Parse("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Frozen token → vector table. There is no mutable access to the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    vocab: Vocabulary,
    table: Mat,
}

impl EmbeddingTable {
    fn check_dim(dim: usize) -> Result<()> {
        if dim < 2 {
            return Err(Error::Invalid(format!("embedding dim must be >= 2, got {dim}")));
        }
        Ok(())
    }

    /// Seeded random table, rows uniform in [-0.1, 0.1], `<eps>` row zero.
    pub fn build(vocab: Vocabulary, dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::check_dim(dim)?;
        let mut table = Mat::uniform(vocab.len(), dim, INIT_RANGE, rng);
        let eps = vocab.get(EPSILON).expect("reserved token");
        table.data_mut()[eps * dim..(eps + 1) * dim].fill(0.0);
        Ok(EmbeddingTable { vocab, table })
    }

    /// Reads word2vec-style text (`token v1 .. vd` per line). Rows for tokens
    /// absent from the file keep the values [`EmbeddingTable::build`] would
    /// have drawn with the same generator state.
    pub fn load(path: impl AsRef<Path>, vocab: Vocabulary, dim: usize, rng: &mut Rng) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, vocab, dim, rng)
    }

    pub fn from_text(text: &str, vocab: Vocabulary, dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut out = Self::build(vocab, dim, rng)?;
        let mut file_dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values = fields
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("embedding line {}: {e}", lineno + 1)))?;
            match file_dim {
                None => file_dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Dimension(format!(
                        "embedding line {} has {} values, expected {d}",
                        lineno + 1,
                        values.len()
                    )))
                }
                _ => {}
            }
            if values.len() != dim {
                return Err(Error::Dimension(format!(
                    "embedding file has dimension {}, table expects {dim}",
                    values.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding line {}", lineno + 1)));
            }
            if token == EPSILON {
                continue;
            }
            if let Some(row) = out.vocab.get(token) {
                out.table.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(&values);
            }
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn matrix(&self) -> &Mat {
        &self.table
    }

    /// The row for `token`, or the `<unk>` row when it is out of vocabulary.
    pub fn lookup(&self, token: &str) -> &[f64] {
        self.table.row(self.vocab.index_or_unk(token))
    }

    /// SHA-256 over the vocabulary and the exact bit patterns of every entry.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.vocab.tokens() {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        for x in self.table.data() {
            h.update(x.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Free-function forms matching the module's operation names.
pub fn build_table(vocab: Vocabulary, dim: usize, rng: &mut Rng) -> Result<EmbeddingTable> {
    EmbeddingTable::build(vocab, dim, rng)
}

pub fn lookup<'a>(table: &'a EmbeddingTable, token: &str) -> &'a [f64] {
    table.lookup(token)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::sorted(["cheap", "food", "area"])
    }

    #[test]
    fn reserved_tokens_come_first() {
        let v = vocab();
        assert_eq!(&v.tokens()[..2], &[UNK.to_string(), EPSILON.to_string()]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.get("area"), Some(2));
        assert_eq!(v.index_or_unk("zzz"), 0);
    }

    #[test]
    fn vocabulary_serde_checks_reserved() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
        assert!(serde_json::from_str::<Vocabulary>(r#"["<unk>","<eps>","a","a"]"#).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_table(vocab(), 8, &mut Rng::new(5)).unwrap();
        let b = build_table(vocab(), 8, &mut Rng::new(5)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a, b);
        let c = build_table(vocab(), 8, &mut Rng::new(6)).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert!(a.matrix().data().iter().all(|x| x.abs() <= 0.1));
    }

    #[test]
    fn lookup_rules() {
        let t = build_table(vocab(), 4, &mut Rng::new(1)).unwrap();
        assert_eq!(lookup(&t, EPSILON), &[0.0; 4]);
        assert_eq!(t.lookup("zzz"), t.lookup(UNK));
        assert_eq!(t.lookup("food"), t.matrix().row(t.vocab().get("food").unwrap()));
        assert_ne!(t.lookup("food"), t.lookup(UNK));
    }

    #[test]
    fn dim_one_rejected() {
        assert!(build_table(vocab(), 1, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn load_full_coverage() {
        let text = "<unk> 0 0\narea 1 2\ncheap 3 4\nfood 5 6\n<eps> 9 9\nextra 7 7\n";
        let t = EmbeddingTable::from_text(text, vocab(), 2, &mut Rng::new(1)).unwrap();
        assert_eq!(t.lookup("cheap"), &[3.0, 4.0]);
        assert_eq!(t.lookup(UNK), &[0.0, 0.0]);
        assert_eq!(t.lookup(EPSILON), &[0.0, 0.0]);
    }

    #[test]
    fn load_empty_equals_build() {
        let a = EmbeddingTable::from_text("", vocab(), 6, &mut Rng::new(9)).unwrap();
        let b = build_table(vocab(), 6, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_mixed_dimensions() {
        let err = EmbeddingTable::from_text("a 1 2\nb 1 2 3\n", vocab(), 2, &mut Rng::new(1)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(EmbeddingTable::load("/nonexistent/vectors.txt", vocab(), 2, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        std::fs::write(&path, "food 0.5 -0.5\n").unwrap();
        let t = EmbeddingTable::load(&path, vocab(), 2, &mut Rng::new(2)).unwrap();
        assert_eq!(t.lookup("food"), &[0.5, -0.5]);
    }
}
