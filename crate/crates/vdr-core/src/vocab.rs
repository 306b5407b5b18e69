//! Vocabulary management, deterministic tokenization, and bag-of-words
//! vectorization.
//!
//! The vocabulary file format is UTF-8 text, one token per line, blank lines
//! skipped; a token's id is its position among the kept lines. Tokenization
//! lowercases the input, splits on any character that is not alphanumeric,
//! and keeps only pieces that exactly match a vocabulary token — out-of-vocab
//! pieces are dropped.

use std::collections::HashMap;
use std::path::Path;

use crate::sparsevec::{GateMask, SparseVector};
use crate::{Error, Result};

/// An ordered set of distinct token strings; ids are positions (0-based).
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from an ordered token list, validating distinctness and size.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::VocabTooSmall {
                count: tokens.len(),
            });
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::invalid(format!("empty token at position {i}")));
            }
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::DuplicateToken {
                    token: tok.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Parse newline-separated tokens; blank lines are skipped but still
    /// counted for error reporting.
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut ids: HashMap<String, u32> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let tok = raw.trim();
            if tok.is_empty() {
                continue;
            }
            if ids.insert(tok.to_string(), tokens.len() as u32).is_some() {
                return Err(Error::DuplicateToken {
                    token: tok.to_string(),
                    line: lineno + 1,
                });
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 {
            return Err(Error::VocabTooSmall {
                count: tokens.len(),
            });
        }
        Ok(Self { tokens, ids })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Token string for an id; panics if out of range (ids come from this
    /// vocabulary by construction).
    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Load a vocabulary file: UTF-8, one token per line.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocabulary::from_lines(&text)
}

/// An ordered sequence of token ids; duplicates allowed, may be empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    /// Wrap raw ids, validating them against a vocabulary size.
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::TokenIdOutOfRange { id, vocab_size });
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Distinct ids as a sorted gate mask (the bag-of-words dimensions).
    pub fn distinct_dims(&self) -> GateMask {
        GateMask::from_unsorted(self.ids.clone())
    }
}

/// Lowercase, split on non-alphanumeric characters, keep exact vocabulary
/// matches in order. Unknown pieces are silently dropped.
pub fn tokenize(vocab: &Vocabulary, text: &str) -> TokenSeq {
    let lower = text.to_lowercase();
    let ids = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .filter_map(|piece| vocab.id(piece))
        .collect();
    TokenSeq { ids }
}

/// Binary indicator over the distinct ids of `seq`, optionally scaled to unit
/// Euclidean length. Empty input yields the empty vector.
pub fn bow_vector(seq: &TokenSeq, normalize: bool) -> SparseVector {
    let dims = seq.distinct_dims();
    if dims.is_empty() {
        return SparseVector::empty();
    }
    let weight = if normalize {
        1.0 / (dims.len() as f64).sqrt()
    } else {
        1.0
    };
    SparseVector::from_sorted_entries(dims.iter().map(|d| (d, weight)).collect())
        .expect("distinct sorted dims with positive weight")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_vocab() -> Vocabulary {
        Vocabulary::from_lines("the\ncat\ndog\nsat").unwrap()
    }

    #[test]
    fn from_lines_assigns_positional_ids() {
        let v = Vocabulary::from_lines("a\nb\nc").unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.id("b"), Some(1));
        assert_eq!(v.token(2), "c");
    }

    #[test]
    fn from_lines_rejects_duplicates() {
        let err = Vocabulary::from_lines("a\na").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate token"), "{msg}");
        assert!(msg.contains('a'), "{msg}");
    }

    #[test]
    fn from_lines_rejects_tiny_vocab() {
        assert!(matches!(
            Vocabulary::from_lines(""),
            Err(Error::VocabTooSmall { count: 0 })
        ));
        assert!(matches!(
            Vocabulary::from_lines("only"),
            Err(Error::VocabTooSmall { count: 1 })
        ));
    }

    #[test]
    fn from_lines_skips_blank_lines() {
        let v = Vocabulary::from_lines("a\n\n\nb\n").unwrap();
        assert_eq!(v.size(), 2);
        assert_eq!(v.id("b"), Some(1));
    }

    #[test]
    fn load_vocab_missing_file_errors() {
        let err = load_vocab("/nonexistent/vocab.txt").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        let v = Vocabulary::from_lines("the\ncat").unwrap();
        let t = tokenize(&v, "The cat, the CAT!");
        assert_eq!(t.ids(), &[0, 1, 0, 1]);
    }

    #[test]
    fn tokenize_drops_oov() {
        let v = small_vocab();
        assert!(tokenize(&v, "zebra").is_empty());
        assert_eq!(tokenize(&v, "zebra cat").ids(), &[1]);
    }

    #[test]
    fn tokenize_empty_input() {
        let v = small_vocab();
        assert!(tokenize(&v, "").is_empty());
    }

    #[test]
    fn bow_collapses_duplicates() {
        let v = small_vocab();
        let t = TokenSeq::new(vec![3, 1, 3], v.size()).unwrap();
        let bow = bow_vector(&t, false);
        assert_eq!(bow.entries(), &[(1, 1.0), (3, 1.0)]);
    }

    #[test]
    fn bow_normalizes_to_unit_length() {
        let v = small_vocab();
        let t = TokenSeq::new(vec![1, 2], v.size()).unwrap();
        let bow = bow_vector(&t, true);
        let w = 1.0 / 2f64.sqrt();
        for (_, got) in bow.entries() {
            assert!((got - w).abs() < 1e-12);
        }
        assert!((bow.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bow_empty_input() {
        let t = TokenSeq::new(vec![], 4).unwrap();
        assert!(bow_vector(&t, false).is_empty());
        assert!(bow_vector(&t, true).is_empty());
    }

    #[test]
    fn token_seq_validates_range() {
        assert!(TokenSeq::new(vec![4], 4).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_is_deterministic(text in "\\PC{0,60}") {
            let v = small_vocab();
            prop_assert_eq!(tokenize(&v, &text), tokenize(&v, &text));
        }

        #[test]
        fn bow_dims_sorted_and_in_range(ids in proptest::collection::vec(0u32..16, 0..24)) {
            let t = TokenSeq::new(ids, 16).unwrap();
            let bow = bow_vector(&t, false);
            let dims: Vec<u32> = bow.entries().iter().map(|e| e.0).collect();
            prop_assert!(dims.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(dims.iter().all(|&d| d < 16));
            prop_assert!(bow.entries().iter().all(|e| e.1 > 0.0));
        }

        #[test]
        fn bow_normalized_has_unit_norm(ids in proptest::collection::vec(0u32..16, 1..24)) {
            let t = TokenSeq::new(ids, 16).unwrap();
            let bow = bow_vector(&t, true);
            prop_assert!((bow.norm() - 1.0).abs() < 1e-9);
        }
    }
}
