use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const BOS_ID: usize = 3;
pub const N_RESERVED: usize = 4;

const RESERVED: [&str; N_RESERVED] = ["[PAD]", "[UNK]", "[MASK]", "[BOS]"];

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Counts lowercased whitespace-delimited words, returning `(word, count)`
/// pairs by descending count, ties broken lexicographically.
pub fn word_frequencies<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<(String, u64)> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in texts {
        for word in tokenize(text) {
            *counts.entry(word).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Word-level vocabulary. Ids below [`N_RESERVED`] are the special tokens;
/// the remaining ids follow descending corpus frequency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    freqs: Vec<u64>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::from_parts(r.tokens, r.freqs)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            freqs: v.freqs,
        }
    }
}

impl Vocab {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_parts(tokens: Vec<String>, freqs: Vec<u64>) -> Result<Self> {
        if tokens.len() < N_RESERVED || tokens[..N_RESERVED] != RESERVED {
            return Err(Error::Data(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        if freqs.len() != tokens.len() {
            return Err(Error::Data(
                "vocabulary frequency table has the wrong length".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self {
            tokens,
            freqs,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == N_RESERVED
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Corpus count of `id` (zero for reserved tokens).
    pub fn frequency(&self, id: usize) -> u64 {
        self.freqs.get(id).copied().unwrap_or(0)
    }

    /// Token ids of `text`; unknown words map to [`UNK_ID`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .map(|w| self.id(&w).unwrap_or(UNK_ID))
            .collect()
    }

    /// Space-joined words; reserved ids other than UNK are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= N_RESERVED || id == UNK_ID)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Builds a vocabulary of at most `max_size` words (plus the reserved tokens).
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocab> {
    let ranked = word_frequencies(texts);
    if ranked.is_empty() {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut freqs = vec![0; N_RESERVED];
    for (word, count) in ranked.into_iter().take(max_size) {
        tokens.push(word);
        freqs.push(count);
    }
    Vocab::from_parts(tokens, freqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order() {
        let v = build_vocab(["a b a"], 10).unwrap();
        assert_eq!(v.id("a"), Some(N_RESERVED));
        assert_eq!(v.id("b"), Some(N_RESERVED + 1));
        assert_eq!(v.frequency(N_RESERVED), 2);
    }

    #[test]
    fn ties_break_lexicographically_and_case_folds() {
        let v = build_vocab(["Zeta alpha", "ZETA beta alpha"], 10).unwrap();
        assert_eq!(v.tokens()[N_RESERVED..], ["alpha", "zeta", "beta"]);
    }

    #[test]
    fn truncation_maps_rare_words_to_unk() {
        let v = build_vocab(["a a a b b c"], 2).unwrap();
        assert_eq!(v.len(), N_RESERVED + 2);
        assert_eq!(v.encode("a c b"), vec![4, UNK_ID, 5]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(build_vocab(["   ", ""], 10), Err(Error::Data(_))));
    }

    #[test]
    fn deterministic_and_round_trips() {
        let text = ["the cat sat on the mat", "a dog sat"];
        let a = build_vocab(text, 100).unwrap();
        let b = build_vocab(text, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.decode(&a.encode(text[0])), text[0]);
        let json = serde_json::to_string(&a).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }
}
