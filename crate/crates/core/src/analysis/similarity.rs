use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::vocab::word_frequencies;
use crate::data::TextCorpus;
use crate::error::{Error, Result};

pub const DEFAULT_TOP_K: usize = 10_000;

fn ranked_words(corpus: &TextCorpus) -> Result<Vec<String>> {
    if corpus.is_empty() {
        return Err(Error::Data(format!(
            "{}: corpus is empty",
            corpus.domain_id
        )));
    }
    let words: Vec<String> = word_frequencies(corpus.texts())
        .into_iter()
        .map(|(w, _)| w)
        .collect();
    if words.is_empty() {
        return Err(Error::Data(format!(
            "{}: corpus has no words",
            corpus.domain_id
        )));
    }
    Ok(words)
}

fn overlap(a: &[String], b: &[String], k: usize) -> f64 {
    let k = k.min(a.len()).min(b.len());
    let top_a: HashSet<&str> = a[..k].iter().map(String::as_str).collect();
    let shared = b[..k].iter().filter(|w| top_a.contains(w.as_str())).count();
    shared as f64 / k as f64
}

/// Overlap of the two corpora's `k` most frequent words, divided by the
/// number of words compared (`k` capped by either vocabulary size).
pub fn domain_similarity(a: &TextCorpus, b: &TextCorpus, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("top_k", "must be at least 1"));
    }
    Ok(overlap(&ranked_words(a)?, &ranked_words(b)?, k))
}

/// Pairwise vocabulary overlap between domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub domains: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain");
        for d in &self.domains {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        for (d, row) in self.domains.iter().zip(&self.values) {
            out.push_str(d);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn similarity_matrix(corpora: &[&TextCorpus], k: usize) -> Result<SimilarityMatrix> {
    if corpora.len() < 2 {
        return Err(Error::Data("similarity needs at least two domains".into()));
    }
    if k == 0 {
        return Err(Error::config("top_k", "must be at least 1"));
    }
    let ranked = corpora
        .iter()
        .map(|c| ranked_words(c))
        .collect::<Result<Vec<_>>>()?;
    let n = corpora.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = overlap(&ranked[i], &ranked[j], k);
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(SimilarityMatrix {
        domains: corpora.iter().map(|c| c.domain_id.clone()).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(id: &str, docs: &[&str]) -> TextCorpus {
        TextCorpus::unlabeled(id, docs.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn hand_example() {
        let a = corpus("a", &["a a a b b c"]);
        let b = corpus("b", &["b b b c c d"]);
        let s = domain_similarity(&a, &b, 3).unwrap();
        assert_eq!(s, 2.0 / 3.0);
    }

    #[test]
    fn identical_and_disjoint() {
        let a = corpus("a", &["x y z", "x"]);
        let b = corpus("b", &["p q"]);
        assert_eq!(domain_similarity(&a, &a, 10).unwrap(), 1.0);
        assert_eq!(domain_similarity(&a, &b, 10).unwrap(), 0.0);
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal() {
        let a = corpus("a", &["x y z w"]);
        let b = corpus("b", &["x y q"]);
        let c = corpus("c", &["z q r s"]);
        let m = similarity_matrix(&[&a, &b, &c], 3).unwrap();
        for i in 0..3 {
            assert_eq!(m.get(i, i), 1.0);
            for j in 0..3 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        assert!(m.to_csv().starts_with("domain,a,b,c\n"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let a = corpus("a", &[]);
        let b = corpus("b", &["x"]);
        assert!(domain_similarity(&a, &b, 5).is_err());
        assert!(similarity_matrix(&[&b], 5).is_err());
    }
}
