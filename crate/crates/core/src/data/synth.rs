//! Synthetic multi-domain sentiment corpora with controllable similarity.
//!
//! Every domain owns a private content vocabulary and shares a common one;
//! `shared_fraction` is the probability that a content word comes from the
//! shared pool. A document's label is the majority polarity of its cue
//! words. A cue is a shared pivot (`pos*` / `neg*`) with probability
//! `pivot_fraction` and a domain-specific polar word (`d1pos*`) otherwise, so
//! some target documents can only be read through words the source never
//! labels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::corpus::{split_train_dev, TextCorpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_domains: usize,
    /// Labeled documents per domain before the train/dev split.
    pub docs_per_domain: usize,
    pub test_docs_per_domain: usize,
    /// Extra unlabeled documents per domain, used only by domain fusion.
    pub unlabeled_per_domain: usize,
    /// Content words per document, inclusive range.
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    pub shared_pool: usize,
    pub domain_pool: usize,
    pub shared_fraction: f64,
    /// Shared pivot cue words per polarity.
    pub cue_words: usize,
    /// Domain-specific cue words per polarity and domain.
    pub domain_cue_words: usize,
    /// Probability that a cue is a shared pivot rather than domain-specific.
    pub pivot_fraction: f64,
    /// Cues per document; odd so the majority is defined.
    pub cues_per_doc: usize,
    /// Probability that an individual cue agrees with the document's polarity.
    pub cue_agreement: f64,
    pub zipf_exponent: f64,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_domains: 3,
            docs_per_domain: 500,
            test_docs_per_domain: 400,
            unlabeled_per_domain: 2000,
            doc_len_min: 4,
            doc_len_max: 8,
            shared_pool: 400,
            domain_pool: 400,
            shared_fraction: 0.9,
            cue_words: 6,
            domain_cue_words: 6,
            pivot_fraction: 0.5,
            cues_per_doc: 9,
            cue_agreement: 0.85,
            zipf_exponent: 1.0,
            train_ratio: 0.8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_domains", self.n_domains),
            ("docs_per_domain", self.docs_per_domain),
            ("test_docs_per_domain", self.test_docs_per_domain),
            ("doc_len_max", self.doc_len_max),
            ("shared_pool", self.shared_pool),
            ("domain_pool", self.domain_pool),
            ("cue_words", self.cue_words),
            ("cues_per_doc", self.cues_per_doc),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::config(
                "shared_fraction",
                format!("{} is outside [0, 1]", self.shared_fraction),
            ));
        }
        if !(0.0..=1.0).contains(&self.pivot_fraction) {
            return Err(Error::config("pivot_fraction", "must lie in [0, 1]"));
        }
        if self.pivot_fraction < 1.0 && self.domain_cue_words == 0 {
            return Err(Error::config(
                "domain_cue_words",
                "must be at least 1 when pivot_fraction < 1",
            ));
        }
        if !(0.5..=1.0).contains(&self.cue_agreement) {
            return Err(Error::config("cue_agreement", "must lie in [0.5, 1]"));
        }
        if self.cues_per_doc.is_multiple_of(2) {
            return Err(Error::config("cues_per_doc", "must be odd"));
        }
        if self.doc_len_min > self.doc_len_max {
            return Err(Error::config("doc_len_min", "exceeds doc_len_max"));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::config(
                "zipf_exponent",
                "must be finite and non-negative",
            ));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::config("train_ratio", "must lie in (0, 1)"));
        }
        if self.docs_per_domain < 2 {
            return Err(Error::config("docs_per_domain", "need at least 2 to split"));
        }
        Ok(())
    }
}

/// Labeled train/dev/test splits of one generated domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSplits {
    pub domain_id: String,
    pub train: TextCorpus,
    pub dev: TextCorpus,
    pub test: TextCorpus,
    /// Unlabeled text beyond the labeled splits; may be empty.
    pub unlabeled: TextCorpus,
}

pub fn domain_name(index: usize) -> String {
    format!("d{index}")
}

pub fn cue_word(positive: bool, index: usize) -> String {
    if positive {
        format!("pos{index}")
    } else {
        format!("neg{index}")
    }
}

/// Whether `word` is a shared pivot cue.
pub fn is_cue_word(word: &str) -> bool {
    let digits = word
        .strip_prefix("pos")
        .or_else(|| word.strip_prefix("neg"));
    digits.is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

/// Polarity of a shared or domain-specific cue word, if it is one.
pub fn cue_polarity(word: &str) -> Option<bool> {
    let rest = word.trim_start_matches(|c: char| c == 'd' || c.is_ascii_digit());
    let rest = if rest.len() < word.len() && word.starts_with('d') {
        rest
    } else {
        word
    };
    if !is_cue_word(rest) {
        return None;
    }
    Some(rest.starts_with("pos"))
}

struct DomainSampler {
    name: String,
    content: Zipf<f64>,
    cues: Zipf<f64>,
    own_cues: Option<Zipf<f64>>,
}

impl DomainSampler {
    fn content_word(&self, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> String {
        if rng.random::<f64>() < spec.shared_fraction {
            let r = self.content.sample(rng) as usize - 1;
            format!("w{}", r.min(spec.shared_pool - 1))
        } else {
            let r = self.content.sample(rng) as usize - 1;
            format!("{}w{}", self.name, r.min(spec.domain_pool - 1))
        }
    }

    fn cue(&self, spec: &SynthSpec, positive: bool, rng: &mut ChaCha8Rng) -> String {
        match &self.own_cues {
            Some(own) if rng.random::<f64>() >= spec.pivot_fraction => {
                let r = (own.sample(rng) as usize - 1).min(spec.domain_cue_words - 1);
                format!("{}{}", self.name, cue_word(positive, r))
            }
            _ => {
                let r = (self.cues.sample(rng) as usize - 1).min(spec.cue_words - 1);
                cue_word(positive, r)
            }
        }
    }

    fn document(&self, spec: &SynthSpec, label: usize, rng: &mut ChaCha8Rng) -> String {
        let positive = label == 1;
        // resample until the cue majority matches the label
        let polarities = loop {
            let p: Vec<bool> = (0..spec.cues_per_doc)
                .map(|_| {
                    if rng.random::<f64>() < spec.cue_agreement {
                        positive
                    } else {
                        !positive
                    }
                })
                .collect();
            let pos = p.iter().filter(|&&b| b).count();
            if (pos * 2 > spec.cues_per_doc) == positive {
                break p;
            }
        };
        let len = rng.random_range(spec.doc_len_min..=spec.doc_len_max);
        let mut words: Vec<String> = (0..len).map(|_| self.content_word(spec, rng)).collect();
        for pol in polarities {
            let at = rng.random_range(0..=words.len());
            words.insert(at, self.cue(spec, pol, rng));
        }
        words.join(" ")
    }

    fn corpus(&self, spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> TextCorpus {
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        labels.shuffle(rng);
        let docs = labels
            .iter()
            .map(|&l| self.document(spec, l, rng))
            .collect();
        TextCorpus::labeled(self.name.clone(), docs, labels).expect("one label per document")
    }
}

/// Generates every domain's splits; a pure function of `spec`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Vec<DomainSplits>> {
    spec.validate()?;
    let content_n = spec.shared_pool.max(spec.domain_pool) as f64;
    let mut out = Vec::with_capacity(spec.n_domains);
    for d in 0..spec.n_domains {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(d as u64 + 1);
        let zipf = |n: usize| {
            Zipf::new(n as f64, spec.zipf_exponent)
                .map_err(|e| Error::config("zipf_exponent", e.to_string()))
        };
        let sampler = DomainSampler {
            name: domain_name(d),
            content: Zipf::new(content_n, spec.zipf_exponent)
                .map_err(|e| Error::config("zipf_exponent", e.to_string()))?,
            cues: zipf(spec.cue_words)?,
            own_cues: if spec.domain_cue_words > 0 && spec.pivot_fraction < 1.0 {
                Some(zipf(spec.domain_cue_words)?)
            } else {
                None
            },
        };
        let pool = sampler.corpus(spec, spec.docs_per_domain, &mut rng);
        let test = sampler.corpus(spec, spec.test_docs_per_domain, &mut rng);
        let unlabeled = sampler
            .corpus(spec, spec.unlabeled_per_domain, &mut rng)
            .without_labels();
        let (train, dev) = split_train_dev(&pool, spec.train_ratio, spec.seed ^ d as u64)?;
        out.push(DomainSplits {
            domain_id: sampler.name,
            train,
            dev,
            test,
            unlabeled,
        });
    }
    Ok(out)
}

/// A domain-neutral corpus: shared content words and pivot cues only. It
/// stands in for the general text a backbone is pre-trained on.
pub fn gen_general_corpus(spec: &SynthSpec, n_docs: usize, seed: u64) -> Result<TextCorpus> {
    let general = SynthSpec {
        n_domains: 1,
        shared_fraction: 1.0,
        pivot_fraction: 1.0,
        ..spec.clone()
    };
    general.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let sampler = DomainSampler {
        name: "general".into(),
        content: Zipf::new(general.shared_pool as f64, general.zipf_exponent)
            .map_err(|e| Error::config("zipf_exponent", e.to_string()))?,
        cues: Zipf::new(general.cue_words as f64, general.zipf_exponent)
            .map_err(|e| Error::config("zipf_exponent", e.to_string()))?,
        own_cues: None,
    };
    Ok(sampler.corpus(&general, n_docs, &mut rng).without_labels())
}
