use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, BOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// One domain's documents, optionally labeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus<D> {
    pub domain_id: String,
    pub documents: Vec<D>,
    pub labels: Option<Vec<usize>>,
}

/// Raw text documents.
pub type TextCorpus = Corpus<String>;
/// Documents as token ids.
pub type DomainCorpus = Corpus<Vec<usize>>;

impl<D: Clone> Corpus<D> {
    pub fn unlabeled(domain_id: impl Into<String>, documents: Vec<D>) -> Self {
        Self {
            domain_id: domain_id.into(),
            documents,
            labels: None,
        }
    }

    pub fn labeled(
        domain_id: impl Into<String>,
        documents: Vec<D>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if labels.len() != documents.len() {
            return Err(Error::Data(format!(
                "{} labels for {} documents",
                labels.len(),
                documents.len()
            )));
        }
        Ok(Self {
            domain_id: domain_id.into(),
            documents,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Same documents with the labels dropped.
    pub fn without_labels(&self) -> Self {
        Self::unlabeled(self.domain_id.clone(), self.documents.clone())
    }

    fn select(&self, indices: &[usize]) -> Self {
        Self {
            domain_id: self.domain_id.clone(),
            documents: indices.iter().map(|&i| self.documents[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

impl TextCorpus {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().map(String::as_str)
    }

    pub fn encode(&self, vocab: &Vocab) -> DomainCorpus {
        Corpus {
            domain_id: self.domain_id.clone(),
            documents: self.documents.iter().map(|d| vocab.encode(d)).collect(),
            labels: self.labels.clone(),
        }
    }
}

impl DomainCorpus {
    /// Checks token ids against `vocab_size` and labels against `n_classes`.
    pub fn validate(&self, vocab_size: usize, n_classes: usize) -> Result<()> {
        for (d, doc) in self.documents.iter().enumerate() {
            if let Some(&id) = doc.iter().find(|&&id| id >= vocab_size) {
                return Err(Error::Data(format!(
                    "{}: document {d} holds token id {id} >= vocabulary size {vocab_size}",
                    self.domain_id
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.documents.len() {
                return Err(Error::Data(format!(
                    "{}: {} labels for {} documents",
                    self.domain_id,
                    labels.len(),
                    self.documents.len()
                )));
            }
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
                return Err(Error::Data(format!(
                    "{}: label {l} of document {i} is outside {n_classes} classes",
                    self.domain_id
                )));
            }
        }
        Ok(())
    }
}

/// Seeded train/dev split, stratified by label when every class has at
/// least two documents. The train side receives `round(n * ratio)` documents.
pub fn split_train_dev<D: Clone>(
    corpus: &Corpus<D>,
    ratio: f64,
    seed: u64,
) -> Result<(Corpus<D>, Corpus<D>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Contract(format!(
            "split ratio {ratio} must lie in (0, 1)"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Data(format!(
            "{}: cannot split an empty corpus",
            corpus.domain_id
        )));
    }
    let n = corpus.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * ratio).round() as usize;

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    if let Some(labels) = &corpus.labels {
        for &i in &perm {
            by_class.entry(labels[i]).or_default().push(i);
        }
    }
    let stratify = !by_class.is_empty() && by_class.values().all(|v| v.len() >= 2);
    if corpus.labels.is_some() && !stratify {
        log::warn!(
            "{}: a class has fewer than 2 documents, splitting without stratification",
            corpus.domain_id
        );
    }

    let mut in_train = vec![false; n];
    if stratify {
        // largest-remainder allocation of n_train across classes
        let mut quota: Vec<(usize, usize, f64)> = by_class
            .iter()
            .map(|(&c, v)| {
                let exact = v.len() as f64 * ratio;
                (c, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let assigned: usize = quota.iter().map(|q| q.1).sum();
        let mut order: Vec<usize> = (0..quota.len()).collect();
        order.sort_by(|&a, &b| quota[b].2.total_cmp(&quota[a].2).then(a.cmp(&b)));
        for &i in order.iter().take(n_train.saturating_sub(assigned)) {
            quota[i].1 += 1;
        }
        for (c, take, _) in quota {
            for &i in by_class[&c].iter().take(take) {
                in_train[i] = true;
            }
        }
    } else {
        for &i in perm.iter().take(n_train) {
            in_train[i] = true;
        }
    }
    let train: Vec<usize> = perm.iter().copied().filter(|&i| in_train[i]).collect();
    let dev: Vec<usize> = perm.iter().copied().filter(|&i| !in_train[i]).collect();
    Ok((corpus.select(&train), corpus.select(&dev)))
}

/// Unlabeled, shuffled union of the source and every target corpus.
pub fn mix_domains<D: Clone>(source: &Corpus<D>, targets: &[&Corpus<D>], seed: u64) -> Corpus<D> {
    let mut documents: Vec<D> = source.documents.clone();
    let mut name = source.domain_id.clone();
    for t in targets {
        documents.extend(t.documents.iter().cloned());
        name.push('+');
        name.push_str(&t.domain_id);
    }
    documents.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Corpus::unlabeled(name, documents)
}

/// Pads documents into a batch: each row is `BOS` followed by the document,
/// truncated to `max_len` and right-padded with `PAD` to the longest row.
pub fn batch_documents(docs: &[&[usize]], max_len: usize) -> Result<TokenBatch> {
    if docs.is_empty() || max_len == 0 {
        return Err(Error::Contract("cannot batch zero documents".into()));
    }
    let seq = docs
        .iter()
        .map(|d| (d.len() + 1).min(max_len))
        .max()
        .unwrap_or(1);
    let mut ids = Vec::with_capacity(docs.len() * seq);
    for doc in docs {
        ids.push(BOS_ID);
        let body = &doc[..doc.len().min(seq - 1)];
        ids.extend_from_slice(body);
        ids.extend(std::iter::repeat_n(PAD_ID, seq - 1 - body.len()));
    }
    TokenBatch::new(ids, docs.len(), seq)
}
