use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_documents, DomainCorpus, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{hidden_states, ModelConfig, ParameterStore};
use crate::tensor::{Scalar, Tensor};

/// How a document's final-layer states are reduced to one vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean over non-PAD positions.
    #[default]
    Mean,
    /// The leading BOS position.
    First,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "first" => Ok(Pooling::First),
            other => Err(Error::config(
                "pooling",
                format!("`{other}` is not mean or first"),
            )),
        }
    }
}

/// Pooled final-layer hidden states, one row per document: `[N, H]`.
pub fn extract_hidden<T: Scalar>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    corpus: &DomainCorpus,
    pooling: Pooling,
    batch_size: usize,
) -> Result<Tensor<T>> {
    if corpus.is_empty() {
        return Err(Error::Data(format!(
            "{}: corpus is empty",
            corpus.domain_id
        )));
    }
    let h = config.hidden;
    let mut out = Vec::with_capacity(corpus.len() * h);
    for chunk in corpus.documents.chunks(batch_size.max(1)) {
        let docs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = batch_documents(&docs, config.max_len)?;
        let states = hidden_states(params, config, &batch)?;
        let seq = batch.seq;
        for (r, row_ids) in batch.ids.chunks(seq).enumerate() {
            let row = &states.data()[r * seq * h..(r + 1) * seq * h];
            match pooling {
                Pooling::First => out.extend_from_slice(&row[..h]),
                Pooling::Mean => {
                    let mut acc = vec![T::zero(); h];
                    let mut n = 0usize;
                    for (pos, &id) in row_ids.iter().enumerate() {
                        if id == PAD_ID {
                            continue;
                        }
                        n += 1;
                        for (a, &v) in acc.iter_mut().zip(&row[pos * h..(pos + 1) * h]) {
                            *a = *a + v;
                        }
                    }
                    let inv = T::one() / T::from_f64_lossy(n as f64);
                    out.extend(acc.into_iter().map(|a| a * inv));
                }
            }
        }
    }
    Tensor::new(vec![corpus.len(), h], out)
}

/// Binary matrix: `N` and `H` as u64 LE, then `N * H` f32 LE values.
pub fn write_hidden_matrix<T: Scalar>(path: &Path, matrix: &Tensor<T>) -> Result<()> {
    let shape = matrix.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "expected a matrix, got shape {shape:?}"
        )));
    }
    let mut bytes = Vec::with_capacity(16 + 4 * matrix.numel());
    bytes.extend_from_slice(&(shape[0] as u64).to_le_bytes());
    bytes.extend_from_slice(&(shape[1] as u64).to_le_bytes());
    for &v in matrix.data() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_hidden_matrix(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    if bytes.len() < 16 {
        return Err(bad("truncated header"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let h = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if n.checked_mul(h).and_then(|c| c.checked_mul(4)) != Some(body.len()) {
        return Err(bad("payload size does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![n, h], data)
}

/// CSV with a `label` column followed by `h0..h{H-1}`.
pub fn hidden_to_csv<T: Scalar>(matrix: &Tensor<T>, labels: &[String]) -> Result<String> {
    let shape = matrix.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for matrix of shape {shape:?}",
            labels.len()
        )));
    }
    let mut out = String::from("label");
    for j in 0..shape[1] {
        out.push_str(&format!(",h{j}"));
    }
    out.push('\n');
    for (label, row) in labels.iter().zip(matrix.data().chunks(shape[1])) {
        out.push_str(label);
        for v in row {
            out.push_str(&format!(",{:.6}", v.as_f64()));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            adapter_dim: 2,
            vocab_size: 12,
            max_len: 8,
            n_classes: 2,
            adapters_enabled: true,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn rows_per_document_and_duplicates_match() {
        let cfg = config();
        let params = init_model::<f32>(&cfg, 1).unwrap();
        let corpus = DomainCorpus::unlabeled("d", vec![vec![5, 6, 7], vec![8], vec![5, 6, 7]]);
        for pooling in [Pooling::Mean, Pooling::First] {
            let m = extract_hidden(&params, &cfg, &corpus, pooling, 2).unwrap();
            assert_eq!(m.shape(), &[3, 8]);
            assert_eq!(m.data()[..8], m.data()[16..]);
        }
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        let m = Tensor::new(vec![2, 3], vec![1.0f32, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap();
        write_hidden_matrix(&path, &m).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 16 + 24);
        assert_eq!(read_hidden_matrix(&path).unwrap(), m);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let cfg = config();
        let params = init_model::<f32>(&cfg, 1).unwrap();
        let corpus = DomainCorpus::unlabeled("d", vec![]);
        assert!(extract_hidden(&params, &cfg, &corpus, Pooling::Mean, 4).is_err());
    }
}
