//! Corpus files: plain text (one document per line) and `label<TAB>text` TSV.

use std::fs;
use std::path::Path;

use super::corpus::TextCorpus;
use super::synth::{DomainSplits, SynthSpec};
use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads an unlabeled corpus; blank lines are skipped.
pub fn read_unlabeled(path: &Path, domain_id: Option<&str>) -> Result<TextCorpus> {
    let text = read(path)?;
    let docs = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    Ok(TextCorpus::unlabeled(
        domain_id.map(String::from).unwrap_or_else(|| stem(path)),
        docs,
    ))
}

/// Reads a `label<TAB>text` corpus.
pub fn read_labeled(path: &Path, domain_id: Option<&str>) -> Result<TextCorpus> {
    let text = read(path)?;
    let mut docs = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: expected `label<TAB>text`",
                path.display(),
                n + 1
            ))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Data(format!(
                "{}:{}: label `{label}` is not a non-negative integer",
                path.display(),
                n + 1
            ))
        })?;
        labels.push(label);
        docs.push(body.to_string());
    }
    TextCorpus::labeled(
        domain_id.map(String::from).unwrap_or_else(|| stem(path)),
        docs,
        labels,
    )
}

pub fn format_labeled(corpus: &TextCorpus) -> Result<String> {
    let labels = corpus
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{} has no labels to write", corpus.domain_id)))?;
    let mut out = String::new();
    for (doc, label) in corpus.documents.iter().zip(labels) {
        if doc.contains(['\t', '\n']) {
            return Err(Error::Data(
                "documents may not contain tabs or newlines".into(),
            ));
        }
        out.push_str(&format!("{label}\t{doc}\n"));
    }
    Ok(out)
}

pub fn write_labeled(path: &Path, corpus: &TextCorpus) -> Result<()> {
    write(path, format_labeled(corpus)?.as_bytes())
}

pub fn write_unlabeled(path: &Path, corpus: &TextCorpus) -> Result<()> {
    let mut out = String::new();
    for doc in &corpus.documents {
        out.push_str(doc);
        out.push('\n');
    }
    write(path, out.as_bytes())
}

/// Writes `<domain>/{train,dev,test}.tsv` for every domain plus `spec.json`.
pub fn write_dataset(dir: &Path, spec: &SynthSpec, domains: &[DomainSplits]) -> Result<()> {
    for d in domains {
        let base = dir.join(&d.domain_id);
        write_labeled(&base.join("train.tsv"), &d.train)?;
        write_labeled(&base.join("dev.tsv"), &d.dev)?;
        write_labeled(&base.join("test.tsv"), &d.test)?;
        if !d.unlabeled.is_empty() {
            write_unlabeled(&base.join("unlabeled.txt"), &d.unlabeled)?;
        }
    }
    let mut json = serde_json::to_string_pretty(spec)?;
    json.push('\n');
    write(&dir.join("spec.json"), json.as_bytes())
}

/// Reads every `<domain>/` subdirectory holding `train.tsv`, `dev.tsv` and
/// `test.tsv` (plus an optional `unlabeled.txt`), in name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<DomainSplits>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().join("train.tsv").is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let base = dir.join(&name);
            let extra = base.join("unlabeled.txt");
            let unlabeled = if extra.is_file() {
                read_unlabeled(&extra, Some(&name))?
            } else {
                TextCorpus::unlabeled(name.clone(), Vec::new())
            };
            Ok(DomainSplits {
                unlabeled,
                train: read_labeled(&base.join("train.tsv"), Some(&name))?,
                dev: read_labeled(&base.join("dev.tsv"), Some(&name))?,
                test: read_labeled(&base.join("test.tsv"), Some(&name))?,
                domain_id: name,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsv");
        let c = TextCorpus::labeled("x", vec!["a b".into(), "c".into()], vec![1, 0]).unwrap();
        write_labeled(&path, &c).unwrap();
        assert_eq!(read_labeled(&path, None).unwrap(), c);
    }

    #[test]
    fn bad_label_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsv");
        fs::write(&path, "0\tok\n-1\tbad\n").unwrap();
        let err = read_labeled(&path, None).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn unlabeled_skips_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.txt");
        fs::write(&path, "one doc\n\nanother\n").unwrap();
        let c = read_unlabeled(&path, None).unwrap();
        assert_eq!(c.documents, vec!["one doc", "another"]);
        assert_eq!(c.domain_id, "u");
    }
}
