//! The multi-arm experiment grid and the setup it shares with the
//! single-phase subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{aggregate_results, welch_t_test, ResultTable, RunRecord};
use crate::data::{
    build_vocab, gen_general_corpus, gen_synthetic, read_dataset, DomainSplits, SynthSpec,
    TextCorpus, Vocab,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterStore};
use crate::persistence::{backbone_fingerprint, crc64, save_checkpoint, CheckpointScope};
use crate::tensor::Scalar;
use crate::training::{
    pretrain_backbone, run_method_on, MethodVariant, PhaseReport, PretrainSpec, RunPlan,
    TrainHyper, UdaDatasets,
};

/// Encoder shape; the vocabulary size and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub adapter_dim: usize,
    pub max_len: usize,
    pub max_vocab: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 2,
            ffn_dim: 64,
            adapter_dim: 16,
            max_len: 32,
            max_vocab: 5000,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            adapter_dim: self.adapter_dim,
            vocab_size,
            max_len: self.max_len,
            n_classes,
            adapters_enabled: true,
            dropout: self.dropout,
            ln_eps: self.ln_eps,
        }
    }
}

/// Where domain data comes from: generated in memory or read from a
/// `gen-data` tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthSpec),
    Dir(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSpec::default())
    }
}

/// One adaptation scheme: a labeled source and the unlabeled targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scheme {
    pub source: String,
    pub targets: Vec<String>,
}

impl Scheme {
    pub fn name(&self) -> String {
        format!("{}->{}", self.source, self.targets.join("+"))
    }

    fn dir_name(&self) -> String {
        format!("{}_to_{}", self.source, self.targets.join("+"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelShape,
    pub data: DataSource,
    pub schemes: Vec<Scheme>,
    pub variants: Vec<MethodVariant>,
    pub seeds: Vec<u64>,
    pub backbone_seed: u64,
    pub hyper: TrainHyper,
    /// Backbone pre-training on a general corpus; `None` keeps the seeded
    /// random backbone.
    pub pretrain: Option<PretrainSpec>,
    /// Write per-run checkpoints (adapter bundles for adapter variants).
    pub save_checkpoints: bool,
    pub out: Option<PathBuf>,
}

/// Learning rates sized for the desk-scale encoder.
pub fn desk_hyper() -> TrainHyper {
    TrainHyper {
        lr_adapter: 3e-3,
        lr_full: 1e-3,
        ..TrainHyper::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelShape::default(),
            data: DataSource::default(),
            schemes: vec![Scheme {
                source: "d0".into(),
                targets: vec!["d1".into(), "d2".into()],
            }],
            variants: MethodVariant::ALL.to_vec(),
            seeds: (0..5).collect(),
            backbone_seed: 1234,
            hyper: desk_hyper(),
            pretrain: Some(PretrainSpec::default()),
            save_checkpoints: true,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.variants.is_empty() {
            return Err(Error::config(
                "variants",
                "at least one variant is required",
            ));
        }
        if self.schemes.is_empty() {
            return Err(Error::config("schemes", "at least one scheme is required"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        for s in &self.schemes {
            if s.targets.is_empty() {
                return Err(Error::config(
                    "schemes",
                    format!("`{}` has no targets", s.source),
                ));
            }
            if s.targets.contains(&s.source) {
                return Err(Error::config(
                    "schemes",
                    format!("source `{}` is also a target", s.source),
                ));
            }
        }
        if let DataSource::Synth(spec) = &self.data {
            spec.validate()?;
        }
        self.hyper.validate()?;
        self.model.config(self.model.max_vocab + 4, 2).validate()
    }

    /// The config without its output directory, which does not affect
    /// any result.
    pub fn canonical(&self) -> Self {
        Self {
            out: None,
            ..self.clone()
        }
    }

    /// CRC-64 of the canonical JSON serialization.
    pub fn hash(&self) -> u64 {
        crc64(&serde_json::to_vec(&self.canonical()).expect("config serializes"))
    }
}

/// Loaded domains plus the generator spec, when one is known.
pub fn load_domains(source: &DataSource) -> Result<(Vec<DomainSplits>, Option<SynthSpec>)> {
    match source {
        DataSource::Synth(spec) => Ok((gen_synthetic(spec)?, Some(spec.clone()))),
        DataSource::Dir(dir) => {
            let domains = read_dataset(dir)?;
            if domains.is_empty() {
                return Err(Error::Data(format!(
                    "no domains found under {}",
                    dir.display()
                )));
            }
            let spec_path = dir.join("spec.json");
            let spec = if spec_path.is_file() {
                let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
                Some(serde_json::from_str(&text)?)
            } else {
                None
            };
            Ok((domains, spec))
        }
    }
}

/// General training and dev corpora for backbone pre-training.
pub fn general_corpora(
    spec: &SynthSpec,
    pretrain: &PretrainSpec,
) -> Result<(TextCorpus, TextCorpus)> {
    Ok((
        gen_general_corpus(spec, pretrain.docs, pretrain.corpus_seed)?,
        gen_general_corpus(spec, pretrain.dev_docs, pretrain.dev_seed)?,
    ))
}

/// Vocabulary over every non-test text of every domain, plus `extra`.
pub fn build_experiment_vocab(
    domains: &[DomainSplits],
    extra: &[&TextCorpus],
    max_vocab: usize,
) -> Result<Vocab> {
    let mut texts: Vec<&str> = domains
        .iter()
        .flat_map(|d| {
            d.train
                .texts()
                .chain(d.dev.texts())
                .chain(d.unlabeled.texts())
        })
        .collect();
    for c in extra {
        texts.extend(c.texts());
    }
    build_vocab(texts, max_vocab)
}

/// Number of classes across every labeled split.
pub fn class_count(domains: &[DomainSplits]) -> Result<usize> {
    let max = domains
        .iter()
        .flat_map(|d| [&d.train, &d.dev, &d.test])
        .filter_map(|c| c.labels.as_ref())
        .flat_map(|l| l.iter().copied())
        .max()
        .ok_or_else(|| Error::Data("no labeled documents".into()))?;
    Ok((max + 1).max(2))
}

/// Everything a run needs before training starts.
pub struct Setup<T> {
    pub domains: Vec<DomainSplits>,
    pub vocab: Vocab,
    pub model: ModelConfig,
    pub backbone: Option<(ParameterStore<T>, PhaseReport)>,
}

/// Loads or generates data, builds the vocabulary, and pre-trains the
/// backbone when `pretrain` is set.
pub fn prepare<T: Scalar>(
    data: &DataSource,
    shape: &ModelShape,
    pretrain: Option<&PretrainSpec>,
    backbone_seed: u64,
) -> Result<Setup<T>> {
    let (domains, spec) = load_domains(data)?;
    let general = match pretrain {
        Some(p) => {
            let spec = spec.as_ref().ok_or_else(|| {
                Error::config(
                    "pretrain",
                    "backbone pre-training needs a dataset with spec.json",
                )
            })?;
            Some(general_corpora(spec, p)?)
        }
        None => None,
    };
    let extra: Vec<&TextCorpus> = general.iter().map(|(c, _)| c).collect();
    let vocab = build_experiment_vocab(&domains, &extra, shape.max_vocab)?;
    let model = shape.config(vocab.len(), class_count(&domains)?);
    model.validate()?;
    let backbone = match (pretrain, &general) {
        (Some(p), Some((corpus, dev))) => {
            log::info!(
                "pre-training backbone on {} general documents",
                corpus.len()
            );
            Some(pretrain_backbone(
                &model,
                &corpus.encode(&vocab),
                &dev.encode(&vocab),
                p,
                backbone_seed,
            )?)
        }
        _ => None,
    };
    Ok(Setup {
        domains,
        vocab,
        model,
        backbone,
    })
}

/// One run that returned an error; the rest of the grid still runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub scheme: String,
    pub variant: MethodVariant,
    pub seed: u64,
    pub error: String,
}

/// Per-target accuracy of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub scheme: String,
    pub variant: MethodVariant,
    pub seed: u64,
    pub target: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
struct ManifestRun {
    id: String,
    plan: RunPlan,
    history: String,
    checkpoint: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest {
    config_hash: String,
    config: ExperimentConfig,
    precision: &'static str,
    vocab: String,
    backbone: Option<String>,
    backbone_fingerprint: String,
    runs: Vec<ManifestRun>,
    failures: Vec<RunFailure>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub records: Vec<RunRecord>,
    pub targets: Vec<TargetRow>,
    pub failures: Vec<RunFailure>,
    pub table: Option<ResultTable>,
    /// Files written, in creation order.
    pub files: Vec<PathBuf>,
}

impl ExperimentReport {
    /// Mean over seeds of one cell's accuracy.
    pub fn mean(&self, scheme: &str, variant: MethodVariant) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.scheme == scheme && r.variant == variant)
            .map(|r| r.accuracy)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn accuracies(&self, scheme: &str, variant: MethodVariant) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.scheme == scheme && r.variant == variant)
            .map(|r| r.accuracy)
            .collect()
    }
}

/// `scheme,variant,seed,target,accuracy`, one row per target per run.
pub fn targets_csv(rows: &[TargetRow]) -> String {
    let mut out = String::from("scheme,variant,seed,target,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.scheme,
            r.variant.label(),
            r.seed,
            r.target,
            r.accuracy
        ));
    }
    out
}

/// `scheme,variant,seed,accuracy` with the mean over targets.
pub fn runs_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("scheme,variant,seed,accuracy\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            r.scheme,
            r.variant.label(),
            r.seed,
            r.accuracy
        ));
    }
    out
}

/// Welch test of each variant against Ada-TSA, per scheme.
pub fn welch_csv(table: &ResultTable) -> String {
    let mut out = String::from("scheme,variant,t,df,p,flag\n");
    for scheme in &table.schemes {
        let Some(reference) = table.cell(scheme, MethodVariant::AdaTsa) else {
            continue;
        };
        let b: Vec<f64> = reference.seeds.iter().map(|s| s.1).collect();
        for v in table
            .variants
            .iter()
            .filter(|v| **v != MethodVariant::AdaTsa)
        {
            let Some(cell) = table.cell(scheme, *v) else {
                continue;
            };
            let a: Vec<f64> = cell.seeds.iter().map(|s| s.1).collect();
            match welch_t_test(&a, &b) {
                Ok(w) => {
                    let flag = if w.p < 0.01 {
                        "p<0.01"
                    } else if w.p < 0.05 {
                        "p<0.05"
                    } else {
                        ""
                    };
                    out.push_str(&format!(
                        "{scheme},{},{:.6},{:.6},{:.6},{flag}\n",
                        v.label(),
                        w.t,
                        w.df,
                        w.p
                    ));
                }
                Err(_) => out.push_str(&format!("{scheme},{},,,,\n", v.label())),
            }
        }
    }
    out
}

fn write_file(path: &Path, contents: &[u8], files: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    files.push(path.to_path_buf());
    Ok(())
}

struct Task {
    scheme_idx: usize,
    variant: MethodVariant,
    seed: u64,
}

struct Finished {
    plan: RunPlan,
    id: String,
    outcome: std::result::Result<RunOutput, String>,
}

struct RunOutput {
    accuracy: f64,
    targets: Vec<(String, f64)>,
    history: String,
    checkpoint: Option<Vec<u8>>,
}

/// Runs every scheme × variant × seed with up to `jobs` runs in parallel.
/// Output files go under `out` when it is given. Run failures are collected
/// in the report rather than aborting the grid.
pub fn run_experiment<T: Scalar>(
    cfg: &ExperimentConfig,
    jobs: usize,
    out: Option<&Path>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let setup = prepare::<T>(
        &cfg.data,
        &cfg.model,
        cfg.pretrain.as_ref(),
        cfg.backbone_seed,
    )?;
    let names: Vec<&str> = setup.domains.iter().map(|d| d.domain_id.as_str()).collect();
    for s in &cfg.schemes {
        for d in std::iter::once(&s.source).chain(&s.targets) {
            if !names.contains(&d.as_str()) {
                return Err(Error::config("schemes", format!("unknown domain `{d}`")));
            }
        }
    }
    let datasets: Vec<UdaDatasets> = cfg
        .schemes
        .iter()
        .map(|s| UdaDatasets::from_splits(&setup.domains, &setup.vocab, &s.source, &s.targets))
        .collect::<Result<_>>()?;
    let backbone = setup.backbone.as_ref().map(|(p, _)| p);

    let mut files = Vec::new();
    let backbone_path = match (out, backbone) {
        (Some(dir), Some(b)) => {
            let path = dir.join("backbone.ckpt");
            let cfg_off = ModelConfig {
                adapters_enabled: false,
                ..setup.model.clone()
            };
            save_checkpoint(
                &path,
                b,
                &cfg_off,
                Some(&setup.vocab),
                CheckpointScope::Full,
            )?;
            files.push(path.clone());
            Some(path)
        }
        _ => None,
    };
    let fingerprint = match backbone {
        Some(b) => backbone_fingerprint(b, &setup.model),
        None => {
            let init = crate::model::init_model_seeded::<T>(
                &setup.model,
                cfg.backbone_seed,
                cfg.backbone_seed,
            )?;
            backbone_fingerprint(&init, &setup.model)
        }
    };

    let tasks: Vec<Task> = (0..cfg.schemes.len())
        .flat_map(|scheme_idx| {
            cfg.variants.iter().flat_map(move |&variant| {
                cfg.seeds.iter().map(move |&seed| Task {
                    scheme_idx,
                    variant,
                    seed,
                })
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let save = cfg.save_checkpoints && out.is_some();
    let finished: Vec<Finished> = pool.install(|| {
        tasks
            .par_iter()
            .map(|t| {
                let scheme = &cfg.schemes[t.scheme_idx];
                let plan = RunPlan {
                    variant: t.variant,
                    source: scheme.source.clone(),
                    targets: scheme.targets.clone(),
                    seed: t.seed,
                    backbone_seed: cfg.backbone_seed,
                    hyper: cfg.hyper.clone(),
                    model: setup.model.clone(),
                };
                let id = format!("{}/{}/seed{}", scheme.dir_name(), t.variant, t.seed);
                log::info!("run {id}");
                let outcome = run_method_on::<T>(&plan, &datasets[t.scheme_idx], backbone)
                    .and_then(|r| {
                        let checkpoint = if save {
                            let scope = if t.variant.uses_adapters() {
                                CheckpointScope::AdapterOnly
                            } else {
                                CheckpointScope::Full
                            };
                            Some(crate::persistence::encode_checkpoint(
                                &r.params,
                                &plan.model_config(),
                                Some(&setup.vocab),
                                scope,
                            )?)
                        } else {
                            None
                        };
                        Ok(RunOutput {
                            accuracy: r.mean_target_accuracy(),
                            targets: r.target_accuracy.into_iter().collect(),
                            history: r.history.to_csv(),
                            checkpoint,
                        })
                    })
                    .map_err(|e| e.to_string());
                Finished { plan, id, outcome }
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut targets = Vec::new();
    let mut failures = Vec::new();
    let mut manifest_runs = Vec::new();
    for (task, f) in tasks.iter().zip(finished) {
        let scheme = cfg.schemes[task.scheme_idx].name();
        match f.outcome {
            Ok(o) => {
                records.push(RunRecord {
                    scheme: scheme.clone(),
                    variant: task.variant,
                    seed: task.seed,
                    accuracy: o.accuracy,
                });
                for (target, accuracy) in o.targets {
                    targets.push(TargetRow {
                        scheme: scheme.clone(),
                        variant: task.variant,
                        seed: task.seed,
                        target,
                        accuracy,
                    });
                }
                if let Some(dir) = out {
                    let run_dir = dir.join("runs").join(&f.id);
                    let history = run_dir.join("history.csv");
                    write_file(&history, o.history.as_bytes(), &mut files)?;
                    let checkpoint = match &o.checkpoint {
                        Some(bytes) => {
                            let name = if task.variant.uses_adapters() {
                                "adapter.bundle"
                            } else {
                                "model.ckpt"
                            };
                            let path = run_dir.join(name);
                            write_file(&path, bytes, &mut files)?;
                            Some(format!("runs/{}/{name}", f.id))
                        }
                        None => None,
                    };
                    manifest_runs.push(ManifestRun {
                        id: f.id.clone(),
                        plan: f.plan,
                        history: format!("runs/{}/history.csv", f.id),
                        checkpoint,
                    });
                }
            }
            Err(error) => {
                log::error!("run {} failed: {error}", f.id);
                failures.push(RunFailure {
                    scheme,
                    variant: task.variant,
                    seed: task.seed,
                    error,
                });
            }
        }
    }

    let table = if records.is_empty() {
        None
    } else {
        Some(aggregate_results(&records)?)
    };
    if let Some(dir) = out {
        write_file(
            &dir.join("runs.csv"),
            runs_csv(&records).as_bytes(),
            &mut files,
        )?;
        write_file(
            &dir.join("targets.csv"),
            targets_csv(&targets).as_bytes(),
            &mut files,
        )?;
        if let Some(t) = &table {
            write_file(&dir.join("results.csv"), t.to_csv().as_bytes(), &mut files)?;
            write_file(&dir.join("results.txt"), t.to_text().as_bytes(), &mut files)?;
            write_file(&dir.join("welch.csv"), welch_csv(t).as_bytes(), &mut files)?;
        }
        let vocab_path = dir.join("vocab.json");
        let mut vocab_json = serde_json::to_string(&setup.vocab)?;
        vocab_json.push('\n');
        write_file(&vocab_path, vocab_json.as_bytes(), &mut files)?;
        let manifest = Manifest {
            config_hash: format!("{:016x}", cfg.hash()),
            config: cfg.canonical(),
            precision: precision_name::<T>(),
            vocab: "vocab.json".into(),
            backbone: backbone_path.map(|_| "backbone.ckpt".into()),
            backbone_fingerprint: format!("{fingerprint:016x}"),
            runs: manifest_runs,
            failures: failures.clone(),
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        write_file(&dir.join("manifest.json"), json.as_bytes(), &mut files)?;
    }
    Ok(ExperimentReport {
        records,
        targets,
        failures,
        table,
        files,
    })
}

pub(crate) fn precision_name<T: Scalar>() -> &'static str {
    match T::DTYPE {
        crate::tensor::DType::F32 => "single",
        crate::tensor::DType::F64 => "double",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seed": [1]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"hyper": {"lr": 1.0}}"#).is_err());
    }

    #[test]
    fn invalid_schemes_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.schemes[0].targets.push("d0".into());
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scheme_names() {
        let s = Scheme {
            source: "a".into(),
            targets: vec!["b".into(), "c".into()],
        };
        assert_eq!(s.name(), "a->b+c");
    }
}
