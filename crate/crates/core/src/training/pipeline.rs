use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, clip_global_norm, AdamState};
use super::schedule::{Schedule, DEFAULT_WARMUP};
use crate::autodiff::Tape;
use crate::data::{batch_documents, mask_for_mlm, mix_domains, DomainCorpus, DomainSplits, Vocab};
use crate::error::{Error, Result};
use crate::model::{
    class_logits, cls_logits, encode, init_model_seeded, mlm_logits, Binder, Group, GroupSet,
    ModelConfig, ParameterStore,
};
use crate::tensor::Scalar;

/// The four experimental arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MethodVariant {
    FullFt,
    FullTsa,
    AdaFt,
    AdaTsa,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 4] = [
        MethodVariant::FullFt,
        MethodVariant::FullTsa,
        MethodVariant::AdaFt,
        MethodVariant::AdaTsa,
    ];

    /// Adapter variants insert adapters and keep the backbone frozen.
    pub fn uses_adapters(self) -> bool {
        matches!(self, MethodVariant::AdaFt | MethodVariant::AdaTsa)
    }

    /// Two-step variants run domain-fusion MLM training before fine-tuning.
    pub fn runs_fusion(self) -> bool {
        matches!(self, MethodVariant::FullTsa | MethodVariant::AdaTsa)
    }

    pub fn label(self) -> &'static str {
        match self {
            MethodVariant::FullFt => "Full-FT",
            MethodVariant::FullTsa => "Full-TSA",
            MethodVariant::AdaFt => "Ada-FT",
            MethodVariant::AdaTsa => "Ada-TSA",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.label().to_ascii_uppercase().replace('-', "_") == norm)
    }

    /// Groups updated by the fusion phase.
    pub fn fusion_groups(self) -> GroupSet {
        if self.uses_adapters() {
            GroupSet::of(&[Group::Adapter, Group::MlmHead])
        } else {
            GroupSet::of(&[Group::Frozen, Group::MlmHead])
        }
    }

    /// Groups updated by task fine-tuning.
    pub fn task_groups(self) -> GroupSet {
        if self.uses_adapters() {
            GroupSet::of(&[Group::Adapter, Group::TaskHead])
        } else {
            GroupSet::of(&[Group::Frozen, Group::TaskHead])
        }
    }
}

impl fmt::Display for MethodVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Optimization settings shared by both phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs_fusion: usize,
    pub epochs_task: usize,
    pub batch_size: usize,
    /// Peak learning rate for adapter variants.
    pub lr_adapter: f64,
    /// Peak learning rate for full-parameter variants.
    pub lr_full: f64,
    /// Overrides the task-phase rates when set.
    pub lr_task_adapter: Option<f64>,
    pub lr_task_full: Option<f64>,
    pub warmup_steps: usize,
    pub mask_prob: f64,
    pub clip_norm: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs_fusion: 10,
            epochs_task: 10,
            batch_size: 16,
            lr_adapter: 5e-5,
            lr_full: 2e-5,
            lr_task_adapter: None,
            lr_task_full: None,
            warmup_steps: DEFAULT_WARMUP,
            mask_prob: 0.15,
            clip_norm: 1.0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.epochs_task == 0 {
            return Err(Error::config("epochs_task", "must be at least 1"));
        }
        let rates = [
            ("lr_adapter", Some(self.lr_adapter)),
            ("lr_full", Some(self.lr_full)),
            ("lr_task_adapter", self.lr_task_adapter),
            ("lr_task_full", self.lr_task_full),
        ];
        for (field, lr) in rates {
            if let Some(lr) = lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::config(field, "must be positive"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask_prob", "must lie in [0, 1]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        Ok(())
    }

    pub fn fusion_lr(&self, variant: MethodVariant) -> f64 {
        if variant.uses_adapters() {
            self.lr_adapter
        } else {
            self.lr_full
        }
    }

    pub fn task_lr(&self, variant: MethodVariant) -> f64 {
        if variant.uses_adapters() {
            self.lr_task_adapter.unwrap_or(self.lr_adapter)
        } else {
            self.lr_task_full.unwrap_or(self.lr_full)
        }
    }
}

/// One experimental arm: variant, domains, seed, and settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub variant: MethodVariant,
    pub source: String,
    pub targets: Vec<String>,
    /// Seeds adapter/head initialization, data order, and masking.
    pub seed: u64,
    /// Seeds the backbone, which stands in for pre-trained weights.
    pub backbone_seed: u64,
    pub hyper: TrainHyper,
    /// Model shape; `adapters_enabled` is overridden by the variant.
    pub model: ModelConfig,
}

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        if self.targets.contains(&self.source) {
            return Err(Error::config(
                "targets",
                format!("source `{}` is also a target", self.source),
            ));
        }
        self.hyper.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            adapters_enabled: self.variant.uses_adapters(),
            ..self.model.clone()
        }
    }
}

/// One row of the training history CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,epoch,step,lr,train_loss,dev_metric\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:e},{:.6},{:.6}\n",
                r.phase, r.epoch, r.step, r.lr, r.train_loss, r.dev_metric
            ));
        }
        out
    }

    pub fn phase(&self, phase: &str) -> impl Iterator<Item = &HistoryRow> {
        let phase = phase.to_string();
        self.rows.iter().filter(move |r| r.phase == phase)
    }
}

/// Outcome of one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    /// Dev metric after each epoch.
    pub dev_metric: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

fn seed_for(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [tag, a, b] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

fn check_params<T: Scalar>(params: &ParameterStore<T>, names: &[String]) -> Result<()> {
    for n in names {
        if !params.tensor(n)?.is_finite() {
            return Err(Error::NonFinite(n.clone()));
        }
    }
    Ok(())
}

/// Mean MLM loss over `corpus` with masks fixed by `seed`.
pub fn mlm_loss<T: Scalar>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    corpus: &DomainCorpus,
    batch_size: usize,
    mask_prob: f64,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, chunk) in corpus.documents.chunks(batch_size.max(1)).enumerate() {
        let docs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = batch_documents(&docs, config.max_len)?;
        let masked = mask_for_mlm(
            &batch,
            mask_prob,
            config.vocab_size,
            seed_for(seed, 1, b as u64, 0),
        )?;
        let positions = masked.selected_positions();
        if positions.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let binder = Binder::new(&tape, params, GroupSet::none());
        let out = encode(&binder, config, &masked.input)?;
        let hidden = out.hidden.gather_rows(&positions)?;
        let logits = mlm_logits(&binder, config, hidden)?;
        let targets: Vec<usize> = positions.iter().map(|&p| masked.targets[p]).collect();
        let loss = logits.cross_entropy(&targets, None)?;
        total += loss.value().data()[0].as_f64() * positions.len() as f64;
        count += positions.len();
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / count as f64)
}

/// Settings of one MLM training phase.
struct MlmPhase<'a> {
    name: &'a str,
    config: ModelConfig,
    groups: GroupSet,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    warmup_steps: usize,
    mask_prob: f64,
    clip_norm: f64,
    seed: u64,
}

/// Runs MLM training and keeps the parameters of the epoch with the lowest
/// dev loss (earliest on ties).
fn run_mlm_phase<T: Scalar>(
    phase: &MlmPhase<'_>,
    params: &mut ParameterStore<T>,
    train: &DomainCorpus,
    dev: &DomainCorpus,
    history: &mut History,
) -> Result<PhaseReport> {
    if train.is_empty() {
        return Err(Error::Data(format!(
            "{} needs a nonempty corpus",
            phase.name
        )));
    }
    if phase.epochs == 0 {
        return Err(Error::config("epochs_fusion", "must be at least 1"));
    }
    let config = &phase.config;
    train.validate(config.vocab_size, config.n_classes)?;
    let steps_per_epoch = train.len().div_ceil(phase.batch_size);
    let schedule =
        Schedule::for_phase(phase.lr, phase.warmup_steps, steps_per_epoch * phase.epochs)?;
    let trained: Vec<String> = params
        .iter()
        .filter(|(_, p)| phase.groups.contains(p.group))
        .map(|(n, _)| n.to_string())
        .collect();
    let mut state = AdamState::new();
    let mut best: Option<(f64, usize, ParameterStore<T>)> = None;
    let mut dev_metric = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let dev_seed = seed_for(phase.seed, 2, 0, 0);

    for epoch in 1..=phase.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_for(
            phase.seed,
            3,
            epoch as u64,
            0,
        )));
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (b, chunk) in order.chunks(phase.batch_size).enumerate() {
            step += 1;
            let docs: Vec<&[usize]> = chunk
                .iter()
                .map(|&i| train.documents[i].as_slice())
                .collect();
            let batch = batch_documents(&docs, config.max_len)?;
            let mask_seed = seed_for(phase.seed, 4, epoch as u64, b as u64);
            let masked = mask_for_mlm(&batch, phase.mask_prob, config.vocab_size, mask_seed)?;
            let positions = masked.selected_positions();
            if positions.is_empty() {
                continue;
            }
            let tape = Tape::new();
            let binder = Binder::new(&tape, params, phase.groups).with_dropout(
                config.dropout,
                ChaCha8Rng::seed_from_u64(seed_for(phase.seed, 5, epoch as u64, b as u64)),
            );
            let out = encode(&binder, config, &masked.input)?;
            let hidden = out.hidden.gather_rows(&positions)?;
            let logits = mlm_logits(&binder, config, hidden)?;
            let targets: Vec<usize> = positions.iter().map(|&p| masked.targets[p]).collect();
            let loss = logits.cross_entropy(&targets, None)?;
            loss.ensure_finite("mlm loss")?;
            loss_sum += loss.value().data()[0].as_f64();
            loss_n += 1;
            let mut grads = tape.backward(loss)?;
            let mut grads = binder.gradients(&mut grads);
            drop(binder);
            clip_global_norm(&mut grads, phase.clip_norm);
            adam_step(
                params,
                &grads,
                &mut state,
                schedule.lr_at(step)?,
                phase.groups,
            )?;
            if cfg!(debug_assertions) {
                check_params(params, &trained)?;
            }
        }
        let dev_loss = mlm_loss(
            params,
            config,
            dev,
            phase.batch_size,
            phase.mask_prob,
            dev_seed,
        )?;
        let train_loss = loss_sum / loss_n.max(1) as f64;
        dev_metric.push(dev_loss);
        history.rows.push(HistoryRow {
            phase: phase.name.into(),
            epoch,
            step,
            lr: schedule.lr_at(step)?,
            train_loss,
            dev_metric: dev_loss,
        });
        log::info!(
            "{} seed {} epoch {epoch}: train {train_loss:.4} dev {dev_loss:.4}",
            phase.name,
            phase.seed
        );
        if best.as_ref().is_none_or(|(b, _, _)| dev_loss < *b) {
            best = Some((dev_loss, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    *params = best_params;
    Ok(PhaseReport {
        dev_metric,
        best_epoch,
    })
}

/// Domain-fusion training: MLM on the mixed corpus, updating the variant's
/// fusion groups. Keeps the parameters of the epoch with the lowest dev MLM
/// loss.
pub fn train_domain_fusion<T: Scalar>(
    params: &mut ParameterStore<T>,
    mixed: &DomainCorpus,
    dev: &DomainCorpus,
    plan: &RunPlan,
    history: &mut History,
) -> Result<PhaseReport> {
    if !plan.variant.runs_fusion() {
        return Err(Error::Contract(format!(
            "{} does not run domain fusion",
            plan.variant
        )));
    }
    let hyper = &plan.hyper;
    let phase = MlmPhase {
        name: "fusion",
        config: plan.model_config(),
        groups: plan.variant.fusion_groups(),
        lr: hyper.fusion_lr(plan.variant),
        epochs: hyper.epochs_fusion,
        batch_size: hyper.batch_size,
        warmup_steps: hyper.warmup_steps,
        mask_prob: hyper.mask_prob,
        clip_norm: hyper.clip_norm,
        seed: plan.seed,
    };
    run_mlm_phase(&phase, params, mixed, dev, history)
}

/// How the stand-in pre-trained backbone is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSpec {
    /// Documents in the generated general corpus.
    pub docs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub corpus_seed: u64,
    /// Documents in the general dev corpus used for model selection.
    pub dev_docs: usize,
    pub dev_seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            docs: 3000,
            epochs: 20,
            lr: 2e-3,
            batch_size: 32,
            corpus_seed: 999,
            dev_docs: 300,
            dev_seed: 998,
        }
    }
}

/// Full-parameter MLM training of a seeded adapter-free model on a general
/// corpus. The result's FROZEN and MLM_HEAD tensors serve as the backbone of
/// later runs.
pub fn pretrain_backbone<T: Scalar>(
    config: &ModelConfig,
    corpus: &DomainCorpus,
    dev: &DomainCorpus,
    spec: &PretrainSpec,
    backbone_seed: u64,
) -> Result<(ParameterStore<T>, PhaseReport)> {
    let config = ModelConfig {
        adapters_enabled: false,
        ..config.clone()
    };
    let mut params = init_model_seeded(&config, backbone_seed, backbone_seed)?;
    let phase = MlmPhase {
        name: "pretrain",
        config,
        groups: GroupSet::of(&[Group::Frozen, Group::MlmHead]),
        lr: spec.lr,
        epochs: spec.epochs,
        batch_size: spec.batch_size.max(1),
        warmup_steps: DEFAULT_WARMUP,
        mask_prob: 0.15,
        clip_norm: 1.0,
        seed: backbone_seed,
    };
    let report = run_mlm_phase(&phase, &mut params, corpus, dev, &mut History::default())?;
    Ok((params, report))
}

/// Argmax accuracy over a labeled corpus; ties go to the smaller class index.
pub fn evaluate_accuracy<T: Scalar>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    corpus: &DomainCorpus,
    batch_size: usize,
) -> Result<f64> {
    let labels = corpus
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{} has no labels to evaluate", corpus.domain_id)))?;
    if corpus.is_empty() {
        return Err(Error::Data(format!("{} is empty", corpus.domain_id)));
    }
    let preds = predict(params, config, corpus, batch_size)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / corpus.len() as f64)
}

/// Argmax predictions for every document.
pub fn predict<T: Scalar>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    corpus: &DomainCorpus,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(corpus.len());
    for chunk in corpus.documents.chunks(batch_size.max(1)) {
        let docs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = batch_documents(&docs, config.max_len)?;
        let logits = class_logits(params, config, &batch)?;
        for row in logits.data().chunks(config.n_classes) {
            preds.push(argmax(row));
        }
    }
    Ok(preds)
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Task fine-tuning on labeled source data; keeps the epoch with the best
/// source-dev accuracy (earliest on ties).
pub fn train_task<T: Scalar>(
    params: &mut ParameterStore<T>,
    train: &DomainCorpus,
    dev: &DomainCorpus,
    plan: &RunPlan,
    history: &mut History,
) -> Result<PhaseReport> {
    let config = plan.model_config();
    let hyper = &plan.hyper;
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("task fine-tuning needs labeled source data".into()))?;
    if train.is_empty() {
        return Err(Error::Data(
            "task fine-tuning needs a nonempty training set".into(),
        ));
    }
    train.validate(config.vocab_size, config.n_classes)?;
    dev.validate(config.vocab_size, config.n_classes)?;
    let groups = plan.variant.task_groups();
    let steps_per_epoch = train.len().div_ceil(hyper.batch_size);
    let schedule = Schedule::for_phase(
        hyper.task_lr(plan.variant),
        hyper.warmup_steps,
        steps_per_epoch * hyper.epochs_task,
    )?;
    let trained: Vec<String> = params
        .iter()
        .filter(|(_, p)| groups.contains(p.group))
        .map(|(n, _)| n.to_string())
        .collect();
    let mut state = AdamState::new();
    let mut best: Option<(f64, usize, ParameterStore<T>)> = None;
    let mut dev_metric = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=hyper.epochs_task {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_for(
            plan.seed,
            6,
            epoch as u64,
            0,
        )));
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            step += 1;
            let docs: Vec<&[usize]> = chunk
                .iter()
                .map(|&i| train.documents[i].as_slice())
                .collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = batch_documents(&docs, config.max_len)?;
            let tape = Tape::new();
            let binder = Binder::new(&tape, params, groups).with_dropout(
                config.dropout,
                ChaCha8Rng::seed_from_u64(seed_for(plan.seed, 7, epoch as u64, b as u64)),
            );
            let out = encode(&binder, &config, &batch)?;
            let logits = cls_logits(&binder, out.hidden)?;
            let loss = logits.cross_entropy(&targets, None)?;
            loss.ensure_finite("task loss")?;
            loss_sum += loss.value().data()[0].as_f64();
            loss_n += 1;
            let mut grads = tape.backward(loss)?;
            let mut grads = binder.gradients(&mut grads);
            drop(binder);
            clip_global_norm(&mut grads, hyper.clip_norm);
            adam_step(params, &grads, &mut state, schedule.lr_at(step)?, groups)?;
            if cfg!(debug_assertions) {
                check_params(params, &trained)?;
            }
        }
        let acc = evaluate_accuracy(params, &config, dev, hyper.batch_size.max(32))?;
        dev_metric.push(acc);
        history.rows.push(HistoryRow {
            phase: "task".into(),
            epoch,
            step,
            lr: schedule.lr_at(step)?,
            train_loss: loss_sum / loss_n.max(1) as f64,
            dev_metric: acc,
        });
        log::info!(
            "{} {} task epoch {epoch}: train {:.4} dev acc {:.4}",
            plan.variant,
            plan.seed,
            loss_sum / loss_n.max(1) as f64,
            acc
        );
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    *params = best_params;
    Ok(PhaseReport {
        dev_metric,
        best_epoch,
    })
}

/// One target domain: unlabeled training text, unlabeled dev text (for the
/// fusion dev loss), and the labeled test set used only for evaluation.
#[derive(Debug, Clone)]
pub struct TargetData {
    pub domain_id: String,
    unlabeled: DomainCorpus,
    dev_unlabeled: DomainCorpus,
    pub test: DomainCorpus,
}

impl TargetData {
    /// Labels on `train`/`dev` are discarded here, so training never sees
    /// them. `extra` is appended to the unlabeled training text.
    pub fn new(
        train: &DomainCorpus,
        dev: &DomainCorpus,
        test: DomainCorpus,
        extra: Option<&DomainCorpus>,
    ) -> Self {
        let mut unlabeled = train.without_labels();
        if let Some(extra) = extra {
            unlabeled.documents.extend(extra.documents.iter().cloned());
        }
        Self {
            domain_id: test.domain_id.clone(),
            unlabeled,
            dev_unlabeled: dev.without_labels(),
            test,
        }
    }

    pub fn unlabeled(&self) -> &DomainCorpus {
        &self.unlabeled
    }
}

/// Everything one adaptation scheme needs.
#[derive(Debug, Clone)]
pub struct UdaDatasets {
    pub source_train: DomainCorpus,
    pub source_dev: DomainCorpus,
    /// Source text without labels beyond `source_train`; fusion only.
    pub source_unlabeled: DomainCorpus,
    pub targets: Vec<TargetData>,
}

impl UdaDatasets {
    /// Encodes the scheme `source -> targets` from generated or loaded splits.
    pub fn from_splits(
        domains: &[DomainSplits],
        vocab: &Vocab,
        source: &str,
        targets: &[String],
    ) -> Result<Self> {
        let find = |id: &str| {
            domains
                .iter()
                .find(|d| d.domain_id == id)
                .ok_or_else(|| Error::config("schemes", format!("unknown domain `{id}`")))
        };
        let src = find(source)?;
        let targets = targets
            .iter()
            .map(|t| {
                let d = find(t)?;
                Ok(TargetData::new(
                    &d.train.encode(vocab),
                    &d.dev.encode(vocab),
                    d.test.encode(vocab),
                    Some(&d.unlabeled.encode(vocab)),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            source_train: src.train.encode(vocab),
            source_dev: src.dev.encode(vocab),
            source_unlabeled: src.unlabeled.encode(vocab),
            targets,
        })
    }

    /// Unlabeled, shuffled fusion corpus and its dev counterpart.
    pub fn fusion_corpora(&self, seed: u64) -> (DomainCorpus, DomainCorpus) {
        let mut source = self.source_train.without_labels();
        source
            .documents
            .extend(self.source_unlabeled.documents.iter().cloned());
        let unlabeled: Vec<&DomainCorpus> = self.targets.iter().map(|t| &t.unlabeled).collect();
        let mixed = mix_domains(&source, &unlabeled, seed);
        let dev_targets: Vec<&DomainCorpus> =
            self.targets.iter().map(|t| &t.dev_unlabeled).collect();
        let mixed_dev = mix_domains(&self.source_dev.without_labels(), &dev_targets, seed);
        (mixed, mixed_dev)
    }
}

/// Trained parameters and per-target test accuracy of one run.
#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub params: ParameterStore<T>,
    pub target_accuracy: BTreeMap<String, f64>,
    pub source_dev_accuracy: f64,
    pub history: History,
    pub fusion: Option<PhaseReport>,
    pub task: PhaseReport,
}

impl<T> RunResult<T> {
    pub fn mean_target_accuracy(&self) -> f64 {
        let n = self.target_accuracy.len().max(1) as f64;
        self.target_accuracy.values().sum::<f64>() / n
    }
}

/// Copies every tensor of `from` whose group is in `groups` into `params`,
/// which must already hold a tensor of the same name and shape.
pub fn inherit_tensors<T: Scalar>(
    params: &mut ParameterStore<T>,
    from: &ParameterStore<T>,
    groups: GroupSet,
) -> Result<()> {
    for (name, p) in from.iter().filter(|(_, p)| groups.contains(p.group)) {
        let dst = params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("tensor `{name}` not in model")))?;
        if dst.tensor.shape() != p.tensor.shape() {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                p.tensor.shape(),
                dst.tensor.shape()
            )));
        }
        dst.tensor = p.tensor.clone();
    }
    Ok(())
}

/// Runs the variant's phases in order and evaluates every target test set.
pub fn run_method<T: Scalar>(plan: &RunPlan, data: &UdaDatasets) -> Result<RunResult<T>> {
    run_method_on(plan, data, None)
}

/// Like [`run_method`], but starts from the frozen tensors of `backbone`
/// (for instance a pre-trained one) and from its MLM head, if it has one.
pub fn run_method_on<T: Scalar>(
    plan: &RunPlan,
    data: &UdaDatasets,
    backbone: Option<&ParameterStore<T>>,
) -> Result<RunResult<T>> {
    plan.validate()?;
    let config = plan.model_config();
    let mut params = init_model_seeded(&config, plan.backbone_seed, plan.seed)?;
    if let Some(backbone) = backbone {
        inherit_tensors(
            &mut params,
            backbone,
            GroupSet::of(&[Group::Frozen, Group::MlmHead]),
        )?;
    }
    let mut history = History::default();

    let fusion = if plan.variant.runs_fusion() {
        let (mixed, mixed_dev) = data.fusion_corpora(plan.seed);
        Some(train_domain_fusion(
            &mut params,
            &mixed,
            &mixed_dev,
            plan,
            &mut history,
        )?)
    } else {
        None
    };
    let task = train_task(
        &mut params,
        &data.source_train,
        &data.source_dev,
        plan,
        &mut history,
    )?;

    let eval_batch = plan.hyper.batch_size.max(32);
    let source_dev_accuracy = evaluate_accuracy(&params, &config, &data.source_dev, eval_batch)?;
    let mut target_accuracy = BTreeMap::new();
    for t in &data.targets {
        target_accuracy.insert(
            t.domain_id.clone(),
            evaluate_accuracy(&params, &config, &t.test, eval_batch)?,
        );
    }
    Ok(RunResult {
        params,
        target_accuracy,
        source_dev_accuracy,
        history,
        fusion,
        task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_definitions() {
        assert!(!MethodVariant::FullFt.uses_adapters());
        assert!(!MethodVariant::FullFt.runs_fusion());
        assert!(MethodVariant::AdaTsa.uses_adapters() && MethodVariant::AdaTsa.runs_fusion());
        assert!(!MethodVariant::AdaFt.task_groups().contains(Group::Frozen));
        assert!(MethodVariant::FullTsa
            .fusion_groups()
            .contains(Group::Frozen));
        assert!(!MethodVariant::FullTsa
            .fusion_groups()
            .contains(Group::TaskHead));
        assert!(!MethodVariant::AdaTsa.task_groups().contains(Group::MlmHead));
        assert_eq!(MethodVariant::parse("ada-tsa"), Some(MethodVariant::AdaTsa));
        assert_eq!(MethodVariant::parse("FULL_FT"), Some(MethodVariant::FullFt));
    }

    #[test]
    fn argmax_prefers_smaller_index_on_ties() {
        assert_eq!(argmax(&[0.5f32, 0.5]), 0);
        assert_eq!(argmax(&[0.1f32, 0.7, 0.7]), 1);
    }

    #[test]
    fn default_rates() {
        let h = TrainHyper::default();
        assert_eq!(h.task_lr(MethodVariant::AdaTsa), 5e-5);
        assert_eq!(h.task_lr(MethodVariant::FullFt), 2e-5);
        assert_eq!((h.epochs_fusion, h.epochs_task), (10, 10));
    }
}
