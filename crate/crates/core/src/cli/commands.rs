use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiment::{prepare, run_experiment, DataSource, ExperimentConfig, ModelShape};
use super::{Cli, Command, ModelArgs, SchemeArgs};
use crate::analysis::{
    extract_hidden, pca_project_2d, similarity_matrix, write_hidden_matrix, Pooling,
};
use crate::data::{
    gen_synthetic, read_dataset, write_dataset, DomainSplits, SynthSpec, TextCorpus, Vocab,
};
use crate::error::{Error, Result};
use crate::model::{init_model, init_model_seeded, Group, GroupSet, ModelConfig, ParameterStore};
use crate::persistence::{load_adapter_bundle, load_checkpoint, save_checkpoint, CheckpointScope};
use crate::tensor::{Scalar, Tensor};
use crate::training::{
    evaluate_accuracy, inherit_tensors, train_domain_fusion, train_task, History, MethodVariant,
    PhaseReport, PretrainSpec, RunPlan, TrainHyper, UdaDatasets,
};

/// Settings for `pretrain-fusion` and `finetune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelShape,
    pub hyper: TrainHyper,
    pub backbone_seed: u64,
    /// Pre-train a backbone when no checkpoint is given.
    pub pretrain: Option<PretrainSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        Self {
            model: exp.model,
            hyper: exp.hyper,
            backbone_seed: exp.backbone_seed,
            pretrain: exp.pretrain,
        }
    }
}

pub(super) struct Outcome {
    pub files: Vec<PathBuf>,
    pub partial: bool,
}

fn read_config<C: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(C::default()),
    }
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(default))
}

fn write(path: PathBuf, contents: &[u8], files: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(())
}

fn parse_variant(s: &str) -> Result<MethodVariant> {
    MethodVariant::parse(s)
        .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
}

pub(super) fn dispatch<T: Scalar>(cli: &Cli) -> Result<Outcome> {
    let config = cli.common.config.as_deref();
    let files = match &cli.command {
        Command::GenData => gen_data(cli, config)?,
        Command::PretrainFusion { scheme, backbone } => {
            pretrain_fusion::<T>(cli, config, scheme, backbone.as_deref())?
        }
        Command::Finetune { scheme, init } => finetune::<T>(cli, config, scheme, init.as_deref())?,
        Command::Evaluate {
            model,
            data,
            domains,
            split,
        } => evaluate::<T>(cli, model, data, domains, split)?,
        Command::Similarity { data, top_k } => similarity(cli, data, *top_k)?,
        Command::ProjectHidden {
            model,
            data,
            domains,
            split,
            pooling,
            label,
        } => project_hidden::<T>(cli, model, data, domains, split, pooling, label)?,
        Command::Experiment => return experiment::<T>(cli, config),
    };
    Ok(Outcome {
        files,
        partial: false,
    })
}

fn gen_data(cli: &Cli, config: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut spec: SynthSpec = read_config(config)?;
    if let Some(seed) = cli.common.seed {
        spec.seed = seed;
    }
    // validation happens before anything touches the disk
    let domains = gen_synthetic(&spec)?;
    let dir = out_dir(cli, "data");
    write_dataset(&dir, &spec, &domains)?;
    let mut files = Vec::new();
    for d in &domains {
        for split in ["train.tsv", "dev.tsv", "test.tsv"] {
            files.push(dir.join(&d.domain_id).join(split));
        }
        if !d.unlabeled.is_empty() {
            files.push(dir.join(&d.domain_id).join("unlabeled.txt"));
        }
    }
    files.push(dir.join("spec.json"));
    Ok(files)
}

/// The starting point of a single-phase run.
struct Start<T> {
    domains: Vec<DomainSplits>,
    vocab: Vocab,
    model: ModelConfig,
    base: Option<ParameterStore<T>>,
    /// Groups copied from `base` into the freshly initialized model.
    inherit: GroupSet,
}

fn start_from<T: Scalar>(
    data: &Path,
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    inherit: GroupSet,
    out: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<Start<T>> {
    match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint::<T>(path)?;
            let vocab = ckpt.vocab.ok_or_else(|| {
                Error::Checkpoint(format!("{} carries no vocabulary", path.display()))
            })?;
            Ok(Start {
                domains: read_dataset(data)?,
                vocab,
                model: ckpt.config,
                base: Some(ckpt.params),
                inherit,
            })
        }
        None => {
            let setup = prepare::<T>(
                &DataSource::Dir(data.to_path_buf()),
                &cfg.model,
                cfg.pretrain.as_ref(),
                cfg.backbone_seed,
            )?;
            let path = out.join("backbone.ckpt");
            let plain = ModelConfig {
                adapters_enabled: false,
                ..setup.model.clone()
            };
            // saved either way so adapter bundles of this run can be applied
            let base = match setup.backbone {
                Some((params, _)) => {
                    save_checkpoint(
                        &path,
                        &params,
                        &plain,
                        Some(&setup.vocab),
                        CheckpointScope::Full,
                    )?;
                    Some(params)
                }
                None => {
                    let params = init_model::<T>(&plain, cfg.backbone_seed)?;
                    save_checkpoint(
                        &path,
                        &params,
                        &plain,
                        Some(&setup.vocab),
                        CheckpointScope::Full,
                    )?;
                    None
                }
            };
            files.push(path);
            Ok(Start {
                domains: setup.domains,
                vocab: setup.vocab,
                model: setup.model,
                base,
                inherit: GroupSet::of(&[Group::Frozen, Group::MlmHead]),
            })
        }
    }
}

fn plan_for(
    cli: &Cli,
    cfg: &RunConfig,
    scheme: &SchemeArgs,
    model: &ModelConfig,
) -> Result<RunPlan> {
    let plan = RunPlan {
        variant: parse_variant(&scheme.variant)?,
        source: scheme.source.clone(),
        targets: scheme.targets.clone(),
        seed: cli.common.seed.unwrap_or(0),
        backbone_seed: cfg.backbone_seed,
        hyper: cfg.hyper.clone(),
        model: model.clone(),
    };
    plan.validate()?;
    Ok(plan)
}

fn init_params<T: Scalar>(plan: &RunPlan, start: &Start<T>) -> Result<ParameterStore<T>> {
    let mut params = init_model_seeded(&plan.model_config(), plan.backbone_seed, plan.seed)?;
    if let Some(base) = &start.base {
        inherit_tensors(&mut params, base, start.inherit)?;
    }
    Ok(params)
}

#[derive(Serialize)]
struct PhaseSummary<'a> {
    variant: MethodVariant,
    seed: u64,
    best_epoch: usize,
    dev_metric: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    source_dev_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    target_accuracy: Vec<(String, f64)>,
}

fn summary_json(
    plan: &RunPlan,
    report: &PhaseReport,
    extra: Option<(f64, Vec<(String, f64)>)>,
) -> Result<Vec<u8>> {
    let (source_dev_accuracy, target_accuracy) = match extra {
        Some((s, t)) => (Some(s), t),
        None => (None, Vec::new()),
    };
    let s = PhaseSummary {
        variant: plan.variant,
        seed: plan.seed,
        best_epoch: report.best_epoch,
        dev_metric: &report.dev_metric,
        source_dev_accuracy,
        target_accuracy,
    };
    Ok((serde_json::to_string_pretty(&s)? + "\n").into_bytes())
}

fn pretrain_fusion<T: Scalar>(
    cli: &Cli,
    config: Option<&Path>,
    scheme: &SchemeArgs,
    backbone: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let cfg: RunConfig = read_config(config)?;
    let out = out_dir(cli, "fusion");
    let mut files = Vec::new();
    let start = start_from::<T>(
        &scheme.data,
        &cfg,
        backbone,
        GroupSet::of(&[Group::Frozen, Group::MlmHead]),
        &out,
        &mut files,
    )?;
    let plan = plan_for(cli, &cfg, scheme, &start.model)?;
    if !plan.variant.runs_fusion() {
        return Err(Error::config(
            "variant",
            format!("{} has no fusion phase", plan.variant),
        ));
    }
    let data = UdaDatasets::from_splits(&start.domains, &start.vocab, &plan.source, &plan.targets)?;
    let mut params = init_params(&plan, &start)?;
    let (mixed, dev) = data.fusion_corpora(plan.seed);
    let mut history = History::default();
    let report = train_domain_fusion(&mut params, &mixed, &dev, &plan, &mut history)?;

    let path = out.join("fusion.ckpt");
    save_checkpoint(
        &path,
        &params,
        &plan.model_config(),
        Some(&start.vocab),
        CheckpointScope::Full,
    )?;
    files.push(path);
    write(
        out.join("history.csv"),
        history.to_csv().as_bytes(),
        &mut files,
    )?;
    write(
        out.join("report.json"),
        &summary_json(&plan, &report, None)?,
        &mut files,
    )?;
    Ok(files)
}

fn finetune<T: Scalar>(
    cli: &Cli,
    config: Option<&Path>,
    scheme: &SchemeArgs,
    init: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let cfg: RunConfig = read_config(config)?;
    let out = out_dir(cli, "finetune");
    let mut files = Vec::new();
    let all = GroupSet::of(&Group::ALL);
    let mut start = start_from::<T>(&scheme.data, &cfg, init, all, &out, &mut files)?;
    let plan = plan_for(cli, &cfg, scheme, &start.model)?;
    if let Some(base) = &start.base {
        if !plan.variant.uses_adapters() && base.names_in(Group::Adapter).next().is_some() {
            return Err(Error::config(
                "variant",
                format!(
                    "{} has no adapters but the initial checkpoint does",
                    plan.variant
                ),
            ));
        }
    }
    if init.is_none() && plan.variant.runs_fusion() {
        log::warn!(
            "{} without --init skips the fusion phase; run pretrain-fusion first",
            plan.variant
        );
    }
    start.model = plan.model_config();
    let data = UdaDatasets::from_splits(&start.domains, &start.vocab, &plan.source, &plan.targets)?;
    let mut params = init_params(&plan, &start)?;
    let mut history = History::default();
    let report = train_task(
        &mut params,
        &data.source_train,
        &data.source_dev,
        &plan,
        &mut history,
    )?;

    let config = plan.model_config();
    let batch = plan.hyper.batch_size.max(32);
    let source_dev = evaluate_accuracy(&params, &config, &data.source_dev, batch)?;
    let targets = data
        .targets
        .iter()
        .map(|t| {
            Ok((
                t.domain_id.clone(),
                evaluate_accuracy(&params, &config, &t.test, batch)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let path = out.join("model.ckpt");
    save_checkpoint(
        &path,
        &params,
        &config,
        Some(&start.vocab),
        CheckpointScope::Full,
    )?;
    files.push(path);
    if plan.variant.uses_adapters() {
        let path = out.join("adapter.bundle");
        save_checkpoint(
            &path,
            &params,
            &config,
            Some(&start.vocab),
            CheckpointScope::AdapterOnly,
        )?;
        files.push(path);
    }
    write(
        out.join("history.csv"),
        history.to_csv().as_bytes(),
        &mut files,
    )?;
    write(
        out.join("report.json"),
        &summary_json(&plan, &report, Some((source_dev, targets)))?,
        &mut files,
    )?;
    Ok(files)
}

/// Parameters, config and vocabulary from `--checkpoint` or
/// `--bundle` + `--backbone`.
fn load_model<T: Scalar>(args: &ModelArgs) -> Result<(ParameterStore<T>, ModelConfig, Vocab)> {
    let ckpt = match (&args.checkpoint, &args.bundle, &args.backbone) {
        (Some(path), None, None) => load_checkpoint::<T>(path)?,
        (None, Some(bundle), Some(backbone)) => {
            let backbone = load_checkpoint::<T>(backbone)?;
            let mut merged = load_adapter_bundle(bundle, &backbone.params)?;
            if merged.vocab.is_none() {
                merged.vocab = backbone.vocab;
            }
            merged
        }
        _ => {
            return Err(Error::config(
                "checkpoint",
                "pass --checkpoint, or --bundle together with --backbone",
            ))
        }
    };
    let vocab = ckpt
        .vocab
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocabulary".into()))?;
    Ok((ckpt.params, ckpt.config, vocab))
}

fn pick_split<'a>(d: &'a DomainSplits, split: &str) -> Result<&'a TextCorpus> {
    match split {
        "train" => Ok(&d.train),
        "dev" => Ok(&d.dev),
        "test" => Ok(&d.test),
        "unlabeled" => Ok(&d.unlabeled),
        other => Err(Error::config(
            "split",
            format!("`{other}` is not train, dev, test or unlabeled"),
        )),
    }
}

fn select_domains(all: Vec<DomainSplits>, wanted: &[String]) -> Result<Vec<DomainSplits>> {
    if wanted.is_empty() {
        return Ok(all);
    }
    wanted
        .iter()
        .map(|w| {
            all.iter()
                .find(|d| &d.domain_id == w)
                .cloned()
                .ok_or_else(|| Error::config("domains", format!("unknown domain `{w}`")))
        })
        .collect()
}

fn evaluate<T: Scalar>(
    cli: &Cli,
    model: &ModelArgs,
    data: &Path,
    domains: &[String],
    split: &str,
) -> Result<Vec<PathBuf>> {
    let (params, config, vocab) = load_model::<T>(model)?;
    let domains = select_domains(read_dataset(data)?, domains)?;
    let mut scores = std::collections::BTreeMap::new();
    for d in &domains {
        let corpus = pick_split(d, split)?.encode(&vocab);
        let acc = evaluate_accuracy(&params, &config, &corpus, 32)?;
        log::info!("{} {split}: accuracy {acc:.4}", d.domain_id);
        scores.insert(d.domain_id.clone(), acc);
    }
    let out = out_dir(cli, "eval");
    let mut files = Vec::new();
    let json = serde_json::to_string_pretty(&scores)? + "\n";
    write(
        out.join(format!("accuracy_{split}.json")),
        json.as_bytes(),
        &mut files,
    )?;
    Ok(files)
}

fn similarity(cli: &Cli, data: &Path, top_k: usize) -> Result<Vec<PathBuf>> {
    let domains = read_dataset(data)?;
    let pooled: Vec<TextCorpus> = domains
        .iter()
        .map(|d| {
            let docs = d
                .train
                .documents
                .iter()
                .chain(&d.dev.documents)
                .chain(&d.unlabeled.documents)
                .cloned()
                .collect();
            TextCorpus::unlabeled(d.domain_id.clone(), docs)
        })
        .collect();
    let refs: Vec<&TextCorpus> = pooled.iter().collect();
    let m = similarity_matrix(&refs, top_k)?;
    let out = out_dir(cli, "similarity");
    let mut files = Vec::new();
    write(
        out.join("similarity.csv"),
        m.to_csv().as_bytes(),
        &mut files,
    )?;
    write(
        out.join("similarity.json"),
        m.to_json()?.as_bytes(),
        &mut files,
    )?;
    Ok(files)
}

fn project_hidden<T: Scalar>(
    cli: &Cli,
    model: &ModelArgs,
    data: &Path,
    domains: &[String],
    split: &str,
    pooling: &str,
    label: &str,
) -> Result<Vec<PathBuf>> {
    let pooling: Pooling = pooling.parse()?;
    let (params, config, vocab) = load_model::<T>(model)?;
    let domains = select_domains(read_dataset(data)?, domains)?;
    let out = out_dir(cli, "hidden");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut files = Vec::new();
    let mut rows: Vec<T> = Vec::new();
    let mut labels = Vec::new();
    for d in &domains {
        let corpus = pick_split(d, split)?.encode(&vocab);
        let hidden = extract_hidden(&params, &config, &corpus, pooling, 32)?;
        let path = out.join(format!("{label}_{}.bin", d.domain_id));
        write_hidden_matrix(&path, &hidden)?;
        files.push(path);
        labels.extend(std::iter::repeat_n(d.domain_id.clone(), corpus.len()));
        rows.extend_from_slice(hidden.data());
    }
    let all = Tensor::new(vec![labels.len(), config.hidden], rows)?;
    let projection = pca_project_2d(&all)?;
    write(
        out.join(format!("{label}_projection.csv")),
        projection.to_csv(&labels)?.as_bytes(),
        &mut files,
    )?;
    Ok(files)
}

fn experiment<T: Scalar>(cli: &Cli, config: Option<&Path>) -> Result<Outcome> {
    let mut cfg: ExperimentConfig = read_config(config)?;
    if let Some(seed) = cli.common.seed {
        let n = cfg.seeds.len() as u64;
        cfg.seeds = (seed..seed + n).collect();
    }
    if let Some(out) = &cli.common.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    let report = run_experiment::<T>(&cfg, cli.common.jobs, Some(&out))?;
    if let Some(table) = &report.table {
        eprint!("{}", table.to_text());
    }
    for f in &report.failures {
        log::error!(
            "{} {} seed {} failed: {}",
            f.scheme,
            f.variant,
            f.seed,
            f.error
        );
    }
    Ok(Outcome {
        files: report.files,
        partial: !report.failures.is_empty(),
    })
}
