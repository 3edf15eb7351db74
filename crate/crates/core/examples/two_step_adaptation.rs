//! One seed of Ada-FT and Ada-TSA on the default desk-scale setup: a
//! pre-trained backbone, adapters, and optional domain-fusion training.

use adauda::cli::{prepare, ExperimentConfig};
use adauda::training::{run_method_on, MethodVariant, RunPlan, UdaDatasets};

fn main() -> adauda::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cfg = ExperimentConfig::default();
    let setup = prepare::<f32>(
        &cfg.data,
        &cfg.model,
        cfg.pretrain.as_ref(),
        cfg.backbone_seed,
    )?;
    let backbone = setup.backbone.as_ref().map(|(p, _)| p);
    let scheme = &cfg.schemes[0];
    let data = UdaDatasets::from_splits(
        &setup.domains,
        &setup.vocab,
        &scheme.source,
        &scheme.targets,
    )?;
    for variant in [MethodVariant::AdaFt, MethodVariant::AdaTsa] {
        let plan = RunPlan {
            variant,
            source: scheme.source.clone(),
            targets: scheme.targets.clone(),
            seed: 0,
            backbone_seed: cfg.backbone_seed,
            hyper: cfg.hyper.clone(),
            model: setup.model.clone(),
        };
        let r = run_method_on::<f32>(&plan, &data, backbone)?;
        println!(
            "{variant}: source dev {:.4}, targets {:?}, mean {:.4}",
            r.source_dev_accuracy,
            r.target_accuracy,
            r.mean_target_accuracy()
        );
    }
    Ok(())
}
