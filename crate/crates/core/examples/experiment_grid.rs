//! A scheme × variant × seed grid on the default desk-scale setup, with
//! aggregated results and Welch tests, written to a temporary directory.
//! Takes a few minutes on one core.

use adauda::cli::{run_experiment, welch_csv, ExperimentConfig};
use adauda::training::MethodVariant;

fn main() -> adauda::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cfg = ExperimentConfig {
        variants: vec![
            MethodVariant::FullFt,
            MethodVariant::AdaFt,
            MethodVariant::AdaTsa,
        ],
        seeds: vec![0, 1],
        save_checkpoints: false,
        ..ExperimentConfig::default()
    };
    let dir = std::env::temp_dir().join("adauda-experiment-grid");
    let report = run_experiment::<f32>(&cfg, 1, Some(&dir))?;
    let table = report.table.expect("every run succeeded");
    print!("{}", table.to_text());
    print!("{}", welch_csv(&table));
    println!("outputs in {}", dir.display());
    Ok(())
}
