//! Generates a three-domain dataset and prints per-domain sizes and the
//! vocabulary-overlap matrix.

use adauda::analysis::{similarity_matrix, DEFAULT_TOP_K};
use adauda::data::{gen_synthetic, SynthSpec};

fn main() -> adauda::Result<()> {
    for shared in [0.9, 0.2] {
        let spec = SynthSpec {
            shared_fraction: shared,
            ..SynthSpec::default()
        };
        let domains = gen_synthetic(&spec)?;
        println!("shared_fraction = {shared}");
        for d in &domains {
            println!(
                "  {}: train {} dev {} test {} unlabeled {}",
                d.domain_id,
                d.train.len(),
                d.dev.len(),
                d.test.len(),
                d.unlabeled.len()
            );
        }
        let train: Vec<_> = domains.iter().map(|d| &d.train).collect();
        print!("{}", similarity_matrix(&train, DEFAULT_TOP_K)?.to_csv());
    }
    Ok(())
}
