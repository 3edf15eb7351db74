//! Freshly initialized adapters leave the encoder output unchanged, bit for bit.

use adauda::model::{hidden_states, init_model, ModelConfig, TokenBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> adauda::Result<()> {
    let with = ModelConfig {
        layers: 2,
        hidden: 32,
        heads: 4,
        ffn_dim: 64,
        adapter_dim: 8,
        vocab_size: 200,
        max_len: 16,
        n_classes: 2,
        adapters_enabled: true,
        dropout: 0.0,
        ln_eps: 1e-5,
    };
    let without = ModelConfig {
        adapters_enabled: false,
        ..with.clone()
    };
    let a = init_model::<f32>(&with, 7)?;
    let b = init_model::<f32>(&without, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut identical = 0;
    for _ in 0..20 {
        let ids: Vec<usize> = (0..4 * 12).map(|_| rng.random_range(4..200)).collect();
        let batch = TokenBatch::new(ids, 4, 12)?;
        if hidden_states(&a, &with, &batch)?.bit_eq(&hidden_states(&b, &without, &batch)?) {
            identical += 1;
        }
    }
    println!("{identical}/20 batches bitwise identical");
    Ok(())
}
