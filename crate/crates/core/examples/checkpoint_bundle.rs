//! Saves a full checkpoint and an adapter-only bundle, then restores the
//! model by applying the bundle to the backbone.

use adauda::model::{init_model, Group, ModelConfig};
use adauda::persistence::{
    apply_adapter_bundle, decode_checkpoint, encode_checkpoint, CheckpointScope,
};

fn main() -> adauda::Result<()> {
    let config = ModelConfig {
        layers: 12,
        hidden: 768,
        heads: 12,
        ffn_dim: 3072,
        adapter_dim: 64,
        vocab_size: 5000,
        max_len: 128,
        n_classes: 2,
        adapters_enabled: true,
        dropout: 0.0,
        ln_eps: 1e-5,
    };
    let mut params = init_model::<f32>(&config, 1)?;
    // stand-in for adapter training
    for n in params
        .names_in(Group::Adapter)
        .map(String::from)
        .collect::<Vec<_>>()
    {
        params
            .get_mut(&n)
            .unwrap()
            .tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.01);
    }
    let full = encode_checkpoint(&params, &config, None, CheckpointScope::Full)?;
    let bundle = encode_checkpoint(&params, &config, None, CheckpointScope::AdapterOnly)?;
    println!(
        "full {:.1} MB, bundle {:.1} MB, ratio {:.2}%",
        full.len() as f64 / 1e6,
        bundle.len() as f64 / 1e6,
        100.0 * bundle.len() as f64 / full.len() as f64
    );
    let backbone = decode_checkpoint::<f32>(&full)?.params;
    let restored = apply_adapter_bundle(&decode_checkpoint(&bundle)?, &backbone)?;
    println!("restored bitwise: {}", restored.bit_eq(&params));
    Ok(())
}
