//! Transformer encoder with bottleneck adapters, plus MLM and task heads.
//!
//! Every block is post-norm: `LN(x + attn(x))`, then `LN(h + ffn(h))`, then
//! (when enabled) the residual adapter on the block output. The backbone and
//! embeddings live in [`Group::Frozen`]; adapters, MLM head, and task head
//! each have their own group so training phases can pick what they update.

mod config;
mod encoder;
mod params;

pub use config::ModelConfig;
pub use encoder::{
    adapter_forward, cls_logits, encode, mlm_logits, trainable_groups, AdapterVars, Binder,
    EncoderOutput, TokenBatch,
};
pub use params::{
    config_param_counts, count_params, init_model, init_model_seeded, Group, GroupSet, Param,
    ParamCounts, ParameterStore, ADAPTER_INIT_STD, HEAD_INIT_STD,
};

use crate::autodiff::Tape;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Final-layer hidden states `[B, T, H]` without recording gradients.
pub fn hidden_states<T: Scalar>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    batch: &TokenBatch,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, params, GroupSet::none());
    let out = encode(&binder, config, batch)?;
    let hidden = out.hidden.value().clone();
    Ok(hidden)
}

/// Class logits `[B, C]` without recording gradients.
pub fn class_logits<T: Scalar>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    batch: &TokenBatch,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, params, GroupSet::none());
    let out = encode(&binder, config, batch)?;
    let logits = cls_logits(&binder, out.hidden)?;
    let value = logits.value().clone();
    Ok(value)
}
