use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Group, GroupSet, ModelConfig, ParameterStore};
use crate::autodiff::{Gradients, Tape, Var};
use crate::data::vocab::PAD_ID;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Binds store parameters onto a tape on first use. Parameters whose group
/// is in `trainable` become gradient-tracked leaves; all others are constants.
pub struct Binder<'t, 's, T> {
    tape: &'t Tape<T>,
    store: &'s ParameterStore<T>,
    trainable: GroupSet,
    bound: RefCell<BTreeMap<String, Var<'t, T>>>,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'t, 's, T: Scalar> Binder<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParameterStore<T>, trainable: GroupSet) -> Self {
        Self {
            tape,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
            dropout: None,
        }
    }

    /// Enables dropout with rate `p` (no-op for `p == 0`).
    pub fn with_dropout(mut self, p: f64, rng: ChaCha8Rng) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, RefCell::new(rng)));
        }
        self
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Data(format!("no parameter named `{name}`")))?;
        let var = self
            .tape
            .leaf(p.tensor.clone(), self.trainable.contains(p.group));
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    fn linear(&self, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        x.linear(w, b)
    }

    fn norm(&self, x: Var<'t, T>, prefix: &str, eps: f64) -> Result<Var<'t, T>> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        x.layer_norm(g, b, T::from_f64_lossy(eps))
    }

    fn dropout(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let Some((p, rng)) = &self.dropout else {
            return Ok(x);
        };
        let shape = x.shape();
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mut rng = rng.borrow_mut();
        let numel = shape.iter().product();
        let mask = (0..numel)
            .map(|_| {
                if rng.random::<f64>() < *p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        x.mul_const(Tensor::new(shape, mask)?)
    }

    /// Gradients of every bound parameter that was tracked, by name.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.take(*var).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Token ids of a padded batch, row-major `[batch, seq]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::Shape(format!(
                "{} ids do not form a {batch}x{seq} batch",
                ids.len()
            )));
        }
        Ok(Self { ids, batch, seq })
    }

    /// Positions that hold a real token (attention keys).
    pub fn key_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }
}

pub struct EncoderOutput<'t, T> {
    /// Final-layer states, `[B, T, H]`.
    pub hidden: Var<'t, T>,
    /// Output of every layer, first to last.
    pub layers: Vec<Var<'t, T>>,
}

/// Handles to one layer's adapter weights.
pub struct AdapterVars<'t, T> {
    pub down_weight: Var<'t, T>,
    pub down_bias: Var<'t, T>,
    pub up_weight: Var<'t, T>,
    pub up_bias: Var<'t, T>,
}

impl<'t, T: Scalar> AdapterVars<'t, T> {
    pub fn bind(binder: &Binder<'t, '_, T>, layer: usize) -> Result<Self> {
        let p = format!("layers.{layer}.adapter");
        Ok(Self {
            down_weight: binder.param(&format!("{p}.down.weight"))?,
            down_bias: binder.param(&format!("{p}.down.bias"))?,
            up_weight: binder.param(&format!("{p}.up.weight"))?,
            up_bias: binder.param(&format!("{p}.up.bias"))?,
        })
    }
}

/// Residual bottleneck: `x + up(gelu(down(x)))`.
pub fn adapter_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    adapter: &AdapterVars<'t, T>,
) -> Result<Var<'t, T>> {
    let h = x.value().last_dim();
    let down = adapter.down_weight.shape();
    let up = adapter.up_weight.shape();
    if down.len() != 2 || down[0] != h || up.len() != 2 || up[1] != h || up[0] != down[1] {
        return Err(Error::Shape(format!(
            "adapter down {down:?} / up {up:?} do not fit hidden size {h}"
        )));
    }
    let inner = x
        .linear(adapter.down_weight, adapter.down_bias)?
        .gelu()
        .linear(adapter.up_weight, adapter.up_bias)?;
    x.add(inner)
}

/// Runs the encoder stack over `batch`.
pub fn encode<'t, T: Scalar>(
    binder: &Binder<'t, '_, T>,
    config: &ModelConfig,
    batch: &TokenBatch,
) -> Result<EncoderOutput<'t, T>> {
    let (b, t) = (batch.batch, batch.seq);
    if t > config.max_len {
        return Err(Error::Data(format!(
            "sequence length {t} exceeds max_len {}",
            config.max_len
        )));
    }
    if let Some(pos) = batch.ids.iter().position(|&id| id >= config.vocab_size) {
        return Err(Error::Data(format!(
            "token id {} at row {}, position {} exceeds vocabulary size {}",
            batch.ids[pos],
            pos / t,
            pos % t,
            config.vocab_size
        )));
    }
    let key_mask = batch.key_mask();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let tokens = binder
        .param("embed.tokens")?
        .embedding(&batch.ids, &[b, t])?;
    let pos = binder
        .param("embed.positions")?
        .embedding(&positions, &[b, t])?;
    let mut x = tokens.add(pos)?;
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let p = format!("layers.{l}");
        let q = binder.linear(x, &format!("{p}.attn.q"))?;
        let k = binder.linear(x, &format!("{p}.attn.k"))?;
        let v = binder.linear(x, &format!("{p}.attn.v"))?;
        let attn = q.attention(k, v, config.heads, &key_mask)?;
        let attn = binder.dropout(binder.linear(attn, &format!("{p}.attn.o"))?)?;
        let h = binder.norm(x.add(attn)?, &format!("{p}.ln1"), config.ln_eps)?;
        let ff = binder.linear(h, &format!("{p}.ffn.in"))?.gelu();
        let ff = binder.dropout(binder.linear(ff, &format!("{p}.ffn.out"))?)?;
        x = binder.norm(h.add(ff)?, &format!("{p}.ln2"), config.ln_eps)?;
        if config.adapters_enabled {
            x = adapter_forward(x, &AdapterVars::bind(binder, l)?)?;
        }
        layers.push(x);
    }
    Ok(EncoderOutput { hidden: x, layers })
}

/// Vocabulary logits for every row of `hidden` (any leading shape).
pub fn mlm_logits<'t, T: Scalar>(
    binder: &Binder<'t, '_, T>,
    config: &ModelConfig,
    hidden: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let h = binder.linear(hidden, "mlm.dense")?.gelu();
    let h = binder.norm(h, "mlm.ln", config.ln_eps)?;
    binder.linear(h, "mlm.decoder")
}

/// Class logits `[B, C]` from the first position of each row of `[B, T, H]`.
pub fn cls_logits<'t, T: Scalar>(
    binder: &Binder<'t, '_, T>,
    hidden: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = hidden.shape();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::Shape(format!(
            "classification head needs [B, T, H] states, got {shape:?}"
        )));
    }
    let rows: Vec<usize> = (0..shape[0]).map(|b| b * shape[1]).collect();
    let first = hidden.gather_rows(&rows)?;
    let pooled = binder.linear(first, "cls.pooler")?.tanh();
    binder.linear(pooled, "cls.out")
}

/// Groups whose tensors receive gradients during a phase.
pub fn trainable_groups(train_backbone: bool, head: Group, adapters: bool) -> GroupSet {
    let mut groups = vec![head];
    if train_backbone {
        groups.push(Group::Frozen);
    }
    if adapters {
        groups.push(Group::Adapter);
    }
    GroupSet::of(&groups)
}
