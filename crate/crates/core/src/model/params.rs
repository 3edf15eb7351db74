use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameter partition. `Frozen` is the backbone: held constant by the
/// adapter variants, trained by the full-parameter variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Group {
    Frozen,
    Adapter,
    MlmHead,
    TaskHead,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::Frozen,
        Group::Adapter,
        Group::MlmHead,
        Group::TaskHead,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Group::Frozen => 0,
            Group::Adapter => 1,
            Group::MlmHead => 2,
            Group::TaskHead => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Frozen => "FROZEN",
            Group::Adapter => "ADAPTER",
            Group::MlmHead => "MLM_HEAD",
            Group::TaskHead => "TASK_HEAD",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Set of groups an optimizer phase may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet([bool; 4]);

impl GroupSet {
    pub fn of(groups: &[Group]) -> Self {
        let mut set = [false; 4];
        for g in groups {
            set[g.tag() as usize] = true;
        }
        Self(set)
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn contains(&self, group: Group) -> bool {
        self.0[group.tag() as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub group: Group,
}

/// Named parameters in canonical (lexicographic) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, group: Group) {
        self.params.insert(name.into(), Param { tensor, group });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Data(format!("no parameter named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_in(&self, group: Group) -> impl Iterator<Item = &str> {
        self.iter()
            .filter(move |(_, p)| p.group == group)
            .map(|(n, _)| n)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Concatenated little-endian bytes of every tensor in `group`, in name order.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, p) in self.iter().filter(|(_, p)| p.group == group) {
            out.extend(p.tensor.to_le_bytes());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            group: p.group,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise equality of every tensor and tag.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| {
                    ka == kb && a.group == b.group && a.tensor.bit_eq(&b.tensor)
                })
    }

    /// Per-group element counts.
    pub fn count(&self) -> ParamCounts {
        let mut counts = ParamCounts::default();
        for (_, p) in self.iter() {
            counts.add(p.group, p.tensor.numel());
        }
        counts
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub per_group: BTreeMap<Group, usize>,
}

impl ParamCounts {
    fn add(&mut self, group: Group, n: usize) {
        self.total += n;
        *self.per_group.entry(group).or_default() += n;
    }

    pub fn group(&self, group: Group) -> usize {
        self.per_group.get(&group).copied().unwrap_or(0)
    }

    /// Parameters updated by adapter-variant task fine-tuning.
    pub fn adapter_trainable(&self) -> usize {
        self.group(Group::Adapter) + self.group(Group::TaskHead)
    }
}

pub fn count_params<T: Scalar>(params: &ParameterStore<T>) -> ParamCounts {
    params.count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    shape: Vec<usize>,
    group: Group,
    init: Init,
}

/// Standard deviation of freshly initialized adapter down-projections.
pub const ADAPTER_INIT_STD: f64 = 0.02;
/// Standard deviation of head weights.
pub const HEAD_INIT_STD: f64 = 0.02;

/// Every parameter of the model described by `config`, with its initializer.
///
/// Backbone embeddings are drawn from N(0, 1); backbone projection weights
/// from N(0, 1/fan_in); biases start at zero and layer-norm gains at one.
fn layout(config: &ModelConfig) -> Vec<Slot> {
    let (h, f, m) = (config.hidden, config.ffn_dim, config.adapter_dim);
    let mut slots = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, group: Group, init: Init| {
        slots.push(Slot {
            name,
            shape,
            group,
            init,
        })
    };
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());

    add(
        "embed.tokens".into(),
        vec![config.vocab_size, h],
        Group::Frozen,
        Init::Normal(1.0),
    );
    add(
        "embed.positions".into(),
        vec![config.max_len, h],
        Group::Frozen,
        Init::Normal(1.0),
    );
    for l in 0..config.layers {
        let p = format!("layers.{l}");
        for proj in ["q", "k", "v", "o"] {
            add(
                format!("{p}.attn.{proj}.weight"),
                vec![h, h],
                Group::Frozen,
                fan(h),
            );
            add(
                format!("{p}.attn.{proj}.bias"),
                vec![h],
                Group::Frozen,
                Init::Zeros,
            );
        }
        add(format!("{p}.ln1.gamma"), vec![h], Group::Frozen, Init::Ones);
        add(format!("{p}.ln1.beta"), vec![h], Group::Frozen, Init::Zeros);
        add(
            format!("{p}.ffn.in.weight"),
            vec![h, f],
            Group::Frozen,
            fan(h),
        );
        add(
            format!("{p}.ffn.in.bias"),
            vec![f],
            Group::Frozen,
            Init::Zeros,
        );
        add(
            format!("{p}.ffn.out.weight"),
            vec![f, h],
            Group::Frozen,
            fan(f),
        );
        add(
            format!("{p}.ffn.out.bias"),
            vec![h],
            Group::Frozen,
            Init::Zeros,
        );
        add(format!("{p}.ln2.gamma"), vec![h], Group::Frozen, Init::Ones);
        add(format!("{p}.ln2.beta"), vec![h], Group::Frozen, Init::Zeros);
        if config.adapters_enabled {
            add(
                format!("{p}.adapter.down.weight"),
                vec![h, m],
                Group::Adapter,
                Init::Normal(ADAPTER_INIT_STD),
            );
            add(
                format!("{p}.adapter.down.bias"),
                vec![m],
                Group::Adapter,
                Init::Zeros,
            );
            add(
                format!("{p}.adapter.up.weight"),
                vec![m, h],
                Group::Adapter,
                Init::Zeros,
            );
            add(
                format!("{p}.adapter.up.bias"),
                vec![h],
                Group::Adapter,
                Init::Zeros,
            );
        }
    }
    let head = Init::Normal(HEAD_INIT_STD);
    add("mlm.dense.weight".into(), vec![h, h], Group::MlmHead, head);
    add(
        "mlm.dense.bias".into(),
        vec![h],
        Group::MlmHead,
        Init::Zeros,
    );
    add("mlm.ln.gamma".into(), vec![h], Group::MlmHead, Init::Ones);
    add("mlm.ln.beta".into(), vec![h], Group::MlmHead, Init::Zeros);
    add(
        "mlm.decoder.weight".into(),
        vec![h, config.vocab_size],
        Group::MlmHead,
        head,
    );
    add(
        "mlm.decoder.bias".into(),
        vec![config.vocab_size],
        Group::MlmHead,
        Init::Zeros,
    );
    add(
        "cls.pooler.weight".into(),
        vec![h, h],
        Group::TaskHead,
        head,
    );
    add(
        "cls.pooler.bias".into(),
        vec![h],
        Group::TaskHead,
        Init::Zeros,
    );
    add(
        "cls.out.weight".into(),
        vec![h, config.n_classes],
        Group::TaskHead,
        head,
    );
    add(
        "cls.out.bias".into(),
        vec![config.n_classes],
        Group::TaskHead,
        Init::Zeros,
    );
    slots
}

/// Parameter counts implied by `config`, without allocating any tensors.
pub fn config_param_counts(config: &ModelConfig) -> ParamCounts {
    let mut counts = ParamCounts::default();
    for slot in layout(config) {
        counts.add(slot.group, slot.shape.iter().product());
    }
    counts
}

/// 64-bit FNV-1a, used to give every parameter its own random stream.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seeded initialization. Each parameter draws from its own stream keyed by
/// name, so a backbone is identical across seeds-equal models whether or not
/// adapters are enabled.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    init_model_seeded(config, seed, seed)
}

/// Like [`init_model`], but the frozen backbone draws from `backbone_seed`
/// and adapters and heads from `seed`.
pub fn init_model_seeded<T: Scalar>(
    config: &ModelConfig,
    backbone_seed: u64,
    seed: u64,
) -> Result<ParameterStore<T>> {
    config.validate()?;
    let mut store = ParameterStore::new();
    for slot in layout(config) {
        let numel: usize = slot.shape.iter().product();
        let data: Vec<T> = match slot.init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::Normal(std) => {
                let seed = if slot.group == Group::Frozen {
                    backbone_seed
                } else {
                    seed
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(fnv1a(slot.name.as_bytes()));
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..numel)
                    .map(|_| T::from_f64_lossy(dist.sample(&mut rng)))
                    .collect()
            }
        };
        store.insert(slot.name, Tensor::new(slot.shape, data)?, slot.group);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            adapter_dim: 3,
            vocab_size: 20,
            max_len: 6,
            n_classes: 2,
            adapters_enabled: true,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn disabled_adapters_leave_group_empty() {
        let cfg = ModelConfig {
            adapters_enabled: false,
            ..small()
        };
        let store = init_model::<f32>(&cfg, 1).unwrap();
        assert_eq!(store.names_in(Group::Adapter).count(), 0);
        assert_eq!(store.count().group(Group::Adapter), 0);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = init_model::<f32>(&small(), 7).unwrap();
        let b = init_model::<f32>(&small(), 7).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_model::<f32>(&small(), 8).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn backbone_independent_of_adapters() {
        let on = init_model::<f32>(&small(), 3).unwrap();
        let off = init_model::<f32>(
            &ModelConfig {
                adapters_enabled: false,
                ..small()
            },
            3,
        )
        .unwrap();
        assert_eq!(
            on.group_bytes(Group::Frozen),
            off.group_bytes(Group::Frozen)
        );
    }

    #[test]
    fn adapter_up_projection_starts_at_zero() {
        let store = init_model::<f64>(&small(), 3).unwrap();
        for l in 0..2 {
            let up = store
                .tensor(&format!("layers.{l}.adapter.up.weight"))
                .unwrap();
            assert!(up.data().iter().all(|&v| v == 0.0));
            let down = store
                .tensor(&format!("layers.{l}.adapter.down.weight"))
                .unwrap();
            assert!(down.data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = ModelConfig {
            adapter_dim: 8,
            ..small()
        };
        match init_model::<f32>(&cfg, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "adapter_dim"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = ModelConfig {
            heads: 3,
            ..small()
        };
        assert!(matches!(
            init_model::<f32>(&cfg, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn counts_match_layout() {
        let cfg = small();
        let store = init_model::<f32>(&cfg, 0).unwrap();
        assert_eq!(store.count(), config_param_counts(&cfg));
        let c = store.count();
        assert_eq!(c.per_group.values().sum::<usize>(), c.total);
        let (l, h, m) = (cfg.layers, cfg.hidden, cfg.adapter_dim);
        assert_eq!(c.group(Group::Adapter), l * (2 * h * m + m + h));
    }
}
