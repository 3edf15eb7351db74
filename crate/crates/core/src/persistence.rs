//! Binary checkpoints and adapter-only bundles.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ADUA" | u16 version | u8 scope | u8 dtype
//! u32 header length | JSON header (config, vocab, backbone fingerprint)
//! u32 tensor count
//!   per tensor: u16 name length | name | u8 group | u8 rank | u64 dims.. | payload
//! u64 CRC-64 of every preceding byte
//! ```
//!
//! The checksum is verified before any tensor is materialized.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Group, ModelConfig, ParameterStore};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ADUA";
pub const FORMAT_VERSION: u16 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CheckpointScope {
    /// Every tensor.
    Full,
    /// Adapters and task head.
    AdapterOnly,
    /// Adapters, task head and MLM head.
    AdapterWithMlmHead,
}

impl CheckpointScope {
    fn tag(self) -> u8 {
        match self {
            CheckpointScope::Full => 0,
            CheckpointScope::AdapterOnly => 1,
            CheckpointScope::AdapterWithMlmHead => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(CheckpointScope::Full),
            1 => Some(CheckpointScope::AdapterOnly),
            2 => Some(CheckpointScope::AdapterWithMlmHead),
            _ => None,
        }
    }

    pub fn includes(self, group: Group) -> bool {
        match self {
            CheckpointScope::Full => true,
            CheckpointScope::AdapterOnly => matches!(group, Group::Adapter | Group::TaskHead),
            CheckpointScope::AdapterWithMlmHead => group != Group::Frozen,
        }
    }

    pub fn is_bundle(self) -> bool {
        self != CheckpointScope::Full
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    vocab: Option<Vocab>,
    fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub vocab: Option<Vocab>,
    pub scope: CheckpointScope,
    /// Fingerprint of the backbone the tensors were trained against.
    pub fingerprint: u64,
    pub params: ParameterStore<T>,
}

/// CRC-64/XZ, the checksum used throughout the format.
pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// The configuration fields that determine the frozen tensors.
#[derive(Serialize)]
struct BackboneShape {
    layers: usize,
    hidden: usize,
    heads: usize,
    ffn_dim: usize,
    vocab_size: usize,
    max_len: usize,
    ln_eps: f64,
}

/// 64-bit CRC over the backbone shape and every frozen tensor (name, shape
/// and bytes) in name order.
pub fn backbone_fingerprint<T: Scalar>(params: &ParameterStore<T>, config: &ModelConfig) -> u64 {
    let shape = BackboneShape {
        layers: config.layers,
        hidden: config.hidden,
        heads: config.heads,
        ffn_dim: config.ffn_dim,
        vocab_size: config.vocab_size,
        max_len: config.max_len,
        ln_eps: config.ln_eps,
    };
    let mut digest = CRC64.digest();
    digest.update(&serde_json::to_vec(&shape).expect("plain struct serializes"));
    digest.update(&[T::DTYPE.tag()]);
    for (name, p) in params.iter().filter(|(_, p)| p.group == Group::Frozen) {
        digest.update(name.as_bytes());
        digest.update(&[0]);
        for &d in p.tensor.shape() {
            digest.update(&(d as u64).to_le_bytes());
        }
        digest.update(&p.tensor.to_le_bytes());
    }
    digest.finalize()
}

/// Serializes `params` to bytes. Bundle scopes drop the frozen group and
/// fail if no adapter tensors are present.
pub fn encode_checkpoint<T: Scalar>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    vocab: Option<&Vocab>,
    scope: CheckpointScope,
) -> Result<Vec<u8>> {
    if scope.is_bundle() && params.names_in(Group::Adapter).next().is_none() {
        return Err(Error::Checkpoint(
            "adapter-only checkpoint requested but the model has no adapter tensors".into(),
        ));
    }
    let header = Header {
        config: config.clone(),
        vocab: vocab.cloned(),
        fingerprint: backbone_fingerprint(params, config),
    };
    let header = serde_json::to_vec(&header)?;
    let kept: Vec<_> = params
        .iter()
        .filter(|(_, p)| scope.includes(p.group))
        .collect();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(scope.tag());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(kept.len() as u32).to_le_bytes());
    for (name, p) in kept {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.group.tag());
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.tensor.to_le_bytes());
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_values<T: Scalar>(payload: &[u8], dtype: DType) -> Vec<T> {
    let step = dtype.size();
    let chunks = payload.chunks_exact(step);
    if dtype == T::DTYPE {
        return chunks.map(T::read_le).collect();
    }
    match dtype {
        DType::F32 => chunks
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => chunks.map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
    }
}

/// Parses checkpoint bytes, converting tensors to `T` if they were stored in
/// the other precision.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 8 + 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(crc.try_into().unwrap());
    let actual = CRC64.checksum(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let scope_tag = r.u8()?;
    let scope = CheckpointScope::from_tag(scope_tag)
        .ok_or_else(|| Error::Checkpoint(format!("unknown scope tag {scope_tag}")))?;
    let dtype_tag = r.u8()?;
    let dtype = DType::from_tag(dtype_tag)
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {dtype_tag}")))?;
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;
    header.config.validate()?;
    let count = r.u32()?;
    let mut params = ParameterStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let group_tag = r.u8()?;
        let group = Group::from_tag(group_tag).ok_or_else(|| {
            Error::Checkpoint(format!("unknown group tag {group_tag} on `{name}`"))
        })?;
        if !scope.includes(group) {
            return Err(Error::Checkpoint(format!(
                "{scope:?} checkpoint contains {group} tensor `{name}`"
            )));
        }
        let rank = r.u8()? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?)
                .map_err(|_| Error::Checkpoint(format!("dimension overflow in `{name}`")))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("dimension overflow in `{name}`")))?;
            shape.push(d);
        }
        let payload_len = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Checkpoint(format!("dimension overflow in `{name}`")))?;
        let data = read_values::<T>(r.take(payload_len)?, dtype);
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data)?, group);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor table",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config: header.config,
        vocab: header.vocab,
        scope,
        fingerprint: header.fingerprint,
        params,
    })
}

/// Writes a checkpoint and returns its size in bytes.
pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    params: &ParameterStore<T>,
    config: &ModelConfig,
    vocab: Option<&Vocab>,
    scope: CheckpointScope,
) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, config, vocab, scope)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Applies a bundle to a backbone: the backbone's tensors are kept except
/// where the bundle provides a replacement. The backbone's frozen tensors
/// must hash to the fingerprint recorded in the bundle.
pub fn apply_adapter_bundle<T: Scalar>(
    bundle: &Checkpoint<T>,
    backbone: &ParameterStore<T>,
) -> Result<ParameterStore<T>> {
    if !bundle.scope.is_bundle() {
        return Err(Error::Checkpoint(
            "expected an adapter bundle, got a full checkpoint".into(),
        ));
    }
    for group in [Group::Adapter, Group::TaskHead] {
        if bundle.params.names_in(group).next().is_none() {
            return Err(Error::Checkpoint(format!("bundle has no {group} tensors")));
        }
    }
    let actual = backbone_fingerprint(backbone, &bundle.config);
    if actual != bundle.fingerprint {
        return Err(Error::Fingerprint {
            expected: bundle.fingerprint,
            actual,
        });
    }
    let mut out = backbone.clone();
    for (name, p) in backbone.iter() {
        if bundle.scope.includes(p.group)
            && p.group != Group::MlmHead
            && !bundle.params.contains(name)
        {
            return Err(Error::Checkpoint(format!(
                "backbone has {} tensor `{name}` that the bundle does not replace",
                p.group
            )));
        }
    }
    for (name, p) in bundle.params.iter() {
        out.insert(name, p.tensor.clone(), p.group);
    }
    Ok(out)
}

/// Loads a bundle from disk and applies it to `backbone`.
pub fn load_adapter_bundle<T: Scalar>(
    path: impl AsRef<Path>,
    backbone: &ParameterStore<T>,
) -> Result<Checkpoint<T>> {
    let mut bundle = load_checkpoint::<T>(path)?;
    bundle.params = apply_adapter_bundle(&bundle, backbone)?;
    bundle.scope = CheckpointScope::Full;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            adapter_dim: 2,
            vocab_size: 20,
            max_len: 6,
            n_classes: 2,
            adapters_enabled: true,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn full_round_trip_is_bitwise() {
        let cfg = tiny();
        let p = init_model::<f32>(&cfg, 3).unwrap();
        let bytes = encode_checkpoint(&p, &cfg, None, CheckpointScope::Full).unwrap();
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        assert!(back.params.bit_eq(&p));
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn corrupted_byte_is_rejected() {
        let cfg = tiny();
        let p = init_model::<f32>(&cfg, 3).unwrap();
        let mut bytes = encode_checkpoint(&p, &cfg, None, CheckpointScope::Full).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn bundle_needs_matching_backbone() {
        let cfg = tiny();
        let p = init_model::<f64>(&cfg, 3).unwrap();
        let bytes = encode_checkpoint(&p, &cfg, None, CheckpointScope::AdapterWithMlmHead).unwrap();
        let bundle = decode_checkpoint::<f64>(&bytes).unwrap();
        assert!(bundle.params.names_in(Group::Frozen).next().is_none());
        let merged = apply_adapter_bundle(&bundle, &p).unwrap();
        assert!(merged.bit_eq(&p));
        let small = encode_checkpoint(&p, &cfg, None, CheckpointScope::AdapterOnly).unwrap();
        let small = decode_checkpoint::<f64>(&small).unwrap();
        assert!(small.params.names_in(Group::MlmHead).next().is_none());
        assert!(apply_adapter_bundle(&small, &p).unwrap().bit_eq(&p));
        let other = init_model::<f64>(&cfg, 4).unwrap();
        assert!(matches!(
            apply_adapter_bundle(&bundle, &other),
            Err(Error::Fingerprint { .. })
        ));
    }

    #[test]
    fn adapter_only_without_adapters_fails() {
        let mut cfg = tiny();
        cfg.adapters_enabled = false;
        let p = init_model::<f32>(&cfg, 1).unwrap();
        assert!(encode_checkpoint(&p, &cfg, None, CheckpointScope::AdapterOnly).is_err());
    }
}
