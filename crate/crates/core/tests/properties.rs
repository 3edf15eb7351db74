//! Invariants of the data, analysis, optimization, and persistence layers
//! over randomized inputs.

use std::collections::BTreeMap;

use adauda::analysis::{domain_similarity, welch_t_test};
use adauda::data::{
    build_vocab, mask_for_mlm, mix_domains, split_train_dev, Corpus, Corruption, TextCorpus,
    BOS_ID, MASK_ID, N_RESERVED, PAD_ID,
};
use adauda::model::{init_model, Group, GroupSet, ModelConfig, ParameterStore, TokenBatch};
use adauda::persistence::{decode_checkpoint, encode_checkpoint, CheckpointScope};
use adauda::training::{adam_step, AdamState, Schedule};
use adauda::Tensor;
use proptest::prelude::*;

fn token_batch() -> impl Strategy<Value = (TokenBatch, usize)> {
    (1usize..4, 2usize..12, 6usize..40).prop_flat_map(|(b, s, v)| {
        proptest::collection::vec(0usize..v, b * s)
            .prop_map(move |ids| (TokenBatch::new(ids, b, s).unwrap(), v))
    })
}

fn words() -> impl Strategy<Value = String> {
    proptest::collection::vec("[a-f]{1,2}", 1..20).prop_map(|w| w.join(" "))
}

fn text_corpus(name: &'static str) -> impl Strategy<Value = TextCorpus> {
    proptest::collection::vec(words(), 1..6).prop_map(move |d| Corpus::unlabeled(name, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masking_respects_its_contract((batch, vocab) in token_batch(), p in 0.0f64..1.0, seed in any::<u64>()) {
        let m = mask_for_mlm(&batch, p, vocab, seed).unwrap();
        prop_assert_eq!(&m.targets, &batch.ids);
        prop_assert_eq!(&m, &mask_for_mlm(&batch, p, vocab, seed).unwrap());
        for i in 0..batch.ids.len() {
            let orig = batch.ids[i];
            let got = m.input.ids[i];
            match m.corruption[i] {
                None => {
                    prop_assert!(!m.loss_mask[i]);
                    prop_assert_eq!(got, orig);
                }
                Some(kind) => {
                    prop_assert!(m.loss_mask[i]);
                    prop_assert!(orig != PAD_ID && orig != BOS_ID);
                    match kind {
                        Corruption::Mask => prop_assert_eq!(got, MASK_ID),
                        Corruption::Random => prop_assert!((N_RESERVED..vocab).contains(&got)),
                        Corruption::Keep => prop_assert_eq!(got, orig),
                    }
                }
            }
        }
    }

    #[test]
    fn similarity_is_a_symmetric_overlap(a in text_corpus("a"), b in text_corpus("b"), k in 1usize..30) {
        let ab = domain_similarity(&a, &b, k).unwrap();
        let ba = domain_similarity(&b, &a, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(domain_similarity(&a, &a, k).unwrap(), 1.0);
    }

    #[test]
    fn welch_is_antisymmetric_and_shift_invariant(
        a in proptest::collection::vec(-5.0f64..5.0, 2..10),
        b in proptest::collection::vec(-5.0f64..5.0, 2..10),
        shift in -3.0f64..3.0,
    ) {
        let ab = welch_t_test(&a, &b).unwrap();
        let ba = welch_t_test(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab.p));
        if ab.t.is_finite() {
            prop_assert!((ab.t + ba.t).abs() < 1e-9);
            prop_assert!((ab.p - ba.p).abs() < 1e-9);
            let sa: Vec<f64> = a.iter().map(|x| x + shift).collect();
            let sb: Vec<f64> = b.iter().map(|x| x + shift).collect();
            let shifted = welch_t_test(&sa, &sb).unwrap();
            prop_assert!((shifted.t - ab.t).abs() < 1e-6 * (1.0 + ab.t.abs()));
        }
    }

    #[test]
    fn schedule_rises_then_falls(peak in 1e-6f64..1.0, warmup in 1usize..50, extra in 0usize..200) {
        let total = warmup + extra;
        let s = Schedule::new(peak, warmup, total).unwrap();
        let lrs: Vec<f64> = (0..=total).map(|t| s.lr_at(t).unwrap()).collect();
        prop_assert_eq!(lrs[0], 0.0);
        prop_assert_eq!(lrs[warmup], peak);
        prop_assert_eq!(lrs[total], if extra == 0 { peak } else { 0.0 });
        prop_assert!(lrs.iter().all(|&lr| (0.0..=peak).contains(&lr)));
        prop_assert!(lrs[..=warmup].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[warmup..].windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.lr_at(total + 1).is_err());
    }

    #[test]
    fn first_adam_step_moves_at_most_lr(g in proptest::collection::vec(-10.0f64..10.0, 1..8), lr in 1e-5f64..1e-1) {
        let mut params = ParameterStore::<f64>::new();
        let init = vec![0.5; g.len()];
        params.insert("w", Tensor::from_f64(&[g.len()], &init).unwrap(), Group::Adapter);
        params.insert("f", Tensor::from_f64(&[1], &[1.0]).unwrap(), Group::Frozen);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_f64(&[g.len()], &g).unwrap())]);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, lr, GroupSet::of(&[Group::Adapter])).unwrap();
        for (i, &after) in params.tensor("w").unwrap().data().iter().enumerate() {
            let step = 0.5 - after;
            prop_assert!(step.abs() <= lr * (1.0 + 1e-12));
            prop_assert!(step * g[i] >= 0.0);
        }
        prop_assert_eq!(params.tensor("f").unwrap().data(), &[1.0][..]);
    }

    #[test]
    fn frozen_gradients_abort_adam(g in -1.0f64..1.0) {
        let mut params = ParameterStore::<f64>::new();
        params.insert("f", Tensor::from_f64(&[1], &[1.0]).unwrap(), Group::Frozen);
        let before = params.clone();
        let grads = BTreeMap::from([("f".to_string(), Tensor::from_f64(&[1], &[g]).unwrap())]);
        let res = adam_step(&mut params, &grads, &mut AdamState::new(), 1e-3, GroupSet::of(&[Group::Adapter]));
        prop_assert!(res.is_err());
        prop_assert_eq!(params, before);
    }

    #[test]
    fn vocabulary_round_trips_known_words(docs in proptest::collection::vec(words(), 1..5)) {
        let v = build_vocab(docs.iter().map(String::as_str), 1000).unwrap();
        for d in &docs {
            let ids = v.encode(d);
            prop_assert!(ids.iter().all(|&id| id >= N_RESERVED));
            prop_assert_eq!(v.decode(&ids), d.split_whitespace().collect::<Vec<_>>().join(" "));
        }
        let json = serde_json::to_string(&v).unwrap();
        prop_assert_eq!(serde_json::from_str::<adauda::data::Vocab>(&json).unwrap(), v);
    }

    #[test]
    fn split_partitions_and_stratifies(labels in proptest::collection::vec(0usize..3, 2..60), ratio in 0.1f64..0.9, seed in any::<u64>()) {
        let docs: Vec<usize> = (0..labels.len()).collect();
        let c = Corpus::labeled("d", docs, labels.clone()).unwrap();
        let (train, dev) = split_train_dev(&c, ratio, seed).unwrap();
        prop_assert_eq!(train.len(), (labels.len() as f64 * ratio).round() as usize);
        let mut all: Vec<usize> = train.documents.iter().chain(&dev.documents).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for (docs, labs) in [(&train.documents, train.labels.as_ref().unwrap()), (&dev.documents, dev.labels.as_ref().unwrap())] {
            for (d, l) in docs.iter().zip(labs) {
                prop_assert_eq!(labels[*d], *l);
            }
        }
        let mut counts = [0usize; 3];
        labels.iter().for_each(|&l| counts[l] += 1);
        if counts.iter().all(|&n| n == 0 || n >= 2) {
            for k in 0..3 {
                let got = train.labels.as_ref().unwrap().iter().filter(|&&l| l == k).count() as f64;
                prop_assert!((got - counts[k] as f64 * ratio).abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn mixing_keeps_every_document(a in proptest::collection::vec(0u32..100, 0..20), b in proptest::collection::vec(0u32..100, 0..20), seed in any::<u64>()) {
        let s = Corpus::unlabeled("s", a.clone());
        let t = Corpus::unlabeled("t", b.clone());
        let mixed = mix_domains(&s, &[&t], seed);
        let mut got = mixed.documents.clone();
        got.sort_unstable();
        let mut want: Vec<u32> = a.into_iter().chain(b).collect();
        want.sort_unstable();
        prop_assert_eq!(got, want);
        prop_assert!(mixed.labels.is_none());
        prop_assert_eq!(mixed.domain_id, "s+t");
    }
}

fn tiny_config(adapter_dim: usize, n_classes: usize) -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        ffn_dim: 12,
        adapter_dim,
        vocab_size: 15,
        max_len: 6,
        n_classes,
        adapters_enabled: true,
        dropout: 0.0,
        ln_eps: 1e-5,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bitwise(seed in any::<u64>(), m in 1usize..5, classes in 2usize..4, double in any::<bool>()) {
        let c = tiny_config(m, classes);
        if double {
            let p = init_model::<f64>(&c, seed).unwrap();
            let back = decode_checkpoint::<f64>(&encode_checkpoint(&p, &c, None, CheckpointScope::Full).unwrap()).unwrap();
            prop_assert_eq!(back.params, p);
            prop_assert_eq!(back.config, c);
        } else {
            let p = init_model::<f32>(&c, seed).unwrap();
            let bytes = encode_checkpoint(&p, &c, None, CheckpointScope::Full).unwrap();
            let back = decode_checkpoint::<f32>(&bytes).unwrap();
            prop_assert_eq!(back.params, p);
            let mut corrupt = bytes.clone();
            let mid = corrupt.len() / 2;
            corrupt[mid] ^= 0x10;
            prop_assert!(decode_checkpoint::<f32>(&corrupt).is_err());
        }
    }

    #[test]
    fn bundles_hold_only_adapters_and_task_head(seed in any::<u64>()) {
        let c = tiny_config(3, 2);
        let p = init_model::<f32>(&c, seed).unwrap();
        let bytes = encode_checkpoint(&p, &c, None, CheckpointScope::AdapterOnly).unwrap();
        let b = decode_checkpoint::<f32>(&bytes).unwrap();
        prop_assert!(b.params.iter().all(|(_, q)| matches!(q.group, Group::Adapter | Group::TaskHead)));
        let merged = adauda::persistence::apply_adapter_bundle(&b, &p).unwrap();
        prop_assert_eq!(merged, p);
    }
}
