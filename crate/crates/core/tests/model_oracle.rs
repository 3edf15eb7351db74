//! The encoder, heads, and losses recomputed with plain loops over nested
//! vectors and compared with the tape implementation.

use adauda::autodiff::Tape;
use adauda::model::{
    class_logits, encode, hidden_states, init_model, mlm_logits, Binder, Group, GroupSet,
    ModelConfig, ParameterStore, TokenBatch,
};

type Mat = Vec<Vec<f64>>;

fn config(adapters: bool) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 12,
        heads: 3,
        ffn_dim: 20,
        adapter_dim: 4,
        vocab_size: 30,
        max_len: 8,
        n_classes: 3,
        adapters_enabled: adapters,
        dropout: 0.0,
        ln_eps: 1e-5,
    }
}

fn mat(p: &ParameterStore<f64>, name: &str) -> Mat {
    let t = p.tensor(name).unwrap();
    let cols = t.shape()[1];
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

fn vec_of(p: &ParameterStore<f64>, name: &str) -> Vec<f64> {
    p.tensor(name).unwrap().data().to_vec()
}

fn linear(x: &[f64], p: &ParameterStore<f64>, name: &str) -> Vec<f64> {
    let w = mat(p, &format!("{name}.weight"));
    let b = vec_of(p, &format!("{name}.bias"));
    (0..b.len())
        .map(|j| b[j] + x.iter().zip(&w).map(|(xi, row)| xi * row[j]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm(x: &[f64], p: &ParameterStore<f64>, name: &str, eps: f64) -> Vec<f64> {
    let g = vec_of(p, &format!("{name}.gamma"));
    let b = vec_of(p, &format!("{name}.beta"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| g[i] * (v - mean) / (var + eps).sqrt() + b[i])
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Final-layer states of one sequence, `[T][H]`.
fn oracle_encode(p: &ParameterStore<f64>, c: &ModelConfig, ids: &[usize]) -> Mat {
    let tok = mat(p, "embed.tokens");
    let pos = mat(p, "embed.positions");
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| add(&tok[id], &pos[t]))
        .collect();
    let d = c.hidden / c.heads;
    for l in 0..c.layers {
        let pre = format!("layers.{l}");
        let q: Mat = x
            .iter()
            .map(|r| linear(r, p, &format!("{pre}.attn.q")))
            .collect();
        let k: Mat = x
            .iter()
            .map(|r| linear(r, p, &format!("{pre}.attn.k")))
            .collect();
        let v: Mat = x
            .iter()
            .map(|r| linear(r, p, &format!("{pre}.attn.v")))
            .collect();
        let mut ctx = vec![vec![0.0; c.hidden]; ids.len()];
        for h in 0..c.heads {
            let span = h * d..(h + 1) * d;
            for i in 0..ids.len() {
                let scores: Vec<Option<f64>> = (0..ids.len())
                    .map(|j| {
                        (ids[j] != 0).then(|| {
                            span.clone().map(|e| q[i][e] * k[j][e]).sum::<f64>() / (d as f64).sqrt()
                        })
                    })
                    .collect();
                let max = scores
                    .iter()
                    .flatten()
                    .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    if let Some(s) = s {
                        let w = (s - max).exp() / z;
                        for e in span.clone() {
                            ctx[i][e] += w * v[j][e];
                        }
                    }
                }
            }
        }
        for t in 0..ids.len() {
            let attn = linear(&ctx[t], p, &format!("{pre}.attn.o"));
            let h1 = layer_norm(&add(&x[t], &attn), p, &format!("{pre}.ln1"), c.ln_eps);
            let ff: Vec<f64> = linear(&h1, p, &format!("{pre}.ffn.in"))
                .into_iter()
                .map(gelu)
                .collect();
            let ff = linear(&ff, p, &format!("{pre}.ffn.out"));
            let mut out = layer_norm(&add(&h1, &ff), p, &format!("{pre}.ln2"), c.ln_eps);
            if c.adapters_enabled {
                let a: Vec<f64> = linear(&out, p, &format!("{pre}.adapter.down"))
                    .into_iter()
                    .map(gelu)
                    .collect();
                out = add(&out, &linear(&a, p, &format!("{pre}.adapter.up")));
            }
            x[t] = out;
        }
    }
    x
}

fn oracle_cls(p: &ParameterStore<f64>, first: &[f64]) -> Vec<f64> {
    let pooled: Vec<f64> = linear(first, p, "cls.pooler")
        .into_iter()
        .map(f64::tanh)
        .collect();
    linear(&pooled, p, "cls.out")
}

fn oracle_mlm(p: &ParameterStore<f64>, c: &ModelConfig, h: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = linear(h, p, "mlm.dense").into_iter().map(gelu).collect();
    linear(&layer_norm(&d, p, "mlm.ln", c.ln_eps), p, "mlm.decoder")
}

fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Parameters with every group perturbed away from its initialization, so
/// zero-initialized adapters and unit gains are exercised too.
fn perturbed(c: &ModelConfig, seed: u64) -> ParameterStore<f64> {
    let mut p = init_model::<f64>(c, seed).unwrap();
    let names: Vec<String> = p.iter().map(|(n, _)| n.to_string()).collect();
    for (k, n) in names.iter().enumerate() {
        for (i, v) in p
            .get_mut(n)
            .unwrap()
            .tensor
            .data_mut()
            .iter_mut()
            .enumerate()
        {
            *v += 0.1 * (((i * 31 + k * 17) % 13) as f64 / 6.0 - 1.0);
        }
    }
    p
}

fn batch() -> TokenBatch {
    TokenBatch::new(
        vec![
            3, 7, 12, 29, 5, 0, 0, 3, 4, 9, 9, 22, 18, 6, 3, 10, 0, 0, 0, 0, 0,
        ],
        3,
        7,
    )
    .unwrap()
}

fn assert_close(a: f64, b: f64, what: &str) {
    assert!(
        (a - b).abs() <= 1e-10 * (1.0 + b.abs()),
        "{what}: {a} vs {b}"
    );
}

#[test]
fn encoder_matches_loop_oracle() {
    for adapters in [false, true] {
        let c = config(adapters);
        let p = perturbed(&c, 11);
        let b = batch();
        let hidden = hidden_states(&p, &c, &b).unwrap();
        for r in 0..b.batch {
            let ids = &b.ids[r * b.seq..(r + 1) * b.seq];
            let expect = oracle_encode(&p, &c, ids);
            for (t, row) in expect.iter().enumerate() {
                for (e, &v) in row.iter().enumerate() {
                    let got = hidden.data()[(r * b.seq + t) * c.hidden + e];
                    assert_close(got, v, &format!("row {r} pos {t} dim {e}"));
                }
            }
        }
    }
}

#[test]
fn heads_and_losses_match_loop_oracle() {
    let c = config(true);
    let p = perturbed(&c, 5);
    let b = batch();
    let logits = class_logits(&p, &c, &b).unwrap();
    let labels = [0, 2, 1];
    let mut ce = 0.0;
    for r in 0..b.batch {
        let states = oracle_encode(&p, &c, &b.ids[r * b.seq..(r + 1) * b.seq]);
        let expect = oracle_cls(&p, &states[0]);
        for (k, &v) in expect.iter().enumerate() {
            assert_close(logits.data()[r * c.n_classes + k], v, "class logit");
        }
        ce += cross_entropy(&expect, labels[r]) / b.batch as f64;
    }

    let tape = Tape::new();
    let binder = Binder::new(&tape, &p, GroupSet::none());
    let out = encode(&binder, &c, &b).unwrap();
    let positions = [1, 3, 9, 15];
    let targets = [4, 25, 7, 13];
    let rows = out.hidden.gather_rows(&positions).unwrap();
    let mlm = mlm_logits(&binder, &c, rows).unwrap();
    let mlm_loss = mlm.cross_entropy(&targets, None).unwrap().value().data()[0];
    let mut expect_loss = 0.0;
    for (i, &flat) in positions.iter().enumerate() {
        let (r, t) = (flat / b.seq, flat % b.seq);
        let states = oracle_encode(&p, &c, &b.ids[r * b.seq..(r + 1) * b.seq]);
        let expect = oracle_mlm(&p, &c, &states[t]);
        for (k, &v) in expect.iter().enumerate() {
            assert_close(mlm.value().data()[i * c.vocab_size + k], v, "mlm logit");
        }
        expect_loss += cross_entropy(&expect, targets[i]) / positions.len() as f64;
    }
    assert_close(mlm_loss, expect_loss, "mlm loss");

    let tape = Tape::new();
    let binder = Binder::new(&tape, &p, GroupSet::none());
    let out = encode(&binder, &c, &b).unwrap();
    let task = adauda::model::cls_logits(&binder, out.hidden).unwrap();
    let task_loss = task.cross_entropy(&labels, None).unwrap().value().data()[0];
    assert_close(task_loss, ce, "task loss");
}

#[test]
fn padding_does_not_leak_into_real_positions() {
    let c = config(true);
    let p = perturbed(&c, 2);
    let short = TokenBatch::new(vec![3, 8, 9], 1, 3).unwrap();
    let padded = TokenBatch::new(vec![3, 8, 9, 0, 0], 1, 5).unwrap();
    let a = hidden_states(&p, &c, &short).unwrap();
    let b = hidden_states(&p, &c, &padded).unwrap();
    for (x, y) in a.data().iter().zip(&b.data()[..a.numel()]) {
        assert_close(*x, *y, "padded prefix");
    }
    assert!(p.names_in(Group::Adapter).count() == 8);
}
