//! Central-difference gradient checks of whole-model losses, shared by the
//! gradient tests and the acceptance suite.
#![allow(dead_code)]

use adauda::autodiff::{Tape, Var};
use adauda::model::{
    cls_logits, encode, init_model, mlm_logits, Binder, Group, GroupSet, ModelConfig,
    ParameterStore, TokenBatch,
};
use adauda::tensor::Tensor;

/// Step of the five-point stencil; its O(h^4) truncation error and
/// O(eps/h) rounding error are both near 1e-12 for losses of order one.
pub const H: f64 = 1e-3;

pub fn stencil(mut f: impl FnMut(f64) -> f64) -> f64 {
    (8.0 * (f(H) - f(-H)) - (f(2.0 * H) - f(-2.0 * H))) / (12.0 * H)
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps rounding noise on
/// vanishing gradients from dominating.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn model_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 32,
        heads: 4,
        ffn_dim: 48,
        adapter_dim: 8,
        vocab_size: 24,
        max_len: 8,
        n_classes: 2,
        adapters_enabled: true,
        dropout: 0.0,
        ln_eps: 1e-5,
    }
}

/// Random weights everywhere, adapters included, so no gradient vanishes
/// structurally.
pub fn random_model(c: &ModelConfig) -> ParameterStore<f64> {
    let mut p = init_model::<f64>(c, 21).unwrap();
    let names: Vec<String> = p.names_in(Group::Adapter).map(String::from).collect();
    for (k, n) in names.iter().enumerate() {
        for (i, v) in p
            .get_mut(n)
            .unwrap()
            .tensor
            .data_mut()
            .iter_mut()
            .enumerate()
        {
            *v += 0.1 * (((i * 13 + k * 5) % 9) as f64 / 4.0 - 1.0);
        }
    }
    p
}

pub enum Loss {
    Mlm,
    Task,
}

pub fn loss_value<'t>(
    binder: &Binder<'t, '_, f64>,
    c: &ModelConfig,
    batch: &TokenBatch,
    loss: &Loss,
) -> Var<'t, f64> {
    let out = encode(binder, c, batch).unwrap();
    match loss {
        Loss::Mlm => {
            let positions = [1, 2, 6, 8];
            let targets = [5, 17, 9, 23];
            let rows = out.hidden.gather_rows(&positions).unwrap();
            mlm_logits(binder, c, rows)
                .unwrap()
                .cross_entropy(&targets, None)
                .unwrap()
        }
        Loss::Task => cls_logits(binder, out.hidden)
            .unwrap()
            .cross_entropy(&[1, 0], None)
            .unwrap(),
    }
}

/// Worst relative error over every entry of every tensor in `groups`.
pub fn full_model_check(loss: Loss, groups: &[Group]) -> (f64, usize) {
    let c = model_config();
    let p = random_model(&c);
    let batch = TokenBatch::new(vec![3, 4, 9, 11, 20, 3, 7, 15, 6, 0], 2, 5).unwrap();
    let trainable = GroupSet::of(groups);
    let tape = Tape::new();
    let binder = Binder::new(&tape, &p, trainable);
    let l = loss_value(&binder, &c, &batch, &loss);
    let mut grads = tape.backward(l).unwrap();
    let analytic = binder.gradients(&mut grads);
    let eval = |p: &ParameterStore<f64>| {
        let tape = Tape::new();
        let binder = Binder::new(&tape, p, GroupSet::none());
        let v = loss_value(&binder, &c, &batch, &loss).value().data()[0];
        v
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut work = p.clone();
    for (name, param) in p.iter().filter(|(_, q)| trainable.contains(q.group)) {
        let zero = Tensor::zeros(param.tensor.shape());
        let g = analytic.get(name).unwrap_or(&zero);
        for e in 0..param.tensor.numel() {
            let orig = param.tensor.data()[e];
            let numeric = stencil(|d| {
                work.get_mut(name).unwrap().tensor.data_mut()[e] = orig + d;
                eval(&work)
            });
            work.get_mut(name).unwrap().tensor.data_mut()[e] = orig;
            worst = worst.max(rel_err(g.data()[e], numeric, REL_FLOOR));
            checked += 1;
        }
    }
    (worst, checked)
}
