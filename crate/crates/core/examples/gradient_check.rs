//! Compares tape gradients of the task loss with central differences on a
//! few entries of every trainable tensor, in double precision.

use adauda::autodiff::Tape;
use adauda::model::{
    cls_logits, encode, init_model, trainable_groups, Binder, Group, GroupSet, ModelConfig,
    ParameterStore, TokenBatch,
};

fn task_loss(
    params: &ParameterStore<f64>,
    config: &ModelConfig,
    batch: &TokenBatch,
    labels: &[usize],
) -> f64 {
    let tape = Tape::new();
    let binder = Binder::new(&tape, params, GroupSet::none());
    let out = encode(&binder, config, batch).unwrap();
    let logits = cls_logits(&binder, out.hidden).unwrap();
    let loss = logits.cross_entropy(labels, None).unwrap();
    let v = loss.value().data()[0];
    v
}

fn main() -> adauda::Result<()> {
    let config = ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn_dim: 24,
        adapter_dim: 4,
        vocab_size: 40,
        max_len: 8,
        n_classes: 2,
        adapters_enabled: true,
        dropout: 0.0,
        ln_eps: 1e-5,
    };
    let mut params = init_model::<f64>(&config, 5)?;
    // move the adapters off their identity initialization
    let names: Vec<String> = params.names_in(Group::Adapter).map(String::from).collect();
    for (k, n) in names.iter().enumerate() {
        for (i, v) in params
            .get_mut(n)
            .unwrap()
            .tensor
            .data_mut()
            .iter_mut()
            .enumerate()
        {
            *v += 0.05 * (((i + 3 * k) % 7) as f64 - 3.0) / 3.0;
        }
    }
    let batch = TokenBatch::new(vec![3, 5, 9, 11, 0, 3, 7, 8, 20, 33], 2, 5)?;
    let labels = [0, 1];

    let tape = Tape::new();
    let binder = Binder::new(
        &tape,
        &params,
        trainable_groups(false, Group::TaskHead, true),
    );
    let out = encode(&binder, &config, &batch)?;
    let loss = cls_logits(&binder, out.hidden)?.cross_entropy(&labels, None)?;
    let mut grads = tape.backward(loss)?;
    let analytic = binder.gradients(&mut grads);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, g) in &analytic {
        let n = g.numel();
        for idx in [0, n / 2, n - 1] {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().tensor.data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().tensor.data_mut()[idx] -= h;
            let numeric = (task_loss(&plus, &config, &batch, &labels)
                - task_loss(&minus, &config, &batch, &labels))
                / (2.0 * h);
            let a = g.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    println!(
        "{} tensors checked, worst relative error {worst:.2e}",
        analytic.len()
    );
    Ok(())
}
