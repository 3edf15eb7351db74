//! Learning-rate schedule values and a single Adam update.

use std::collections::BTreeMap;

use adauda::model::{Group, GroupSet, ParameterStore};
use adauda::tensor::Tensor;
use adauda::training::{adam_step, AdamState, Schedule};

fn main() -> adauda::Result<()> {
    let s = Schedule::new(5e-5, 1000, 10_000)?;
    for step in [0, 500, 1000, 5500, 10_000] {
        println!("lr_at({step:>5}) = {:e}", s.lr_at(step)?);
    }

    let mut params = ParameterStore::<f64>::new();
    params.insert("w", Tensor::zeros(&[1]), Group::Adapter);
    let grads = BTreeMap::from([("w".to_string(), Tensor::full(&[1], 1.0))]);
    let mut state = AdamState::new();
    adam_step(
        &mut params,
        &grads,
        &mut state,
        1e-3,
        GroupSet::of(&[Group::Adapter]),
    )?;
    println!(
        "after one step on g = 1: w = {:e}",
        params.tensor("w")?.data()[0]
    );
    Ok(())
}
