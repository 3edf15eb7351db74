use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{GroupSet, ParameterStore};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment accumulators for the tensors one phase trains.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Names of tensors that have moment accumulators.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let factor = T::from_f64_lossy(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        }
    }
    norm
}

/// One bias-corrected Adam update of every tensor in `grads`.
///
/// A gradient for a tensor whose group is not in `trainable` is a freezing
/// violation and aborts the step before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut ParameterStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    trainable: GroupSet,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Data(format!("gradient for unknown parameter `{name}`")))?;
        if !trainable.contains(p.group) {
            return Err(Error::Freezing(name.clone()));
        }
        if p.tensor.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for `{name}` of shape {:?}",
                g.shape(),
                p.tensor.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::from_f64_lossy(1.0 - state.beta1);
    let c2 = T::from_f64_lossy(1.0 - state.beta2);
    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let bc1 = T::from_f64_lossy(1.0 - state.beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - state.beta2.powi(t));
    let eps = T::from_f64_lossy(state.eps);
    let lr = T::from_f64_lossy(lr);
    for (name, g) in grads {
        let param = params.get_mut(name).expect("checked above");
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
        let theta = param.tensor.data_mut();
        for i in 0..theta.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + c1 * gi;
            v[i] = b2 * v[i] + c2 * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Group;

    fn store(v: f64) -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::from_f64(&[1], &[v]).unwrap(), Group::Adapter);
        s.insert(
            "frozen",
            Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(),
            Group::Frozen,
        );
        s
    }

    fn grads(v: f64) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("w".to_string(), Tensor::from_f64(&[1], &[v]).unwrap())])
    }

    #[test]
    fn defaults() {
        let s = AdamState::<f32>::new();
        assert_eq!((s.beta1, s.beta2, s.eps), (0.9, 0.999, 1e-8));
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn zero_gradient_leaves_params_bitwise() {
        let mut p = store(0.37);
        let before = p.clone();
        let mut s = AdamState::new();
        adam_step(
            &mut p,
            &grads(0.0),
            &mut s,
            1e-3,
            GroupSet::of(&[Group::Adapter]),
        )
        .unwrap();
        assert!(p.bit_eq(&before));
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(0.0);
        let mut s = AdamState::new();
        adam_step(
            &mut p,
            &grads(1.0),
            &mut s,
            5e-5,
            GroupSet::of(&[Group::Adapter]),
        )
        .unwrap();
        let theta = p.tensor("w").unwrap().data()[0];
        assert_eq!(theta, -5e-5f32);
    }

    #[test]
    fn frozen_gradient_is_a_hard_error() {
        let mut p = store(0.0);
        let before = p.clone();
        let mut s = AdamState::new();
        let mut g = grads(1.0);
        g.insert(
            "frozen".into(),
            Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap(),
        );
        let err = adam_step(&mut p, &g, &mut s, 1e-3, GroupSet::of(&[Group::Adapter]));
        assert!(matches!(err, Err(Error::Freezing(ref n)) if n == "frozen"));
        assert!(p.bit_eq(&before));
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::from([(
            "a".to_string(),
            Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap(),
        )]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
