use std::collections::BTreeMap;

use crate::{ParamStore, Scalar, Tensor};

/// SGD with heavy-ball momentum: `v <- mu * v + g; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    momentum: T,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum: T::from_f64(momentum),
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) {
        let lr = T::from_f64(lr);
        for (name, g) in grads {
            let Some(p) = store.param_mut(name) else {
                continue;
            };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = T::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * k;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_joint_norm_and_keeps_direction() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::<f64>::new([1], vec![3.0]));
        g.insert("b".to_string(), Tensor::<f64>::new([1], vec![4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-12);
        assert!((g["b"].data()[0] - 0.8).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 10.0), 1.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-12);
    }
}
