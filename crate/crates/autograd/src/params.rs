use std::collections::BTreeMap;

use crate::{Gradients, Graph, Scalar, Tensor, Var};

/// Named trainable parameters plus named non-trainable buffers
/// (e.g. batch-norm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

/// Graph handles for every parameter of a [`ParamStore`], as bound into one [`Graph`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics on an unknown name: layer paths are fixed by the model definition.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Insert every parameter into `g`, as differentiable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Collect gradients for every bound parameter; parameters the loss does
    /// not depend on get zero gradients.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(k, t)| {
                let g = bound
                    .vars
                    .get(k)
                    .and_then(|&v| grads.get(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (k.clone(), g)
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .chain(&self.buffers)
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }

    /// Bitwise equality of all tensors.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        fn same<T: Scalar>(a: &BTreeMap<String, Tensor<T>>, b: &BTreeMap<String, Tensor<T>>) -> bool {
            a.len() == b.len()
                && a.iter().zip(b).all(|((ka, ta), (kb, tb))| {
                    ka == kb
                        && ta.shape() == tb.shape()
                        && ta
                            .data()
                            .iter()
                            .zip(tb.data())
                            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
                })
        }
        same(&self.params, &other.params) && same(&self.buffers, &other.buffers)
    }
}
