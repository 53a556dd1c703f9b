//! Named weight collection with gradient slots.

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Parameters in insertion order. The order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<S> {
    params: IndexMap<String, Param<S>>,
}

/// The tape handles of every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.into(), Param { value, grad });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter on the tape as a gradient-collecting leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.param(p.value.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Adds the tape's leaf gradients into the gradient slots.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>, bound: &BoundParams) -> Result<()> {
        for (name, var) in bound.iter() {
            let Some(g) = tape.grad(var) else { continue };
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if p.grad.shape() != g.shape() {
                return Err(shape_err!("gradient shape mismatch for {name}"));
            }
            for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn grad_norm(&self) -> S {
        self.params
            .values()
            .flat_map(|p| p.grad.data().iter())
            .map(|&g| g * g)
            .sum::<S>()
            .sqrt()
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}
