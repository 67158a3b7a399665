//! Named parameter storage and its binding onto a tape.

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// `None` until a backward pass populates it; cleared by the optimizer.
    pub grad: Option<Vec<f64>>,
}

/// Parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Param { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Puts every parameter on `tape`; those rejected by `trainable` become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (name, p) in &self.params {
            let v = if trainable(name) {
                tape.param(p.value.clone())?
            } else {
                tape.constant(p.value.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Adds the tape's leaf gradients into the stored gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (name, var) in &bound.vars {
            if !tape.is_tracked(*var) {
                continue;
            }
            let p = self.params.get_mut(name).expect("bound from this store");
            // a tracked parameter the loss never touched has zero gradient
            let g = tape
                .grad(*var)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.value.len()]);
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                None => p.grad = Some(g),
            }
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter {name} is not bound")))
    }
}
