//! Ordered, uniquely named collections of trainable arrays.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(name, "no such parameter"))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut out = self.clone();
        for t in &mut out.tensors {
            *t = Tensor::zeros(t.shape());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Puts every array on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Puts every array on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Tape handles for a bound [`ParamSet`], same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::config(name, "no such parameter"))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter, zeros where none flowed.
    pub fn gradients(&self, grads: &Gradients, params: &ParamSet) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect()
    }
}

/// Registers parameters with deterministic seeded initialization.
pub struct ParamBuilder<'a> {
    set: ParamSet,
    rng: &'a mut Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(rng: &'a mut Rng) -> Self {
        Self {
            set: ParamSet::new(),
            rng,
        }
    }

    /// Normal entries with standard deviation `gain / sqrt(fan_in)`.
    pub fn normal(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<()> {
        if fan_in == 0 {
            return Err(Error::config(name, format!("zero fan-in for shape {:?}", shape)));
        }
        let std = gain / libm::sqrt(fan_in as f64);
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.normal() * std);
        self.set.insert(name, t).map(|_| ())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.set.insert(name, Tensor::full(shape, value)).map(|_| ())
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut set = ParamSet::new();
        set.insert("b", Tensor::zeros(&[2])).unwrap();
        set.insert("a", Tensor::zeros(&[3])).unwrap();
        assert!(set.insert("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(set.names(), ["b", "a"]);
        assert_eq!(set.numel(), 5);
        assert_eq!(set.id("a").unwrap(), 1);
        assert!(matches!(set.get("zz"), Err(Error::Config { .. })));
    }

    #[test]
    fn builder_is_seeded() {
        let build = || {
            let mut rng = Rng::seed_from(4);
            let mut b = ParamBuilder::new(&mut rng);
            b.normal("w", &[4, 4], 4, 1.0).unwrap();
            b.constant("g", &[4], 1.0).unwrap();
            b.finish()
        };
        assert_eq!(build(), build());
        assert_eq!(build().get("g").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn bound_gradients_follow_set_order() {
        let mut set = ParamSet::new();
        set.insert("x", Tensor::new(&[2], alloc::vec![1.0, 2.0]).unwrap()).unwrap();
        set.insert("unused", Tensor::zeros(&[1])).unwrap();
        let mut g = Graph::new();
        let bound = set.bind(&mut g);
        let x = bound.var("x").unwrap();
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        let all = bound.gradients(&grads, &set);
        assert_eq!(all[0].data(), &[2.0, 4.0]);
        assert_eq!(all[1].data(), &[0.0]);
    }
}
