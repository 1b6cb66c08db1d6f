//! Named parameter storage and initializers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::archive::Archive;
use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{FssError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Places every parameter on `graph` as a trainable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound { graph, vars: self.tensors.iter().map(|t| graph.leaf(t.clone())).collect() }
    }

    pub fn write_to(&self, archive: &mut Archive) {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            archive.insert(name, t);
        }
    }

    /// Overwrites every parameter from `archive`; names and shapes must match.
    pub fn read_from(&mut self, archive: &Archive) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let loaded: Tensor<T> = archive.get(name)?;
            if loaded.shape() != t.shape() {
                return Err(FssError::Checkpoint(format!(
                    "{name}: archive shape {:?} differs from model shape {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(())
    }
}

/// Parameters bound to one graph.
pub struct Bound<'g, T: Scalar> {
    graph: &'g Graph<T>,
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    /// Gradient for every parameter, zeros where nothing flowed.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// He-normal initialization for a layer with `fan_in` inputs.
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Convolution weight, bias.
pub fn conv_params<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    rng: &mut impl Rng,
) -> (ParamId, ParamId) {
    let w = store.add(format!("{prefix}.weight"), he_normal(&[out_ch, in_ch, k, k], in_ch * k * k, rng));
    let b = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]));
    (w, b)
}

/// Linear weight `[out, in]`, bias.
pub fn linear_params<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
    rng: &mut impl Rng,
) -> (ParamId, ParamId) {
    let w = store.add(format!("{prefix}.weight"), normal(&[out_dim, in_dim], (1.0 / in_dim as f64).sqrt(), rng));
    let b = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]));
    (w, b)
}

/// Affine normalization scale (ones) and shift (zeros).
pub fn norm_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{prefix}.gamma"), Tensor::ones(&[dim]));
    let b = store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
    (g, b)
}

/// Applies a `[out, in]` linear map to every spatial position of a `[in, h, w]` map.
pub fn pointwise<'g, T: Scalar>(x: Var<'g, T>, weight: Var<'g, T>, bias: Var<'g, T>) -> Var<'g, T> {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let out = weight.value().shape()[0];
    x.reshape(&[c, h * w])
        .permute(&[1, 0])
        .linear(weight, Some(bias))
        .permute(&[1, 0])
        .reshape(&[out, h, w])
}
