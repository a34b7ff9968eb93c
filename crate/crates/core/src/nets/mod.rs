//! The three networks of the model: a label-conditioned residual generator,
//! a DenseNet-BC classifier and a seven-layer convolutional discriminator.
//!
//! Networks are stateless descriptions; their weights live in a
//! [`NetState`] and are bound into a [`Graph`] for each evaluation. Binding
//! the parameters as constants evaluates the network with gradient flow
//! stopped at its weights.

mod classifier;
mod discriminator;
mod generator;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use classifier::{Classifier, ClassifierSpec};
pub use discriminator::{Discriminator, DiscriminatorSpec, DISCRIMINATOR_CONV_LAYERS};
pub use generator::{Generator, GeneratorSpec, Synthesis};

use crate::autograd::{BatchStats, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{Shape3, Volume};

pub const BN_MOMENTUM: f64 = 0.1;

/// Named real-valued arrays in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
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

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Inserts every array into `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundParams { params: self, vars }
    }

    /// Checks names and shapes against `other`.
    pub fn check_compatible(&self, other: &Params) -> Result<()> {
        if self.names != other.names {
            return Err(Error::SpecMismatch(format!(
                "parameter names differ ({} vs {} arrays)",
                self.names.len(),
                other.names.len()
            )));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::SpecMismatch(format!("{name}: {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }
}

/// Parameters bound into a particular graph.
pub struct BoundParams<'a> {
    params: &'a Params,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn var(&self, name: &str) -> Var {
        match self.params.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetState {
    pub params: Params,
    pub buffers: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Per-call state threaded through a network forward pass.
pub struct Forward<'s> {
    pub mode: Mode,
    buffers: &'s Params,
    stats: Vec<(String, BatchStats)>,
}

impl<'s> Forward<'s> {
    pub fn new(mode: Mode, state: &'s NetState) -> Self {
        Forward {
            mode,
            buffers: &state.buffers,
            stats: Vec::new(),
        }
    }

    /// Batch norm named `name` in the current mode.
    pub(crate) fn batch_norm(&mut self, g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Var {
        let gamma = p.var(&format!("{name}.gamma"));
        let beta = p.var(&format!("{name}.beta"));
        match self.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta);
                self.stats.push((name.to_string(), stats));
                y
            }
            Mode::Eval => {
                let mean = self.buffers.get(&format!("{name}.running_mean")).expect("running mean");
                let var = self.buffers.get(&format!("{name}.running_var")).expect("running var");
                g.batch_norm_eval(x, gamma, beta, mean.data(), var.data())
            }
        }
    }

    /// Batch statistics collected in training mode.
    pub fn into_stats(self) -> Vec<(String, BatchStats)> {
        self.stats
    }
}

/// Folds training-mode batch statistics into the running averages.
pub fn update_running_stats(buffers: &mut Params, stats: &[(String, BatchStats)]) {
    for (name, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let buf = buffers
                .get_mut(&format!("{name}.{suffix}"))
                .unwrap_or_else(|| panic!("missing buffer {name}.{suffix}"));
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

pub(crate) fn push_norm(params: &mut Params, name: &str, channels: usize) {
    params.push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
    params.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
}

pub(crate) fn push_bn_buffers(buffers: &mut Params, name: &str, channels: usize) {
    buffers.push(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
    buffers.push(format!("{name}.running_var"), Tensor::full(&[channels], 1.0));
}

/// Gaussian tensor with standard deviation `gain / sqrt(fan_in)`.
pub(crate) fn fan_in_gaussian(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

/// Stacks volumes into a `[n, 1, d, h, w]` batch.
pub fn stack_volumes<'a>(volumes: impl IntoIterator<Item = &'a Volume>) -> Result<Tensor> {
    let mut shape: Option<Shape3> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for v in volumes {
        match shape {
            None => shape = Some(v.shape()),
            Some(s) if s != v.shape() => return Err(Error::shape(s, v.shape())),
            _ => {}
        }
        data.extend_from_slice(v.data());
        n += 1;
    }
    let s = shape.ok_or(Error::EmptyBatch)?;
    Ok(Tensor::new(vec![n, 1, s[0], s[1], s[2]], data))
}

/// Splits a `[n, 1, d, h, w]` tensor into per-sample voxel slices.
pub fn unstack(t: &Tensor) -> Vec<&[f64]> {
    let (n, c, dims) = t.dims5();
    assert_eq!(c, 1);
    let s: usize = dims.iter().product();
    (0..n).map(|i| &t.data()[i * s..(i + 1) * s]).collect()
}

/// Gradient of a scalar loss with respect to every array in `params`.
pub fn grad<F>(params: &Params, loss_fn: F) -> Result<Vec<Tensor>>
where
    F: FnOnce(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = loss_fn(&mut g, &bound)?;
    let mut grads = g.backward(loss);
    collect_grads(params, bound.vars(), &mut grads)
}

/// Gradients of the `vars` bound from `params`, zeros where none flowed.
pub fn collect_grads(params: &Params, vars: &[Var], grads: &mut Gradients) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(params.len());
    for ((name, t), &v) in params.iter().zip(vars) {
        let gt = grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()));
        if !gt.all_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        out.push(gt);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_of_squares_is_twice_params() {
        let mut p = Params::new();
        p.push("a", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        p.push("b", Tensor::new(vec![1, 2], vec![3.0, 0.0]));
        let grads = grad(&p, |g, b| {
            let mut terms = Vec::new();
            for &v in b.vars() {
                let sq = g.mul(v, v);
                let m = g.mean(sq);
                let n = g.value(v).len() as f64;
                terms.push((m, n));
            }
            Ok(g.weighted_sum(&terms))
        })
        .unwrap();
        assert_eq!(grads[0].data(), &[2.0, -4.0, 1.0]);
        assert_eq!(grads[1].data(), &[6.0, 0.0]);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let mut p = Params::new();
        p.push("a", Tensor::new(vec![2], vec![1.0, 2.0]));
        let grads = grad(&p, |g, _| Ok(g.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_reports_non_finite() {
        let mut p = Params::new();
        p.push("a", Tensor::new(vec![1], vec![0.0]));
        let err = grad(&p, |g, b| {
            let l = g.ln(b.var("a"));
            Ok(g.mean(l))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "a"));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn names_are_unique() {
        let mut p = Params::new();
        p.push("a", Tensor::scalar(1.0));
        p.push("a", Tensor::scalar(2.0));
    }
}
