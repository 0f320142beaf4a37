//! Execution backends for network wiring.
//!
//! The network is written once against [`Backend`]. [`Tape`] records onto a
//! [`Graph`] for training; [`Eager`] evaluates directly and drops
//! intermediates as soon as they go out of scope, which keeps inference on
//! full-size images within memory.

use std::collections::HashMap;
use std::ops::Deref;
use std::rc::Rc;

use crate::conv::{self, WeightSharing};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ParameterSet;
use crate::ops;
use crate::tensor::{Scalar, Shape, Tensor};

pub trait Backend<T: Scalar> {
    type Value: Clone;

    fn param(&mut self, name: &str) -> Result<Self::Value>;
    fn shape(&self, v: &Self::Value) -> Shape;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn global_avg_pool(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn linear(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn softmax_temperature(&mut self, logits: &Self::Value, tau: f64) -> Result<Self::Value>;
    fn conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: &Self::Value,
        dilation: usize,
        sharing: WeightSharing,
    ) -> Result<Self::Value>;
    fn mix_kernels(&mut self, attention: &Self::Value, kernels: &[Self::Value]) -> Result<Self::Value>;
    fn pixel_shuffle(&mut self, x: &Self::Value, factor: usize) -> Result<Self::Value>;
    fn concat_channels(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
}

/// Records onto a graph; parameters are looked up in a name-to-leaf table.
pub struct Tape<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    bindings: &'a HashMap<String, Var>,
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, bindings: &'a HashMap<String, Var>) -> Self {
        Self { graph, bindings }
    }
}

impl<T: Scalar> Backend<T> for Tape<'_, T> {
    type Value = Var;

    fn param(&mut self, name: &str) -> Result<Var> {
        self.bindings.get(name).copied().ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    fn shape(&self, v: &Var) -> Shape {
        self.graph.shape(*v)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.add(*a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.mul(*a, *b)
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        Ok(self.graph.relu(*x))
    }

    fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        Ok(self.graph.global_avg_pool(*x))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        self.graph.linear(*x, *w, *b)
    }

    fn softmax_temperature(&mut self, logits: &Var, tau: f64) -> Result<Var> {
        self.graph.softmax_temperature(*logits, tau)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, dilation: usize, sharing: WeightSharing) -> Result<Var> {
        self.graph.conv2d_with(*x, *w, *b, dilation, sharing)
    }

    fn mix_kernels(&mut self, attention: &Var, kernels: &[Var]) -> Result<Var> {
        self.graph.mix_kernels(*attention, kernels)
    }

    fn pixel_shuffle(&mut self, x: &Var, factor: usize) -> Result<Var> {
        self.graph.pixel_shuffle(*x, factor)
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.concat_channels(*a, *b)
    }
}

/// Value held by the eager backend: a borrowed parameter or a computed tensor.
#[derive(Clone)]
pub enum Held<'p, T: Scalar> {
    Borrowed(&'p Tensor<T>),
    Owned(Rc<Tensor<T>>),
}

impl<T: Scalar> Deref for Held<'_, T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        match self {
            Held::Borrowed(t) => t,
            Held::Owned(t) => t,
        }
    }
}

impl<T: Scalar> Held<'_, T> {
    pub fn into_tensor(self) -> Tensor<T> {
        match self {
            Held::Borrowed(t) => t.clone(),
            Held::Owned(rc) => Rc::try_unwrap(rc).unwrap_or_else(|rc| (*rc).clone()),
        }
    }
}

/// Per-op invocation counts collected by [`Eager`]; used for structural audits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub conv: usize,
    pub add: usize,
    pub mul: usize,
    pub concat: usize,
    pub shuffle: usize,
}

pub struct Eager<'p, T: Scalar> {
    params: &'p ParameterSet<T>,
    pub counts: OpCounts,
}

impl<'p, T: Scalar> Eager<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Self { params, counts: OpCounts::default() }
    }

    pub fn input(&self, t: Tensor<T>) -> Held<'p, T> {
        Held::Owned(Rc::new(t))
    }
}

fn owned<'p, T: Scalar>(t: Tensor<T>) -> Held<'p, T> {
    Held::Owned(Rc::new(t))
}

impl<'p, T: Scalar> Backend<T> for Eager<'p, T> {
    type Value = Held<'p, T>;

    fn param(&mut self, name: &str) -> Result<Held<'p, T>> {
        Ok(Held::Borrowed(self.params.get(name)?))
    }

    fn shape(&self, v: &Held<'p, T>) -> Shape {
        v.shape()
    }

    fn add(&mut self, a: &Held<'p, T>, b: &Held<'p, T>) -> Result<Held<'p, T>> {
        self.counts.add += 1;
        ops::add(a, b).map(owned)
    }

    fn mul(&mut self, a: &Held<'p, T>, b: &Held<'p, T>) -> Result<Held<'p, T>> {
        self.counts.mul += 1;
        ops::mul(a, b).map(owned)
    }

    fn relu(&mut self, x: &Held<'p, T>) -> Result<Held<'p, T>> {
        Ok(owned(ops::relu(x)))
    }

    fn global_avg_pool(&mut self, x: &Held<'p, T>) -> Result<Held<'p, T>> {
        Ok(owned(ops::global_avg_pool(x)))
    }

    fn linear(&mut self, x: &Held<'p, T>, w: &Held<'p, T>, b: &Held<'p, T>) -> Result<Held<'p, T>> {
        ops::linear(x, w, b).map(owned)
    }

    fn softmax_temperature(&mut self, logits: &Held<'p, T>, tau: f64) -> Result<Held<'p, T>> {
        ops::softmax_temperature(logits, tau).map(owned)
    }

    fn conv2d(
        &mut self,
        x: &Held<'p, T>,
        w: &Held<'p, T>,
        b: &Held<'p, T>,
        dilation: usize,
        sharing: WeightSharing,
    ) -> Result<Held<'p, T>> {
        self.counts.conv += 1;
        conv::conv2d_forward(x, w, b, dilation, sharing).map(owned)
    }

    fn mix_kernels(&mut self, attention: &Held<'p, T>, kernels: &[Held<'p, T>]) -> Result<Held<'p, T>> {
        let cands: Vec<&Tensor<T>> = kernels.iter().map(|k| &**k).collect();
        ops::mix_kernels(attention, &cands).map(owned)
    }

    fn pixel_shuffle(&mut self, x: &Held<'p, T>, factor: usize) -> Result<Held<'p, T>> {
        self.counts.shuffle += 1;
        conv::pixel_shuffle(x, factor).map(owned)
    }

    fn concat_channels(&mut self, a: &Held<'p, T>, b: &Held<'p, T>) -> Result<Held<'p, T>> {
        self.counts.concat += 1;
        ops::concat_channels(a, b).map(owned)
    }
}
