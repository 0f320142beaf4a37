//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Nodes are appended as operations are created, so creation order is a valid
//! topological order and backward simply walks the tape in reverse. An op is
//! recorded only when at least one input requires a gradient; otherwise its
//! result is stored as a constant.

use crate::conv::{self, WeightSharing};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    GlobalAvgPool(Var),
    Linear { x: Var, weight: Var, bias: Var },
    SoftmaxTemperature { logits: Var, tau: f64 },
    Conv2d { x: Var, weight: Var, bias: Var, dilation: usize, sharing: WeightSharing },
    MixKernels { attention: Var, kernels: Vec<Var> },
    PixelShuffle { x: Var, factor: usize },
    ConcatChannels(Var, Var),
    Sum(Var),
    MeanAbsError(Var, Var),
}

struct Node<T: Scalar> {
    tensor: Tensor<T>,
    op: Op,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Its `requires_grad` flag decides whether
    /// gradients are collected for it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node { tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.requires_grad(false))
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.data()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].tensor.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].tensor.take_grad()
    }

    /// True when this node carries an op recorded for backward.
    pub fn is_recorded(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn into_tensor(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).tensor
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.is_requires_grad()
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|&v| self.needs_grad(v));
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { tensor: tensor.requires_grad(tracked), op });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.tensor(a), self.tensor(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.tensor(a), self.tensor(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.tensor(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = ops::global_avg_pool(self.tensor(x));
        self.push(out, Op::GlobalAvgPool(x), &[x])
    }

    /// Dense layer on `(N, C_in, 1, 1)` inputs; weight `(C_out, C_in, 1, 1)`, bias `(C_out, 1, 1, 1)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.tensor(x), self.tensor(weight), self.tensor(bias))?;
        Ok(self.push(out, Op::Linear { x, weight, bias }, &[x, weight, bias]))
    }

    /// Per-item softmax of `logits / tau` over the channel axis.
    pub fn softmax_temperature(&mut self, logits: Var, tau: f64) -> Result<Var> {
        let out = ops::softmax_temperature(self.tensor(logits), tau)?;
        Ok(self.push(out, Op::SoftmaxTemperature { logits, tau }, &[logits]))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        self.conv2d_with(x, weight, bias, dilation, WeightSharing::Shared)
    }

    /// Convolution where `weight`/`bias` may hold one bank per batch item.
    pub fn conv2d_with(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        dilation: usize,
        sharing: WeightSharing,
    ) -> Result<Var> {
        let out = conv::conv2d_forward(self.tensor(x), self.tensor(weight), self.tensor(bias), dilation, sharing)?;
        Ok(self.push(out, Op::Conv2d { x, weight, bias, dilation, sharing }, &[x, weight, bias]))
    }

    /// Per-item convex combination of candidate tensors; see [`ops::mix_kernels`].
    pub fn mix_kernels(&mut self, attention: Var, kernels: &[Var]) -> Result<Var> {
        let cands: Vec<&Tensor<T>> = kernels.iter().map(|&k| self.tensor(k)).collect();
        let out = ops::mix_kernels(self.tensor(attention), &cands)?;
        let mut inputs = vec![attention];
        inputs.extend_from_slice(kernels);
        Ok(self.push(out, Op::MixKernels { attention, kernels: kernels.to_vec() }, &inputs))
    }

    pub fn pixel_shuffle(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = conv::pixel_shuffle(self.tensor(x), factor)?;
        Ok(self.push(out, Op::PixelShuffle { x, factor }, &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.tensor(a), self.tensor(b))?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.tensor(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Mean over every element of `|pred - target|`.
    pub fn mean_abs_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let out = ops::mean_abs_error(self.tensor(pred), self.tensor(target))?;
        Ok(self.push(out, Op::MeanAbsError(pred, target), &[pred, target]))
    }

    /// Back-propagates from a scalar root, adding `d root / d leaf` into the
    /// gradient buffer of every reachable leaf that requires a gradient.
    ///
    /// Intermediate gradients are local to the call, so calling this twice
    /// doubles the leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if rs != Shape::scalar() {
            return Err(Error::NonScalarRoot(rs));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].tensor.is_requires_grad() {
                    self.nodes[i].tensor.accumulate_grad(&g);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut give = |v: Var, contribution: Vec<T>| {
            if !self.needs_grad(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                give(*a, g.to_vec());
                give(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    give(*a, g.iter().zip(vb).map(|(&u, &y)| u * y).collect());
                }
                if self.needs_grad(*b) {
                    give(*b, g.iter().zip(va).map(|(&u, &x)| u * x).collect());
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                give(*x, g.iter().zip(vx).map(|(&u, &v)| if v > T::zero() { u } else { T::zero() }).collect());
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let inv = T::from_f64_lossy(1.0 / s.plane_len() as f64);
                let mut out = Vec::with_capacity(s.numel());
                for &u in g {
                    out.extend(std::iter::repeat_n(u * inv, s.plane_len()));
                }
                give(*x, out);
            }
            Op::Linear { x, weight, bias } => {
                let (xs, ws) = (self.shape(*x), self.shape(*weight));
                let (cin, cout) = (ws.c(), ws.n());
                let (vx, vw) = (self.value(*x), self.value(*weight));
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); xs.numel()];
                    for n in 0..xs.n() {
                        for o in 0..cout {
                            let u = g[n * cout + o];
                            for c in 0..cin {
                                dx[n * cin + c] = dx[n * cin + c] + u * vw[o * cin + c];
                            }
                        }
                    }
                    give(*x, dx);
                }
                if self.needs_grad(*weight) {
                    let mut dw = vec![T::zero(); ws.numel()];
                    for n in 0..xs.n() {
                        for o in 0..cout {
                            let u = g[n * cout + o];
                            for c in 0..cin {
                                dw[o * cin + c] = dw[o * cin + c] + u * vx[n * cin + c];
                            }
                        }
                    }
                    give(*weight, dw);
                }
                if self.needs_grad(*bias) {
                    let mut db = vec![T::zero(); cout];
                    for n in 0..xs.n() {
                        for o in 0..cout {
                            db[o] = db[o] + g[n * cout + o];
                        }
                    }
                    give(*bias, db);
                }
            }
            Op::SoftmaxTemperature { logits, tau } => {
                let p = self.nodes[i].tensor.data();
                let k = self.shape(*logits).item_len();
                let inv_tau = T::from_f64_lossy(1.0 / tau);
                let mut out = Vec::with_capacity(p.len());
                for (pi, gi) in p.chunks(k).zip(g.chunks(k)) {
                    let dot: T = pi.iter().zip(gi).map(|(&a, &b)| a * b).sum();
                    out.extend(pi.iter().zip(gi).map(|(&a, &b)| a * (b - dot) * inv_tau));
                }
                give(*logits, out);
            }
            Op::Conv2d { x, weight, bias, dilation, sharing } => {
                let grads_c = conv::conv2d_backward(
                    self.tensor(*x),
                    self.tensor(*weight),
                    self.tensor(*bias),
                    g,
                    *dilation,
                    *sharing,
                    self.needs_grad(*x),
                )?;
                if let Some(dx) = grads_c.input {
                    give(*x, dx);
                }
                give(*weight, grads_c.weight);
                give(*bias, grads_c.bias);
            }
            Op::MixKernels { attention, kernels } => {
                let k = kernels.len();
                let n_items = self.shape(*attention).n();
                let kl = self.shape(kernels[0]).numel();
                let va = self.value(*attention);
                if self.needs_grad(*attention) {
                    let mut da = vec![T::zero(); n_items * k];
                    for n in 0..n_items {
                        let gi = &g[n * kl..(n + 1) * kl];
                        for (j, &kv) in kernels.iter().enumerate() {
                            da[n * k + j] = gi.iter().zip(self.value(kv)).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    give(*attention, da);
                }
                for (j, &kv) in kernels.iter().enumerate() {
                    if !self.needs_grad(kv) {
                        continue;
                    }
                    let mut dk = vec![T::zero(); kl];
                    for n in 0..n_items {
                        let a = va[n * k + j];
                        dk.iter_mut().zip(&g[n * kl..(n + 1) * kl]).for_each(|(d, &u)| *d = *d + a * u);
                    }
                    give(kv, dk);
                }
            }
            Op::PixelShuffle { x, factor } => {
                give(*x, conv::pixel_unshuffle(g, self.shape(*x), *factor));
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (la, lb) = (sa.item_len(), sb.item_len());
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                for item in g.chunks(la + lb) {
                    ga.extend_from_slice(&item[..la]);
                    gb.extend_from_slice(&item[la..]);
                }
                give(*a, ga);
                give(*b, gb);
            }
            Op::Sum(x) => {
                give(*x, vec![g[0]; self.shape(*x).numel()]);
            }
            Op::MeanAbsError(pred, target) => {
                let (vp, vt) = (self.value(*pred), self.value(*target));
                let scale = g[0] / T::from_f64_lossy(vp.len() as f64);
                let sign: Vec<T> = vp
                    .iter()
                    .zip(vt)
                    .map(|(&p, &t)| {
                        if p > t {
                            scale
                        } else if p < t {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.needs_grad(*target) {
                    give(*target, sign.iter().map(|&v| -v).collect());
                }
                give(*pred, sign);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_identity_and_inverse() {
        let mut g = Graph::new();
        let a = g.constant(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s), &[1.0, 2.0, 3.0, 4.0]);
        let neg = g.constant(t([1, 1, 2, 2], &[-1.0, -2.0, -3.0, -4.0]));
        let s = g.add(a, neg).unwrap();
        assert!(g.value(s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_reports_both() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros([1, 1, 2, 3]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[1, 1, 2, 2]") && msg.contains("[1, 1, 2, 3]"), "{msg}");
        assert!(g.mul(a, b).is_err());
    }

    #[test]
    fn mul_identity_and_annihilator() {
        let mut g = Graph::new();
        let a = g.constant(t([1, 1, 1, 3], &[1.5, -2.0, 3.0]));
        let one = g.constant(Tensor::ones([1, 1, 1, 3]));
        let zero = g.constant(Tensor::zeros([1, 1, 1, 3]));
        let p = g.mul(a, one).unwrap();
        assert_eq!(g.value(p), &[1.5, -2.0, 3.0]);
        let p = g.mul(a, zero).unwrap();
        assert!(g.value(p).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]).requires_grad(true));
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative() {
        let mut g = Graph::new();
        let x = g.leaf(t([1, 1, 2, 2], &[-1.0, -0.5, -3.0, -1e-9]).requires_grad(true));
        let y = g.relu(x);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_avg_pool_cases() {
        let mut g = Graph::new();
        let x = g.constant(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.global_avg_pool(x);
        assert_eq!(g.value(p), &[2.5]);
        let c = g.constant(Tensor::full([2, 3, 4, 5], 0.75));
        let p = g.global_avg_pool(c);
        assert_eq!(g.shape(p), Shape::new(2, 3, 1, 1));
        assert!(g.value(p).iter().all(|&v| (v - 0.75).abs() < 1e-15));
        let one = g.constant(t([1, 2, 1, 1], &[3.0, -1.0]));
        let p = g.global_avg_pool(one);
        assert_eq!(g.value(p), &[3.0, -1.0]);
    }

    #[test]
    fn avg_pool_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros([1, 2, 2, 2]).requires_grad(true));
        let p = g.global_avg_pool(x);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(t([2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.constant(t([2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let zb = g.constant(Tensor::zeros([2, 1, 1, 1]));
        let y = g.linear(x, eye, zb).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
        let zw = g.constant(Tensor::zeros([3, 2, 1, 1]));
        let b = g.constant(t([3, 1, 1, 1], &[7.0, 8.0, 9.0]));
        let y = g.linear(x, zw, b).unwrap();
        assert_eq!(g.value(y), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
        let bad = g.constant(Tensor::zeros([3, 5, 1, 1]));
        assert!(g.linear(x, bad, b).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let eq = g.constant(Tensor::full([1, 4, 1, 1], 3.0));
        for tau in [0.1, 1.0, 30.0] {
            let p = g.softmax_temperature(eq, tau).unwrap();
            assert!(g.value(p).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        let l = g.constant(t([1, 2, 1, 1], &[1.0, 2.0]));
        let p = g.softmax_temperature(l, 1.0).unwrap();
        assert!((g.value(p)[0] - 0.26894).abs() < 1e-4);
        assert!((g.value(p)[1] - 0.73106).abs() < 1e-4);
        let b = g.constant(t([1, 3, 1, 1], &[-5.0, 0.0, 5.0]));
        let p = g.softmax_temperature(b, 1e6).unwrap();
        assert!(g.value(p).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-5));
        assert!(g.softmax_temperature(l, 0.0).is_err());
        assert!(g.softmax_temperature(l, -1.0).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones_and_fanout_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::full([1, 2, 2, 2], 0.3).requires_grad(true));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::full([1, 2, 2, 2], 0.3).requires_grad(true));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 2.0));
        // A second pass over the same tape doubles leaf gradients.
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros([1, 1, 2, 1]).requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn provenance_only_when_tracked() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::ones([1, 1, 1, 2]));
        let b = g.constant(Tensor::<f64>::ones([1, 1, 1, 2]));
        let c = g.add(a, b).unwrap();
        assert!(!g.is_recorded(c));
        let p = g.leaf(Tensor::<f64>::ones([1, 1, 1, 2]).requires_grad(true));
        let d = g.mul(c, p).unwrap();
        assert!(g.is_recorded(d));
        assert!(g.tensor(d).is_requires_grad());
    }

    #[test]
    fn mae_values_and_subgradient() {
        let mut g = Graph::new();
        let p = g.leaf(t([1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]).requires_grad(true));
        let same = g.constant(t([1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let l = g.mean_abs_error(p, same).unwrap();
        assert_eq!(g.value(l), &[0.0]);
        g.backward(l).unwrap();
        assert!(g.grad(p).unwrap().iter().all(|&v| v == 0.0));
        let lower = g.constant(t([1, 1, 1, 4], &[0.0, 1.0, 2.0, 3.0]));
        let l = g.mean_abs_error(p, lower).unwrap();
        assert_eq!(g.value(l), &[1.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t([2, 1, 1, 1], &[1.0, 2.0]).requires_grad(true));
        let b = g.leaf(t([2, 2, 1, 1], &[3.0, 4.0, 5.0, 6.0]).requires_grad(true));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = g.constant(t([2, 3, 1, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let m = g.mul(c, w).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 4.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
