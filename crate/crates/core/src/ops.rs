//! Forward kernels for the elementwise and dense operations. These are shared
//! by the recording [`Graph`](crate::graph::Graph) and the eager inference path.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.ensure_same_shape(b, "add")?;
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect())
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.ensure_same_shape(b, "mul")?;
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect())
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::from_f64_lossy(1.0 / s.plane_len() as f64);
    let data = x.data().chunks(s.plane_len()).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(Shape::new(s.n(), s.c(), 1, 1), data).expect("pooled shape")
}

/// Dense layer on `(N, C_in, 1, 1)`; weight `(C_out, C_in, 1, 1)`, bias `(C_out, 1, 1, 1)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws, bs) = (x.shape(), weight.shape(), bias.shape());
    if xs.h() != 1 || xs.w() != 1 || ws.h() != 1 || ws.w() != 1 {
        return Err(Error::InvalidArgument(format!("linear expects 1x1 spatial extents, got {xs} and {ws}")));
    }
    if ws.c() != xs.c() {
        return Err(Error::ChannelMismatch { op: "linear", expected: ws.c(), actual: xs.c() });
    }
    if bs != Shape::new(ws.n(), 1, 1, 1) {
        return Err(Error::ShapeMismatch { op: "linear bias", left: bs, right: Shape::new(ws.n(), 1, 1, 1) });
    }
    let (cin, cout) = (ws.c(), ws.n());
    let mut data = Vec::with_capacity(xs.n() * cout);
    for n in 0..xs.n() {
        let xi = x.item(n);
        for o in 0..cout {
            let row = &weight.data()[o * cin..(o + 1) * cin];
            let dot: T = row.iter().zip(xi).map(|(&a, &b)| a * b).sum();
            data.push(dot + bias.data()[o]);
        }
    }
    Tensor::from_vec(Shape::new(xs.n(), cout, 1, 1), data)
}

/// Per-item softmax of `logits / tau` over channels, with max subtraction.
pub fn softmax_temperature<T: Scalar>(logits: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("softmax temperature must be positive, got {tau}")));
    }
    let s = logits.shape();
    let inv_tau = T::from_f64_lossy(1.0 / tau);
    let mut data = Vec::with_capacity(s.numel());
    for item in logits.data().chunks(s.item_len()) {
        let max = item.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = item.iter().map(|&v| ((v - max) * inv_tau).exp()).collect();
        let total: T = exps.iter().copied().sum();
        data.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::from_vec(s, data)
}

/// Per-item convex combination of candidates: `(N, K, 1, 1)` attention and
/// `K` tensors of shape `(A, B, C, D)` give `(N*A, B, C, D)`.
pub fn mix_kernels<T: Scalar>(attention: &Tensor<T>, kernels: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let s = attention.shape();
    if s.h() != 1 || s.w() != 1 || s.c() != kernels.len() || kernels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "attention {s} does not match {} candidate kernels",
            kernels.len()
        )));
    }
    let ks = kernels[0].shape();
    for k in kernels {
        if k.shape() != ks {
            return Err(Error::ShapeMismatch { op: "mix_kernels", left: ks, right: k.shape() });
        }
    }
    let kl = ks.numel();
    let mut data = vec![T::zero(); s.n() * kl];
    for n in 0..s.n() {
        let dst = &mut data[n * kl..(n + 1) * kl];
        for (k, kern) in kernels.iter().enumerate() {
            let a = attention.data()[n * kernels.len() + k];
            dst.iter_mut().zip(kern.data()).for_each(|(d, &w)| *d = *d + a * w);
        }
    }
    let [a, b, c, d] = ks.0;
    Tensor::from_vec(Shape::new(s.n() * a, b, c, d), data)
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
        return Err(Error::ShapeMismatch { op: "concat", left: sa, right: sb });
    }
    let mut data = Vec::with_capacity(sa.numel() + sb.numel());
    for n in 0..sa.n() {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor::from_vec(Shape::new(sa.n(), sa.c() + sb.c(), sa.h(), sa.w()), data)
}

pub fn mean_abs_error<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    pred.ensure_same_shape(target, "mean_abs_error")?;
    let total: T = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum();
    Ok(Tensor::scalar(total / T::from_f64_lossy(pred.len() as f64)))
}
