//! 3x3 dilated convolution and sub-pixel rearrangement kernels.
//!
//! Convolution is zero-padded cross-correlation (no kernel flip) with stride 1
//! and padding equal to the dilation, so spatial size is always preserved.
//! `conv2d_reference` is the direct nested-loop definition; the im2col + GEMM
//! path used everywhere else must agree with it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Shape, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
/// Output pixels per im2col block; bounds the scratch buffer on large images.
const COLUMN_BLOCK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Size-preserving spec (`padding == dilation`).
    pub fn new(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        Self { in_channels, out_channels, dilation, padding: dilation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument(format!("degenerate conv spec {self:?}")));
        }
        if self.padding != self.dilation {
            return Err(Error::InvalidArgument(format!(
                "padding {} does not preserve spatial size for dilation {}",
                self.padding, self.dilation
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, KERNEL, KERNEL)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(self.out_channels, 1, 1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * TAPS + self.out_channels
    }
}

/// How weights map onto batch items: one shared bank, or one bank per item
/// (used by dynamic convolution, where each item aggregates its own kernel).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSharing {
    Shared,
    PerItem,
}

pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub dilation: usize,
    pub sharing: WeightSharing,
}

impl ConvGeometry {
    pub fn resolve<T: Scalar>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        dilation: usize,
        sharing: WeightSharing,
    ) -> Result<Self> {
        let xs = x.shape();
        let ws = weight.shape();
        let bs = bias.shape();
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        if ws.h() != KERNEL || ws.w() != KERNEL {
            return Err(Error::InvalidArgument(format!("only 3x3 kernels are supported, got weight {ws}")));
        }
        if ws.c() != xs.c() {
            return Err(Error::ChannelMismatch { op: "conv2d", expected: ws.c(), actual: xs.c() });
        }
        let groups = match sharing {
            WeightSharing::Shared => 1,
            WeightSharing::PerItem => xs.n(),
        };
        if !ws.n().is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "per-item weight bank {ws} does not divide into {groups} items"
            )));
        }
        if bs != Shape::new(ws.n(), 1, 1, 1) {
            return Err(Error::ShapeMismatch { op: "conv2d bias", left: bs, right: Shape::new(ws.n(), 1, 1, 1) });
        }
        Ok(Self {
            batch: xs.n(),
            cin: xs.c(),
            cout: ws.n() / groups,
            h: xs.h(),
            w: xs.w(),
            dilation,
            sharing,
        })
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn weight_len(&self) -> usize {
        self.cout * self.cin * TAPS
    }

    fn group(&self, n: usize) -> usize {
        match self.sharing {
            WeightSharing::Shared => 0,
            WeightSharing::PerItem => n,
        }
    }
}

/// Visits the output-row segments covered by pixels `start..start+count`:
/// `f(oy, ox0, ox1, offset)` where `offset` is the column of `(oy, ox0)`.
fn row_segments(start: usize, count: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let end = start + count;
    let mut p = start;
    while p < end {
        let (oy, ox0) = (p / w, p % w);
        let ox1 = w.min(ox0 + (end - p));
        f(oy, ox0, ox1, p - start);
        p += ox1 - ox0;
    }
}

/// Valid output-column range `[lo, hi)` within `[ox0, ox1)` for horizontal tap offset `dx`.
fn valid_span(ox0: usize, ox1: usize, dx: isize, w: usize) -> (usize, usize) {
    let lo = (ox0 as isize).max(-dx).min(ox1 as isize) as usize;
    let hi = (ox1 as isize).min(w as isize - dx).max(lo as isize) as usize;
    (lo, hi)
}

/// Fills `cols` (row-major, `cin*9` rows by `count` columns) with the input
/// taps seen by output pixels `start..start+count` of one item.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, start: usize, count: usize, cols: &mut [T]) {
    let d = g.dilation as isize;
    for c in 0..g.cin {
        let plane = &x[c * g.hw()..(c + 1) * g.hw()];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * TAPS + ky * KERNEL + kx) * count;
                let dy = (ky as isize - 1) * d;
                let dx = (kx as isize - 1) * d;
                let dst = &mut cols[row..row + count];
                row_segments(start, count, g.w, |oy, ox0, ox1, off| {
                    let seg = &mut dst[off..off + (ox1 - ox0)];
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        return;
                    }
                    let (lo, hi) = valid_span(ox0, ox1, dx, g.w);
                    if lo == hi {
                        seg.fill(T::zero());
                        return;
                    }
                    seg[..lo - ox0].fill(T::zero());
                    let src = iy as usize * g.w;
                    let (s0, s1) = ((src + lo) as isize + dx, (src + hi) as isize + dx);
                    seg[lo - ox0..hi - ox0].copy_from_slice(&plane[s0 as usize..s1 as usize]);
                    seg[hi - ox0..].fill(T::zero());
                });
            }
        }
    }
}

/// Scatter-adds column gradients back onto the input plane (adjoint of `im2col`).
fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, start: usize, count: usize, dx_buf: &mut [T]) {
    let d = g.dilation as isize;
    for c in 0..g.cin {
        let plane = &mut dx_buf[c * g.hw()..(c + 1) * g.hw()];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * TAPS + ky * KERNEL + kx) * count;
                let dy = (ky as isize - 1) * d;
                let dx = (kx as isize - 1) * d;
                let src = &cols[row..row + count];
                row_segments(start, count, g.w, |oy, ox0, ox1, off| {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= g.h as isize {
                        return;
                    }
                    let (lo, hi) = valid_span(ox0, ox1, dx, g.w);
                    if lo == hi {
                        return;
                    }
                    let base = (iy as usize * g.w) as isize + dx;
                    let dst = &mut plane[(base + lo as isize) as usize..(base + hi as isize) as usize];
                    let seg = &src[off + lo - ox0..off + hi - ox0];
                    dst.iter_mut().zip(seg).for_each(|(a, &b)| *a = *a + b);
                });
            }
        }
    }
}

fn blocks(hw: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..hw).step_by(COLUMN_BLOCK).map(move |s| (s, COLUMN_BLOCK.min(hw - s)))
}

/// Convolution forward via im2col + GEMM.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
    sharing: WeightSharing,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::resolve(x, weight, bias, dilation, sharing)?;
    let hw = g.hw();
    let out_shape = Shape::new(g.batch, g.cout, g.h, g.w);
    let mut out = vec![T::zero(); out_shape.numel()];
    let k = g.cin * TAPS;
    out.par_chunks_mut(g.cout * hw).enumerate().for_each(|(n, out_item)| {
        let grp = g.group(n);
        let wmat = &weight.data()[grp * g.weight_len()..(grp + 1) * g.weight_len()];
        let b = &bias.data()[grp * g.cout..(grp + 1) * g.cout];
        for (o, row) in out_item.chunks_mut(hw).enumerate() {
            row.fill(b[o]);
        }
        let mut cols = vec![T::zero(); k * COLUMN_BLOCK.min(hw)];
        for (start, count) in blocks(hw) {
            let cols = &mut cols[..k * count];
            im2col(x.item(n), &g, start, count, cols);
            gemm(
                MatRef::new(wmat, g.cout, k),
                MatRef::new(cols, k, count),
                T::one(),
                &mut out_item[start..],
                hw,
            );
        }
    });
    Tensor::from_vec(out_shape, out)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of the convolution given the upstream gradient `dout`.
/// The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dout: &[T],
    dilation: usize,
    sharing: WeightSharing,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::resolve(x, weight, bias, dilation, sharing)?;
    let hw = g.hw();
    let k = g.cin * TAPS;
    if dout.len() != g.batch * g.cout * hw {
        return Err(Error::InvalidArgument("conv2d backward: upstream gradient has wrong length".into()));
    }
    let wl = g.weight_len();

    // Per-item partial gradients; shared banks are reduced afterwards in item order.
    let partials: Vec<(Option<Vec<T>>, Vec<T>, Vec<T>)> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let grp = g.group(n);
            let wmat = &weight.data()[grp * wl..(grp + 1) * wl];
            let dout_item = &dout[n * g.cout * hw..(n + 1) * g.cout * hw];
            let mut dw = vec![T::zero(); wl];
            let db: Vec<T> = dout_item.chunks(hw).map(|r| r.iter().copied().sum()).collect();
            let mut dx = need_input.then(|| vec![T::zero(); g.cin * hw]);
            let mut cols = vec![T::zero(); k * COLUMN_BLOCK.min(hw)];
            let mut dcols = if need_input { vec![T::zero(); k * COLUMN_BLOCK.min(hw)] } else { Vec::new() };
            for (start, count) in blocks(hw) {
                let cols = &mut cols[..k * count];
                im2col(x.item(n), &g, start, count, cols);
                let dout_blk = MatRef::strided(&dout_item[start..], g.cout, count, hw);
                gemm(dout_blk, MatRef::new(cols, k, count).t(), T::one(), &mut dw, k);
                if let Some(dx) = dx.as_mut() {
                    let dcols = &mut dcols[..k * count];
                    gemm(MatRef::new(wmat, g.cout, k).t(), dout_blk, T::zero(), dcols, count);
                    col2im_add(dcols, &g, start, count, dx);
                }
            }
            (dx, dw, db)
        })
        .collect();

    let mut grads = ConvGrads {
        input: need_input.then(|| Vec::with_capacity(g.batch * g.cin * hw)),
        weight: vec![T::zero(); weight.len()],
        bias: vec![T::zero(); bias.len()],
    };
    for (n, (dx, dw, db)) in partials.into_iter().enumerate() {
        let grp = g.group(n);
        let wdst = &mut grads.weight[grp * wl..(grp + 1) * wl];
        wdst.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b);
        let bdst = &mut grads.bias[grp * g.cout..(grp + 1) * g.cout];
        bdst.iter_mut().zip(&db).for_each(|(a, &b)| *a = *a + b);
        if let (Some(acc), Some(dx)) = (grads.input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    Ok(grads)
}

/// Direct nested-loop convolution: the definition the fast path is checked against.
pub fn conv2d_reference<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
    sharing: WeightSharing,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::resolve(x, weight, bias, dilation, sharing)?;
    let (h, w, d) = (g.h as isize, g.w as isize, g.dilation as isize);
    let shape = Shape::new(g.batch, g.cout, g.h, g.w);
    let mut out = Vec::with_capacity(shape.numel());
    let ws = weight.shape();
    for n in 0..g.batch {
        let grp = g.group(n);
        for o in 0..g.cout {
            let oc = grp * g.cout + o;
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = bias.data()[oc];
                    for c in 0..g.cin {
                        for ky in 0..KERNEL as isize {
                            for kx in 0..KERNEL as isize {
                                let iy = oy + (ky - 1) * d;
                                let ix = ox + (kx - 1) * d;
                                if iy < 0 || iy >= h || ix < 0 || ix >= w {
                                    continue;
                                }
                                let wv = weight.data()[((oc * ws.c() + c) * KERNEL + ky as usize) * KERNEL + kx as usize];
                                acc = acc + wv * x.at(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// `out[n, c, h*r + i, w*r + j] = in[n, c*r*r + i*r + j, h, w]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.c().is_multiple_of(r * r) {
        return Err(Error::InvalidArgument(format!(
            "pixel_shuffle: {} channels not divisible by {r}^2",
            s.c()
        )));
    }
    let c_out = s.c() / (r * r);
    let out_shape = Shape::new(s.n(), c_out, s.h() * r, s.w() * r);
    let mut out = vec![T::zero(); out_shape.numel()];
    shuffle_indices(s, r, |src, dst| out[dst] = x.data()[src]);
    Tensor::from_vec(out_shape, out)
}

/// Inverse rearrangement of [`pixel_shuffle`]; maps an `(N, C, H*r, W*r)`
/// buffer back to `(N, C*r*r, H, W)` ordering.
pub fn pixel_unshuffle<T: Scalar>(y: &[T], in_shape: Shape, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); in_shape.numel()];
    shuffle_indices(in_shape, r, |src, dst| out[src] = y[dst]);
    out
}

/// Calls `f(src, dst)` for every element, `src` indexing the `(N, C*r*r, H, W)`
/// layout and `dst` the shuffled `(N, C, H*r, W*r)` layout.
fn shuffle_indices(s: Shape, r: usize, mut f: impl FnMut(usize, usize)) {
    let c_out = s.c() / (r * r);
    let (h, w) = (s.h(), s.w());
    let (oh, ow) = (h * r, w * r);
    for n in 0..s.n() {
        for c in 0..c_out {
            for i in 0..r {
                for j in 0..r {
                    let cin = c * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let src = ((n * s.c() + cin) * h + y) * w + x;
                            let dst = ((n * c_out + c) * oh + y * r + i) * ow + x * r + j;
                            f(src, dst);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let s = Shape(shape);
        Tensor::from_vec(s, (0..s.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn centered_delta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([1, 1, 5, 6], &mut rng);
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let b = Tensor::zeros([1, 1, 1, 1]);
        for d in [1, 2] {
            let y = conv2d_forward(&x, &w, &b, d, WeightSharing::Shared).unwrap();
            assert_eq!(y.data(), x.data());
        }
    }

    #[test]
    fn zero_weight_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random([2, 3, 4, 4], &mut rng);
        let w = Tensor::zeros([2, 3, 3, 3]);
        let b = Tensor::from_vec([2, 1, 1, 1], vec![0.5, -2.0]).unwrap();
        let y = conv2d_forward(&x, &w, &b, 1, WeightSharing::Shared).unwrap();
        for n in 0..2 {
            for h in 0..4 {
                for ww in 0..4 {
                    assert_eq!(y.at(n, 0, h, ww), 0.5);
                    assert_eq!(y.at(n, 1, h, ww), -2.0);
                }
            }
        }
    }

    #[test]
    fn fast_path_matches_reference_across_blocks() {
        // 70x70 spans two im2col column blocks.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([2, 2, 70, 70], &mut rng);
        let w = random([3, 2, 3, 3], &mut rng);
        let b = random([3, 1, 1, 1], &mut rng);
        for d in [1, 2] {
            let fast = conv2d_forward(&x, &w, &b, d, WeightSharing::Shared).unwrap();
            let slow = conv2d_reference(&x, &w, &b, d, WeightSharing::Shared).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn per_item_banks_select_by_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([2, 2, 4, 4], &mut rng);
        let w = random([6, 2, 3, 3], &mut rng);
        let b = random([6, 1, 1, 1], &mut rng);
        let y = conv2d_forward(&x, &w, &b, 1, WeightSharing::PerItem).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 4, 4));
        let y_ref = conv2d_reference(&x, &w, &b, 1, WeightSharing::PerItem).unwrap();
        assert!(y.max_abs_diff(&y_ref) < 1e-12);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        let b = Tensor::zeros([1, 1, 1, 1]);
        let err = conv2d_forward(&x, &w, &b, 1, WeightSharing::Shared).unwrap_err();
        assert!(matches!(err, Error::ChannelMismatch { .. }));
    }

    #[test]
    fn non_preserving_padding_rejected() {
        let spec = ConvSpec { in_channels: 1, out_channels: 1, dilation: 2, padding: 1 };
        assert!(spec.validate().is_err());
        assert!(ConvSpec::new(3, 64, 2).validate().is_ok());
    }

    #[test]
    fn shuffle_forced_layout() {
        let x = Tensor::<f64>::from_vec([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(pixel_shuffle(&Tensor::<f64>::zeros([1, 3, 1, 1]), 2).is_err());
    }

    #[test]
    fn shuffle_r1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random([2, 3, 4, 5], &mut rng);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }
}
