//! Network wiring, written once against [`Backend`].

use super::config::{CruKind, Fusion, ModelConfig, Variant, CHANNELS, HB_COUNT, SL_LAYERS};
use super::params::cb_stages;
use crate::backend::Backend;
use crate::conv::WeightSharing;
use crate::dynamic::dynamic_conv;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

fn expect_channels<T: Scalar, B: Backend<T>>(b: &B, x: &B::Value, expected: usize, op: &'static str) -> Result<()> {
    let actual = b.shape(x).c();
    if actual != expected {
        return Err(Error::ChannelMismatch { op, expected, actual });
    }
    Ok(())
}

/// Plain 3x3 convolution with the parameters at `prefix`.
pub fn conv<T: Scalar, B: Backend<T>>(b: &mut B, prefix: &str, x: &B::Value, dilation: usize) -> Result<B::Value> {
    let w = b.param(&format!("{prefix}.weight"))?;
    let bias = b.param(&format!("{prefix}.bias"))?;
    b.conv2d(x, &w, &bias, dilation, WeightSharing::Shared)
}

/// Conv + ReLU unit.
pub fn cru<T: Scalar, B: Backend<T>>(b: &mut B, prefix: &str, x: &B::Value, dilation: usize) -> Result<B::Value> {
    let y = conv(b, prefix, x, dilation)?;
    b.relu(&y)
}

pub fn dynamic_cru<T: Scalar, B: Backend<T>>(
    b: &mut B,
    prefix: &str,
    x: &B::Value,
    kernels: usize,
    tau: f64,
) -> Result<B::Value> {
    let y = dynamic_conv(b, prefix, x, kernels, tau)?;
    b.relu(&y)
}

/// One heterogeneous block: the layout's CRUs in sequence, plus the block input.
pub fn heterogeneous_block<T: Scalar, B: Backend<T>>(
    b: &mut B,
    prefix: &str,
    layout: &[(&str, CruKind)],
    x: &B::Value,
    kernels: usize,
    tau: f64,
) -> Result<B::Value> {
    expect_channels(b, x, CHANNELS, "heterogeneous_block")?;
    let mut h = x.clone();
    for (slot, kind) in layout {
        let p = format!("{prefix}.{slot}");
        h = match kind {
            CruKind::Plain => cru(b, &p, &h, 1)?,
            CruKind::Dilated => cru(b, &p, &h, 2)?,
            CruKind::Dynamic => dynamic_cru(b, &p, &h, kernels, tau)?,
        };
    }
    b.add(&h, x)
}

/// Upper branch: first CRU (3 -> 64) then the heterogeneous blocks.
pub fn hunet_forward<T: Scalar, B: Backend<T>>(
    b: &mut B,
    config: &ModelConfig,
    x: &B::Value,
    tau: f64,
) -> Result<B::Value> {
    expect_channels(b, x, 3, "hunet")?;
    let layout = config
        .variant
        .block_layout()
        .ok_or_else(|| Error::InvalidArgument(format!("variant {} has no heterogeneous blocks", config.variant)))?;
    let mut h = cru(b, "hunet.cru1", x, 1)?;
    for hb in 1..=HB_COUNT {
        h = heterogeneous_block(b, &format!("hunet.hb{hb}"), &layout, &h, config.kernels, tau)?;
    }
    Ok(h)
}

/// Six stacked CRUs (3 -> 64, then 64 -> 64).
pub fn stack_forward<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Value) -> Result<B::Value> {
    expect_channels(b, x, 3, "stack")?;
    let mut h = x.clone();
    for i in 1..=6 {
        h = cru(b, &format!("stack.cru{i}"), &h, 1)?;
    }
    Ok(h)
}

/// Symmetric lower branch. Layers 1..8 produce `O_1..O_8`; layer `k` in
/// 10..16 consumes the previous output plus `O_{18-k}` (when `residual`), and
/// the final output adds `O_1`.
pub fn slnet_forward<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Value, residual: bool) -> Result<B::Value> {
    expect_channels(b, x, 3, "slnet")?;
    let half = SL_LAYERS / 2;
    let mut outs: Vec<B::Value> = Vec::with_capacity(half);
    let mut h = x.clone();
    for l in 1..=half {
        h = cru(b, &format!("slnet.l{l}"), &h, 1)?;
        outs.push(h.clone());
    }
    // Layer 9 takes O_8 directly.
    let mut u = cru(b, &format!("slnet.l{}", half + 1), &h, 1)?;
    for l in half + 2..=SL_LAYERS {
        let skip = &outs[SL_LAYERS + 1 - l];
        let inp = if residual { b.add(&u, skip)? } else { u };
        u = cru(b, &format!("slnet.l{l}"), &inp, 1)?;
    }
    if residual {
        u = b.add(&u, &outs[0])?;
    }
    Ok(u)
}

/// Sub-pixel upsampling stage(s) followed by the output convolution.
pub fn construction_block<T: Scalar, B: Backend<T>>(
    b: &mut B,
    config: &ModelConfig,
    f: &B::Value,
) -> Result<B::Value> {
    expect_channels(b, f, config.cb_in_channels(), "construction_block")?;
    let mut h = f.clone();
    for (j, (_, _, factor)) in cb_stages(config)?.into_iter().enumerate() {
        h = conv(b, &format!("cb.up{}.conv", j + 1), &h, 1)?;
        h = b.pixel_shuffle(&h, factor)?;
    }
    conv(b, "cb.out", &h, 1)
}

/// Full forward pass of any variant: LR image `(N, 3, H, W)` to `(N, 3, sH, sW)`.
pub fn adsrnet_forward<T: Scalar, B: Backend<T>>(
    b: &mut B,
    config: &ModelConfig,
    x: &B::Value,
    tau: f64,
) -> Result<B::Value> {
    config.validate()?;
    let features = match config.variant {
        Variant::SixCruCb => stack_forward(b, x)?,
        v if v.has_lower() => {
            let upper = hunet_forward(b, config, x, tau)?;
            let lower = slnet_forward(b, x, v.lower_residual())?;
            match config.fusion {
                Fusion::Multiply => b.mul(&upper, &lower)?,
                Fusion::Concat => b.concat_channels(&upper, &lower)?,
            }
        }
        _ => hunet_forward(b, config, x, tau)?,
    };
    construction_block(b, config, &features)
}
