//! Closed-form parameter and FLOP accounting.
//!
//! Parameters: `conv(a -> b) = 9ab + b`, `dense(a -> b) = ab + b`, and a
//! dynamic layer is `K * conv(64 -> 64) + dense(64 -> 16) + dense(16 -> K)`.
//!
//! FLOPs: `2 * C_in * C_out * 9 * H * W` per convolution at the resolution it
//! runs at, plus `2ab` per item for each attention dense layer. Elementwise
//! work, kernel aggregation and pooling are not counted.

use super::config::{CruKind, ModelConfig, CHANNELS, HB_COUNT, SL_LAYERS};
use super::params::cb_stages;
use crate::error::Result;

const fn conv_params(cin: usize, cout: usize) -> usize {
    cin * cout * 9 + cout
}

const fn dense_params(a: usize, b: usize) -> usize {
    a * b + b
}

fn dynamic_params(k: usize) -> usize {
    let hidden = CHANNELS / 4;
    k * conv_params(CHANNELS, CHANNELS) + dense_params(CHANNELS, hidden) + dense_params(hidden, k)
}

/// Exact parameter count by the closed-form rules above.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let mut total = 0;
    match config.variant.block_layout() {
        None => total += conv_params(3, CHANNELS) + 5 * conv_params(CHANNELS, CHANNELS),
        Some(layout) => {
            let block: usize = layout
                .iter()
                .map(|(_, kind)| match kind {
                    CruKind::Plain | CruKind::Dilated => conv_params(CHANNELS, CHANNELS),
                    CruKind::Dynamic => dynamic_params(config.kernels),
                })
                .sum();
            total += conv_params(3, CHANNELS) + HB_COUNT * block;
        }
    }
    if config.variant.has_lower() {
        total += conv_params(3, CHANNELS) + (SL_LAYERS - 1) * conv_params(CHANNELS, CHANNELS);
    }
    for (cin, cout, _) in cb_stages(config)? {
        total += conv_params(cin, cout);
    }
    total += conv_params(CHANNELS, 3);
    Ok(total)
}

/// FLOPs of one 3x3 convolution at `h x w`.
pub fn conv_flops(cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    2 * (cin * cout * 9) as u64 * (h * w) as u64
}

/// Estimated FLOPs to produce one `out_h x out_w` image (LR input `out / scale`).
pub fn estimate_flops(config: &ModelConfig, out_h: usize, out_w: usize) -> Result<u64> {
    config.validate()?;
    let s = config.scale;
    let (h, w) = (out_h / s, out_w / s);
    if h == 0 || w == 0 {
        return Ok(0);
    }
    let plain = conv_flops(CHANNELS, CHANNELS, h, w);
    let first = conv_flops(3, CHANNELS, h, w);
    let mut total = 0u64;
    match config.variant.block_layout() {
        None => total += first + 5 * plain,
        Some(layout) => {
            let hidden = CHANNELS / 4;
            let attn = 2 * (CHANNELS * hidden + hidden * config.kernels) as u64;
            let block: u64 = layout
                .iter()
                .map(|(_, kind)| match kind {
                    CruKind::Dynamic => plain + attn,
                    _ => plain,
                })
                .sum();
            total += first + HB_COUNT as u64 * block;
        }
    }
    if config.variant.has_lower() {
        total += first + (SL_LAYERS as u64 - 1) * plain;
    }
    let (mut ch, mut cw) = (h, w);
    for (cin, cout, factor) in cb_stages(config)? {
        total += conv_flops(cin, cout, ch, cw);
        ch *= factor;
        cw *= factor;
    }
    total += conv_flops(CHANNELS, 3, ch, cw);
    Ok(total)
}

/// Convolution layers on the deepest input-to-output path; the parallel
/// branches run side by side and a dynamic layer counts once.
pub fn conv_layer_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let upper = match config.variant.block_layout() {
        None => 6,
        Some(layout) => 1 + HB_COUNT * layout.len(),
    };
    let lower = if config.variant.has_lower() { SL_LAYERS } else { 0 };
    Ok(upper.max(lower) + cb_stages(config)?.len() + 1)
}
