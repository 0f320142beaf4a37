//! Dynamic convolution: each input aggregates its own 3x3 kernel as a convex
//! combination of `K` candidates, weighted by a small attention branch
//! (global pool, squeeze dense, ReLU, excite dense, tempered softmax).

use crate::backend::Backend;
use crate::conv::{ConvSpec, WeightSharing};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape};

/// Shape of one dynamic layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DynamicSpec {
    pub channels: usize,
    /// Number of candidate kernels `K`.
    pub kernels: usize,
    /// Squeeze ratio of the attention branch (`channels -> channels / reduction`).
    pub reduction: usize,
}

impl DynamicSpec {
    pub const DEFAULT_KERNELS: usize = 4;
    pub const DEFAULT_REDUCTION: usize = 4;

    pub fn new(channels: usize, kernels: usize) -> Self {
        Self { channels, kernels, reduction: Self::DEFAULT_REDUCTION }
    }

    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction).max(1)
    }

    pub fn candidate(&self) -> ConvSpec {
        ConvSpec::new(self.channels, self.channels, 1)
    }

    pub fn squeeze_weight_shape(&self) -> Shape {
        Shape::new(self.hidden(), self.channels, 1, 1)
    }

    pub fn excite_weight_shape(&self) -> Shape {
        Shape::new(self.kernels, self.hidden(), 1, 1)
    }

    /// `K` candidate convs plus both dense layers.
    pub fn param_count(&self) -> usize {
        let dense = |a: usize, b: usize| a * b + b;
        self.kernels * self.candidate().param_count()
            + dense(self.channels, self.hidden())
            + dense(self.hidden(), self.kernels)
    }
}

/// Parameter names of a dynamic layer rooted at `prefix`.
pub mod names {
    pub fn kernel_weight(prefix: &str, k: usize) -> String {
        format!("{prefix}.kernel{k}.weight")
    }
    pub fn kernel_bias(prefix: &str, k: usize) -> String {
        format!("{prefix}.kernel{k}.bias")
    }
    pub fn squeeze_weight(prefix: &str) -> String {
        format!("{prefix}.attn.squeeze.weight")
    }
    pub fn squeeze_bias(prefix: &str) -> String {
        format!("{prefix}.attn.squeeze.bias")
    }
    pub fn excite_weight(prefix: &str) -> String {
        format!("{prefix}.attn.excite.weight")
    }
    pub fn excite_bias(prefix: &str) -> String {
        format!("{prefix}.attn.excite.bias")
    }
}

/// Attention vector `(N, K, 1, 1)` of the layer at `prefix`.
pub fn attention<T: Scalar, B: Backend<T>>(b: &mut B, prefix: &str, x: &B::Value, tau: f64) -> Result<B::Value> {
    let pooled = b.global_avg_pool(x)?;
    let sw = b.param(&names::squeeze_weight(prefix))?;
    let sb = b.param(&names::squeeze_bias(prefix))?;
    let hidden = b.linear(&pooled, &sw, &sb)?;
    let hidden = b.relu(&hidden)?;
    let ew = b.param(&names::excite_weight(prefix))?;
    let eb = b.param(&names::excite_bias(prefix))?;
    let logits = b.linear(&hidden, &ew, &eb)?;
    b.softmax_temperature(&logits, tau)
}

/// Forward pass of the dynamic convolution (no activation).
pub fn dynamic_conv<T: Scalar, B: Backend<T>>(
    b: &mut B,
    prefix: &str,
    x: &B::Value,
    kernels: usize,
    tau: f64,
) -> Result<B::Value> {
    if kernels == 0 {
        return Err(Error::InvalidArgument("dynamic convolution needs at least one kernel".into()));
    }
    let pi = attention(b, prefix, x, tau)?;
    let weights = (0..kernels).map(|k| b.param(&names::kernel_weight(prefix, k))).collect::<Result<Vec<_>>>()?;
    let biases = (0..kernels).map(|k| b.param(&names::kernel_bias(prefix, k))).collect::<Result<Vec<_>>>()?;
    let w = b.mix_kernels(&pi, &weights)?;
    let bias = b.mix_kernels(&pi, &biases)?;
    b.conv2d(x, &w, &bias, 1, WeightSharing::PerItem)
}

/// Linear temperature annealing from `tau_start` to `tau_end` over
/// `anneal_steps`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_steps: u64,
}

impl TemperatureSchedule {
    pub const DEFAULT_START: f64 = 30.0;
    pub const DEFAULT_END: f64 = 1.0;
    pub const DEFAULT_FRACTION: f64 = 0.1;

    pub fn new(tau_start: f64, tau_end: f64, anneal_steps: u64) -> Result<Self> {
        let s = Self { tau_start, tau_end, anneal_steps };
        s.validate()?;
        Ok(s)
    }

    /// Anneals over `fraction` of `total_steps` (at least one step).
    pub fn for_run(tau_start: f64, tau_end: f64, fraction: f64, total_steps: u64) -> Result<Self> {
        let steps = ((total_steps as f64) * fraction).ceil().max(1.0) as u64;
        Self::new(tau_start, tau_end, steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) || !self.tau_start.is_finite() || !self.tau_end.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperatures must be positive, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.anneal_steps == 0 {
            return Err(Error::InvalidArgument("anneal_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn at(&self, step: u64) -> f64 {
        if step >= self.anneal_steps {
            return self.tau_end;
        }
        let t = step as f64 / self.anneal_steps as f64;
        self.tau_start + (self.tau_end - self.tau_start) * t
    }
}

/// Temperature at `step` under `schedule`.
pub fn temperature_at(step: u64, schedule: &TemperatureSchedule) -> Result<f64> {
    schedule.validate()?;
    Ok(schedule.at(step))
}
