//! MAE loss, Adam with step decay, patch sampling and the training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{ImagePair, RgbImage};
use crate::dynamic::TemperatureSchedule;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ParameterSet};
use crate::ops;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_halving_period: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: u64,
    /// LR patch side; the HR patch is `scale` times larger.
    pub patch_lr: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
    pub seed: u64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Fraction of `total_steps` over which the temperature anneals.
    pub tau_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr_initial: 1e-4,
            lr_halving_period: 300_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 10_000,
            patch_lr: 48,
            hflip: true,
            vflip: true,
            rot90: true,
            seed: 0,
            checkpoint_interval: 1_000,
            tau_start: TemperatureSchedule::DEFAULT_START,
            tau_end: TemperatureSchedule::DEFAULT_END,
            tau_fraction: TemperatureSchedule::DEFAULT_FRACTION,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if self.patch_lr == 0 {
            return bad("train.patch_lr must be at least 1");
        }
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return bad("train.lr_initial must be finite and non-negative");
        }
        if self.lr_halving_period == 0 {
            return bad("train.lr_halving_period must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("train.eps must be positive");
        }
        if !(self.tau_fraction > 0.0 && self.tau_fraction <= 1.0) {
            return bad("train.tau_fraction must lie in (0, 1]");
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<TemperatureSchedule> {
        TemperatureSchedule::for_run(self.tau_start, self.tau_end, self.tau_fraction, self.total_steps)
    }

    pub fn augment(&self) -> Augment {
        Augment { hflip: self.hflip, vflip: self.vflip, rot90: self.rot90 }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// `lr_initial * 0.5^floor(step / lr_halving_period)`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let halvings = step / config.lr_halving_period;
    config.lr_initial * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
}

/// Mean absolute error over every element.
pub fn mae_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    ops::mean_abs_error(pred, target)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Scalar = f32> {
    pub name: String,
    pub shape: Shape,
    pub first: Vec<T>,
    pub second: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    /// Number of updates applied so far.
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zeroed moments for every parameter, in parameter order.
    pub fn new(params: &ParameterSet<T>) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| Moments {
                name: name.to_string(),
                shape: t.shape(),
                first: vec![T::zero(); t.len()],
                second: vec![T::zero(); t.len()],
            })
            .collect();
        Self { step: 0, moments }
    }

    /// Checks that the buffers line up with `params` by name and shape.
    pub fn check_against(&self, params: &ParameterSet<T>) -> Result<()> {
        if self.moments.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer has {} moment entries for {} parameters",
                self.moments.len(),
                params.len()
            )));
        }
        for (m, (name, t)) in self.moments.iter().zip(params.iter()) {
            if m.name != name {
                return Err(Error::Checkpoint(format!("optimizer entry `{}` where `{name}` was expected", m.name)));
            }
            if m.shape != t.shape() || m.first.len() != t.len() || m.second.len() != t.len() {
                return Err(Error::ParameterShape { name: m.name.clone(), expected: t.shape(), actual: m.shape });
            }
        }
        Ok(())
    }
}

/// One Adam update. `grads` is in parameter order; a missing entry is an error
/// naming the parameter. With `t = step + 1`:
///
/// ```text
/// m = b1 m + (1 - b1) g
/// v = b2 v + (1 - b2) g^2
/// p -= lr * sqrt(1 - b2^t) / (1 - b1^t) * m / (sqrt(v) + eps)
/// ```
pub fn adam_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &[Option<Vec<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
    adam: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    state.check_against(params)?;
    if let Some((name, _)) = params.iter().zip(grads).find(|(_, g)| g.is_none()).map(|(p, g)| (p.0, g)) {
        return Err(Error::MissingGradient(name.to_string()));
    }
    let t = (state.step + 1) as i32;
    let step_size = T::from_f64_lossy(lr * (1.0 - adam.beta2.powi(t)).sqrt() / (1.0 - adam.beta1.powi(t)));
    let (b1, b2, eps) = (T::from_f64_lossy(adam.beta1), T::from_f64_lossy(adam.beta2), T::from_f64_lossy(adam.eps));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    for (((_, p), g), m) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        let g = g.as_deref().expect("checked above");
        let p = p.data_mut();
        for i in 0..p.len() {
            let gi = g[i];
            m.first[i] = b1 * m.first[i] + c1 * gi;
            m.second[i] = b2 * m.second[i] + c2 * gi * gi;
            p[i] = p[i] - step_size * m.first[i] / (m.second[i].sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Augmentations, each applied with probability 1/2 when enabled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Augment {
    pub const NONE: Augment = Augment { hflip: false, vflip: false, rot90: false };
    pub const ALL: Augment = Augment { hflip: true, vflip: true, rot90: true };
}

/// A drawn crop position (LR pixels) and the augmentations to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchDraw {
    pub x: usize,
    pub y: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl PatchDraw {
    /// Uniform offset over every valid `patch x patch` position of a `w x h` image.
    pub fn sample(w: usize, h: usize, patch: usize, augment: Augment, rng: &mut impl Rng) -> Result<Self> {
        if w < patch || h < patch {
            return Err(Error::InvalidArgument(format!("{w}x{h} LR image is smaller than a {patch}x{patch} patch")));
        }
        let x = rng.random_range(0..=w - patch);
        let y = rng.random_range(0..=h - patch);
        let hflip = augment.hflip && rng.random_bool(0.5);
        let vflip = augment.vflip && rng.random_bool(0.5);
        let rot90 = augment.rot90 && rng.random_bool(0.5);
        Ok(Self { x, y, hflip, vflip, rot90 })
    }

    fn apply(&self, img: &RgbImage, factor: usize, patch: usize) -> RgbImage {
        let s = factor as u32;
        let side = (patch * factor) as u32;
        let mut out = imageops::crop_imm(img, self.x as u32 * s, self.y as u32 * s, side, side).to_image();
        if self.hflip {
            imageops::flip_horizontal_in_place(&mut out);
        }
        if self.vflip {
            imageops::flip_vertical_in_place(&mut out);
        }
        if self.rot90 {
            out = imageops::rotate90(&out);
        }
        out
    }

    /// Cuts the LR patch and the aligned HR patch at `scale * (x, y)`.
    pub fn cut(&self, pair: &ImagePair, patch: usize) -> (RgbImage, RgbImage) {
        (self.apply(&pair.lr, 1, patch), self.apply(&pair.hr, pair.scale, patch))
    }
}

/// Random aligned `(LR, HR)` patch pair with identical augmentation.
pub fn sample_patch(
    pair: &ImagePair,
    patch_lr: usize,
    augment: Augment,
    rng: &mut impl Rng,
) -> Result<(RgbImage, RgbImage)> {
    let (w, h) = (pair.lr.width() as usize, pair.lr.height() as usize);
    if pair.hr.width() as usize != w * pair.scale || pair.hr.height() as usize != h * pair.scale {
        return Err(Error::InvalidArgument(format!(
            "{}: HR dimensions are not {} times the LR dimensions",
            pair.source.display(),
            pair.scale
        )));
    }
    let draw = PatchDraw::sample(w, h, patch_lr, augment, rng)?;
    Ok(draw.cut(pair, patch_lr))
}

/// Stacks equally sized RGB images into an `(N, 3, H, W)` tensor in `[0, 1]`.
pub fn batch_tensor<T: Scalar>(images: &[RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.dimensions() != first.dimensions() {
            return Err(Error::InvalidArgument("batch images differ in size".into()));
        }
        let t = crate::data::image_to_tensor::<T>(img);
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape::new(images.len(), 3, h, w), data)
}

/// RNG of one training step; independent of how many steps ran before, so a
/// resumed run draws the same batches.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!("{}\t{:.9e}\t{:e}\t{}\n", self.step, self.loss, self.lr, self.tau)
    }
}

pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub state: OptimizerState<f32>,
    schedule: TemperatureSchedule,
    data: Vec<ImagePair>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, data: Vec<ImagePair>) -> Result<Self> {
        let state = OptimizerState::new(&model.params);
        Self::with_state(model, config, data, state)
    }

    /// Continues from a training checkpoint (parameters plus optimizer state).
    pub fn resume(checkpoint: Checkpoint, model: &crate::model::ModelConfig, config: TrainConfig, data: Vec<ImagePair>) -> Result<Self> {
        checkpoint.expect_config(model)?;
        let state = checkpoint
            .optimizer
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        let model = Model::from_params(*model, checkpoint.params)?;
        Self::with_state(model, config, data, state)
    }

    fn with_state(model: Model<f32>, config: TrainConfig, data: Vec<ImagePair>, state: OptimizerState<f32>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if let Some(p) = data.iter().find(|p| p.scale != model.config.scale) {
            return Err(Error::Config(format!(
                "{} is a x{} pair but the model is x{}",
                p.source.display(),
                p.scale,
                model.config.scale
            )));
        }
        state.check_against(&model.params)?;
        let schedule = config.schedule()?;
        Ok(Self { model, config, state, schedule, data })
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.total_steps
    }

    /// The batch used at step `step`.
    pub fn batch(&self, step: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut rng = step_rng(self.config.seed, step);
        let augment = self.config.augment();
        let mut lrs = Vec::with_capacity(self.config.batch_size);
        let mut hrs = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let pair = &self.data[rng.random_range(0..self.data.len())];
            let (lr, hr) = sample_patch(pair, self.config.patch_lr, augment, &mut rng)?;
            lrs.push(lr);
            hrs.push(hr);
        }
        Ok((batch_tensor(&lrs)?, batch_tensor(&hrs)?))
    }

    /// Runs one iteration: sample, forward, loss, backward, update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let lr = lr_at(step, &self.config);
        let tau = self.schedule.at(step);
        let (input, target) = self.batch(step)?;
        let mut graph = Graph::new();
        let x = graph.constant(input);
        let (bindings, out) = self.model.forward_on(&mut graph, x, tau)?;
        let y = graph.constant(target);
        let loss_var = graph.mean_abs_error(out, y)?;
        let loss = graph.value(loss_var)[0] as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: step + 1, loss });
        }
        graph.backward(loss_var)?;
        let grads = bindings.take_grads(&mut graph);
        drop(graph);
        adam_step(&mut self.model.params, &grads, &mut self.state, lr, &self.config.adam())?;
        Ok(StepRecord { step: self.state.step, loss, lr, tau })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model).with_optimizer(self.state.clone())
    }

    /// Trains to `total_steps`. With `out_dir`, appends to `train.log`, writes
    /// `step_{n}.ckpt` every `checkpoint_interval` steps and `final.ckpt` at the end.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train.log");
                let f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let mut records = Vec::new();
        while !self.is_done() {
            let rec = self.step()?;
            if let Some((f, path)) = &mut log {
                f.write_all(rec.log_line().as_bytes()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_step(&rec);
            records.push(rec);
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_interval;
                if every > 0 && rec.step % every == 0 && !self.is_done() {
                    self.checkpoint().save(checkpoint_path(dir, Some(rec.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(checkpoint_path(dir, None))?;
        }
        Ok(records)
    }
}

/// `step_{n:08}.ckpt`, or `final.ckpt` for `None`.
pub fn checkpoint_path(dir: &Path, step: Option<u64>) -> PathBuf {
    match step {
        Some(n) => dir.join(format!("step_{n:08}.ckpt")),
        None => dir.join("final.ckpt"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_boundaries() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-4);
        assert_eq!(lr_at(299_999, &c), 1e-4);
        assert_eq!(lr_at(300_000, &c), 5e-5);
        assert_eq!(lr_at(600_000, &c), 2.5e-5);
    }

    #[test]
    fn step_rng_is_per_step() {
        let a: u64 = step_rng(7, 3).random();
        let b: u64 = step_rng(7, 3).random();
        let c: u64 = step_rng(7, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn log_line_is_tab_separated() {
        let r = StepRecord { step: 3, loss: 0.5, lr: 1e-4, tau: 30.0 };
        let line = r.log_line();
        assert_eq!(line.trim_end().split('\t').count(), 4);
        assert!(line.starts_with("3\t"));
    }
}
