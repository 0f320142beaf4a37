//! Flat `key=value` run configuration.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Later
//! assignments win, so command-line overrides are applied with [`RunConfig::set`]
//! after the file. Unknown keys are rejected.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{Channel, EvalProtocol};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, train_split: "train".into(), val_split: "val".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalProtocol,
    pub seed: u64,
}

pub const KEYS: &[&str] = &[
    "data.root",
    "data.train_split",
    "data.val_split",
    "eval.border",
    "eval.channel",
    "eval.peak",
    "model.fusion",
    "model.k",
    "model.scale",
    "model.variant",
    "seed",
    "train.batch_size",
    "train.beta1",
    "train.beta2",
    "train.checkpoint_interval",
    "train.eps",
    "train.hflip",
    "train.lr_halving_period",
    "train.lr_initial",
    "train.patch_lr",
    "train.rot90",
    "train.tau_end",
    "train.tau_fraction",
    "train.tau_start",
    "train.total_steps",
    "train.vflip",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "model.scale" => self.model.scale = parse(key, value)?,
            "model.variant" => self.model.variant = value.parse()?,
            "model.k" => self.model.kernels = parse(key, value)?,
            "model.fusion" => self.model.fusion = value.parse()?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr_initial" => t.lr_initial = parse(key, value)?,
            "train.lr_halving_period" => t.lr_halving_period = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.total_steps" => t.total_steps = parse(key, value)?,
            "train.patch_lr" => t.patch_lr = parse(key, value)?,
            "train.hflip" => t.hflip = parse(key, value)?,
            "train.vflip" => t.vflip = parse(key, value)?,
            "train.rot90" => t.rot90 = parse(key, value)?,
            "train.checkpoint_interval" => t.checkpoint_interval = parse(key, value)?,
            "train.tau_start" => t.tau_start = parse(key, value)?,
            "train.tau_end" => t.tau_end = parse(key, value)?,
            "train.tau_fraction" => t.tau_fraction = parse(key, value)?,
            "data.root" => self.data.root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.train_split" => self.data.train_split = value.to_string(),
            "data.val_split" => self.data.val_split = value.to_string(),
            "eval.channel" => self.eval.channel = value.parse::<Channel>()?,
            "eval.border" => {
                self.eval.border = if value == "scale" { None } else { Some(parse(key, value)?) };
            }
            "eval.peak" => self.eval.peak = parse(key, value)?,
            "seed" => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.eval.peak > 0.0) {
            return Err(Error::Config("eval.peak must be positive".into()));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "model.scale" => self.model.scale.to_string(),
            "model.variant" => self.model.variant.to_string(),
            "model.k" => self.model.kernels.to_string(),
            "model.fusion" => self.model.fusion.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr_initial" => t.lr_initial.to_string(),
            "train.lr_halving_period" => t.lr_halving_period.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.total_steps" => t.total_steps.to_string(),
            "train.patch_lr" => t.patch_lr.to_string(),
            "train.hflip" => t.hflip.to_string(),
            "train.vflip" => t.vflip.to_string(),
            "train.rot90" => t.rot90.to_string(),
            "train.checkpoint_interval" => t.checkpoint_interval.to_string(),
            "train.tau_start" => t.tau_start.to_string(),
            "train.tau_end" => t.tau_end.to_string(),
            "train.tau_fraction" => t.tau_fraction.to_string(),
            "data.root" => self.data.root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "data.train_split" => self.data.train_split.clone(),
            "data.val_split" => self.data.val_split.clone(),
            "eval.channel" => self.eval.channel.to_string(),
            "eval.border" => self.eval.border.map(|b| b.to_string()).unwrap_or_else(|| "scale".into()),
            "eval.peak" => self.eval.peak.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Every key in sorted order, one `key=value` per line. Parsing the
    /// result gives back the same configuration.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.get(k).expect("known key"))).collect()
    }
}
