use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Feature width of every hidden layer.
pub const CHANNELS: usize = 64;
/// Heterogeneous blocks in the upper sub-network.
pub const HB_COUNT: usize = 5;
/// Layers in the symmetric lower sub-network.
pub const SL_LAYERS: usize = 16;

/// Architecture variants: the full network and its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Upper and lower sub-networks, fused, then the construction block.
    Full,
    /// Six stacked CRUs and a construction block.
    SixCruCb,
    /// Upper sub-network whose blocks keep only the plain CRU.
    HbPlain,
    /// Upper sub-network without the dynamic CRU.
    HbNoDynamic,
    /// Upper sub-network without the dilated CRU.
    HbNoDilated,
    /// Upper sub-network with a plain CRU in place of the dilated one.
    HbCruForDilated,
    /// Upper sub-network with a plain CRU in place of the dynamic one.
    HbCruForDynamic,
    /// Upper sub-network and a construction block.
    HunetOnly,
    /// Full network with the lower sub-network's skip additions removed.
    NoSlResidual,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::SixCruCb,
        Variant::HbPlain,
        Variant::HbNoDynamic,
        Variant::HbNoDilated,
        Variant::HbCruForDilated,
        Variant::HbCruForDynamic,
        Variant::HunetOnly,
        Variant::NoSlResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SixCruCb => "six_cru_cb",
            Variant::HbPlain => "hb_plain",
            Variant::HbNoDynamic => "hb_no_dynamic",
            Variant::HbNoDilated => "hb_no_dilated",
            Variant::HbCruForDilated => "hb_cru_for_dilated",
            Variant::HbCruForDynamic => "hb_cru_for_dynamic",
            Variant::HunetOnly => "hunet_only",
            Variant::NoSlResidual => "no_sl_residual",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::Full => "full network",
            Variant::SixCruCb => "six stacked CRUs and a CB",
            Variant::HbPlain => "upper sub-network without dilated CRU, dynamic CRU and a CB",
            Variant::HbNoDynamic => "upper sub-network without dynamic CRU and a CB",
            Variant::HbNoDilated => "upper sub-network without dilated CRU and a CB",
            Variant::HbCruForDilated => "upper sub-network with CRU rather than dilated CRU",
            Variant::HbCruForDynamic => "upper sub-network with CRU rather than dynamic CRU",
            Variant::HunetOnly => "upper sub-network and a CB",
            Variant::NoSlResidual => "full network without residual learning in the lower sub-network",
        }
    }

    /// Whether the lower sub-network (and hence fusion) is present.
    pub fn has_lower(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSlResidual)
    }

    pub fn lower_residual(self) -> bool {
        matches!(self, Variant::Full)
    }

    /// CRU layout inside each heterogeneous block, as `(slot name, kind)`.
    /// `None` for the plain stacked variant, which has no blocks.
    pub fn block_layout(self) -> Option<Vec<(&'static str, CruKind)>> {
        use CruKind::*;
        let layout = match self {
            Variant::SixCruCb => return None,
            Variant::Full | Variant::HunetOnly | Variant::NoSlResidual => {
                vec![("dilated", Dilated), ("dynamic", Dynamic), ("plain", Plain)]
            }
            Variant::HbPlain => vec![("plain", Plain)],
            Variant::HbNoDynamic => vec![("dilated", Dilated), ("plain", Plain)],
            Variant::HbNoDilated => vec![("dynamic", Dynamic), ("plain", Plain)],
            Variant::HbCruForDilated => vec![("plain0", Plain), ("dynamic", Dynamic), ("plain", Plain)],
            Variant::HbCruForDynamic => vec![("dilated", Dilated), ("plain0", Plain), ("plain", Plain)],
        };
        Some(layout)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CruKind {
    Plain,
    /// Dilation 2, padding 2.
    Dilated,
    Dynamic,
}

/// How the two sub-network outputs are combined before the construction block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Fusion {
    /// Elementwise product (64 channels).
    #[default]
    Multiply,
    /// Channel concatenation (128 channels).
    Concat,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Multiply => "multiply",
            Fusion::Concat => "concat",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiply" => Ok(Fusion::Multiply),
            "concat" => Ok(Fusion::Concat),
            other => Err(Error::Config(format!("unknown fusion mode `{other}` (expected multiply or concat)"))),
        }
    }
}

/// Everything needed to rebuild an identical network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub scale: usize,
    pub variant: Variant,
    /// Candidate kernels per dynamic layer.
    pub kernels: usize,
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { scale: 2, variant: Variant::Full, kernels: 4, fusion: Fusion::Multiply }
    }
}

impl ModelConfig {
    pub fn new(scale: usize, variant: Variant) -> Self {
        Self { scale, variant, ..Self::default() }
    }

    pub fn with_kernels(mut self, k: usize) -> Self {
        self.kernels = k;
        self
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2..=4) {
            return Err(Error::UnsupportedScale(self.scale));
        }
        if self.kernels == 0 {
            return Err(Error::Config("model.k must be at least 1".into()));
        }
        Ok(())
    }

    /// Channels entering the construction block.
    pub fn cb_in_channels(&self) -> usize {
        if self.variant.has_lower() && self.fusion == Fusion::Concat {
            2 * CHANNELS
        } else {
            CHANNELS
        }
    }

    /// Sorted `key=value` lines; the input to [`ModelConfig::fingerprint`].
    pub fn canonical_text(&self) -> String {
        format!(
            "model.fusion={}\nmodel.k={}\nmodel.scale={}\nmodel.variant={}\n",
            self.fusion, self.kernels, self.scale, self.variant
        )
    }

    /// 64-bit FNV-1a of the canonical text.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(self.canonical_text().as_bytes());
        h.finish()
    }

    /// Recovers the configuration behind a checkpoint fingerprint by searching
    /// every scale, variant and fusion mode with up to `max_kernels` kernels.
    pub fn identify(fingerprint: u64, max_kernels: usize) -> Option<ModelConfig> {
        for scale in 2..=4 {
            for variant in Variant::ALL {
                for fusion in [Fusion::Multiply, Fusion::Concat] {
                    for kernels in 1..=max_kernels {
                        let c = ModelConfig { scale, variant, kernels, fusion };
                        if c.fingerprint() == fingerprint {
                            return Some(c);
                        }
                    }
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("nope".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn fingerprint_distinguishes_configs() {
        let a = ModelConfig::default();
        let b = ModelConfig::new(3, Variant::Full);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), ModelConfig::default().fingerprint());
        assert_eq!(ModelConfig::identify(b.fingerprint(), 8), Some(b));
    }

    #[test]
    fn canonical_text_is_sorted() {
        let text = ModelConfig::default().canonical_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn scale_validated() {
        assert!(matches!(ModelConfig::new(5, Variant::Full).validate(), Err(Error::UnsupportedScale(5))));
        assert!(ModelConfig::new(4, Variant::Full).validate().is_ok());
    }
}
