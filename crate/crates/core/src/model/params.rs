use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{CruKind, ModelConfig, CHANNELS, HB_COUNT, SL_LAYERS};
use crate::conv::ConvSpec;
use crate::dynamic::{names as dyn_names, DynamicSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with `std = sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, spec: ConvSpec) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: spec.weight_shape(),
        init: Init::HeNormal { fan_in: spec.in_channels * 9 },
    });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: spec.bias_shape(), init: Init::Zeros });
}

fn dynamic_specs(out: &mut Vec<ParamSpec>, prefix: &str, spec: DynamicSpec) {
    let cand = spec.candidate();
    for k in 0..spec.kernels {
        out.push(ParamSpec {
            name: dyn_names::kernel_weight(prefix, k),
            shape: cand.weight_shape(),
            init: Init::HeNormal { fan_in: cand.in_channels * 9 },
        });
        out.push(ParamSpec { name: dyn_names::kernel_bias(prefix, k), shape: cand.bias_shape(), init: Init::Zeros });
    }
    out.push(ParamSpec {
        name: dyn_names::squeeze_weight(prefix),
        shape: spec.squeeze_weight_shape(),
        init: Init::HeNormal { fan_in: spec.channels },
    });
    out.push(ParamSpec {
        name: dyn_names::squeeze_bias(prefix),
        shape: Shape::new(spec.hidden(), 1, 1, 1),
        init: Init::Zeros,
    });
    // Zero excite layer: attention starts exactly uniform.
    out.push(ParamSpec { name: dyn_names::excite_weight(prefix), shape: spec.excite_weight_shape(), init: Init::Zeros });
    out.push(ParamSpec {
        name: dyn_names::excite_bias(prefix),
        shape: Shape::new(spec.kernels, 1, 1, 1),
        init: Init::Zeros,
    });
}

/// Construction-block stages as `(conv in, conv out, shuffle factor)`.
pub fn cb_stages(config: &ModelConfig) -> Result<Vec<(usize, usize, usize)>> {
    let cin = config.cb_in_channels();
    match config.scale {
        s @ (2 | 3) => Ok(vec![(cin, CHANNELS * s * s, s)]),
        4 => Ok(vec![(cin, CHANNELS * 4, 2), (CHANNELS, CHANNELS * 4, 2)]),
        s => Err(Error::UnsupportedScale(s)),
    }
}

/// Ordered parameter list of a configuration.
pub fn parameter_specs(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let mut out = Vec::new();
    match config.variant.block_layout() {
        None => {
            conv_specs(&mut out, "stack.cru1", ConvSpec::new(3, CHANNELS, 1));
            for i in 2..=6 {
                conv_specs(&mut out, &format!("stack.cru{i}"), ConvSpec::new(CHANNELS, CHANNELS, 1));
            }
        }
        Some(layout) => {
            conv_specs(&mut out, "hunet.cru1", ConvSpec::new(3, CHANNELS, 1));
            for hb in 1..=HB_COUNT {
                for (slot, kind) in &layout {
                    let prefix = format!("hunet.hb{hb}.{slot}");
                    match kind {
                        CruKind::Plain => conv_specs(&mut out, &prefix, ConvSpec::new(CHANNELS, CHANNELS, 1)),
                        CruKind::Dilated => conv_specs(&mut out, &prefix, ConvSpec::new(CHANNELS, CHANNELS, 2)),
                        CruKind::Dynamic => dynamic_specs(&mut out, &prefix, DynamicSpec::new(CHANNELS, config.kernels)),
                    }
                }
            }
        }
    }
    if config.variant.has_lower() {
        conv_specs(&mut out, "slnet.l1", ConvSpec::new(3, CHANNELS, 1));
        for l in 2..=SL_LAYERS {
            conv_specs(&mut out, &format!("slnet.l{l}"), ConvSpec::new(CHANNELS, CHANNELS, 1));
        }
    }
    for (j, (cin, cout, _)) in cb_stages(config)?.into_iter().enumerate() {
        conv_specs(&mut out, &format!("cb.up{}.conv", j + 1), ConvSpec::new(cin, cout, 1));
    }
    conv_specs(&mut out, "cb.out", ConvSpec::new(CHANNELS, 3, 1));
    Ok(out)
}

/// Ordered, uniquely named set of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T: Scalar = f32> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self { params: IndexMap::new() }
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds freshly initialised parameters; identical for equal `(config, seed)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = Self::new();
        for spec in parameter_specs(config)? {
            let data = match spec.init {
                Init::Zeros => vec![T::zero(); spec.shape.numel()],
                Init::HeNormal { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    (0..spec.shape.numel()).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect()
                }
            };
            set.insert(spec.name, Tensor::from_vec(spec.shape, data)?)?;
        }
        Ok(set)
    }

    /// Parameters of `config` with every element zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut set = Self::new();
        for spec in parameter_specs(config)? {
            set.insert(spec.name, Tensor::zeros(spec.shape))?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Checks names and shapes against `config`, reporting the first mismatch.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let specs = parameter_specs(config)?;
        for spec in &specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape {
                return Err(Error::ParameterShape { name: spec.name.clone(), expected: spec.shape, actual: t.shape() });
            }
        }
        if let Some(extra) = self.names().find(|n| !specs.iter().any(|s| s.name == *n)) {
            return Err(Error::InvalidArgument(format!("unexpected parameter `{extra}` for {}", config.variant)));
        }
        Ok(())
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Bindings {
        let mut map = HashMap::with_capacity(self.len());
        let mut order = Vec::with_capacity(self.len());
        for (name, t) in self.iter() {
            let mut leaf = t.clone();
            leaf.zero_grad();
            let v = graph.leaf(leaf.requires_grad(requires_grad));
            map.insert(name.to_string(), v);
            order.push(v);
        }
        Bindings { map, order }
    }
}

/// Parameter-to-leaf table of one forward pass, in parameter order.
pub struct Bindings {
    pub map: HashMap<String, Var>,
    pub order: Vec<Var>,
}

impl Bindings {
    /// Gradients of all parameters after backward, in parameter order;
    /// `None` where backward never reached the parameter.
    pub fn take_grads<T: Scalar>(&self, graph: &mut Graph<T>) -> Vec<Option<Vec<T>>> {
        self.order.iter().map(|&v| graph.take_grad(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn names_unique_and_ordered() {
        for v in Variant::ALL {
            let specs = parameter_specs(&ModelConfig::new(2, v)).unwrap();
            let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let n = names.len();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), n, "{v}");
        }
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::default();
        let a = ParameterSet::<f32>::init(&c, 7).unwrap();
        let b = ParameterSet::<f32>::init(&c, 7).unwrap();
        assert_eq!(a, b);
        let d = ParameterSet::<f32>::init(&c, 8).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn excite_layers_start_at_zero() {
        let p = ParameterSet::<f32>::init(&ModelConfig::default(), 1).unwrap();
        for (name, t) in p.iter() {
            if name.contains("excite") || name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn check_against_reports_first_mismatch() {
        let c = ModelConfig::default();
        let p = ParameterSet::<f32>::init(&ModelConfig::new(3, Variant::Full), 1).unwrap();
        let err = p.check_against(&c).unwrap_err();
        assert!(err.to_string().contains("cb.up1.conv.weight"), "{err}");
        let q = ParameterSet::<f32>::init(&ModelConfig::new(2, Variant::HunetOnly), 1).unwrap();
        assert!(matches!(q.check_against(&c), Err(Error::MissingParameter(n)) if n == "slnet.l1.weight"));
    }
}
