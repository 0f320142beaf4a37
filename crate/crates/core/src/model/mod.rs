//! Network assembly: configuration, parameters, wiring and accounting.

mod accounting;
mod config;
pub mod network;
mod params;

pub use accounting::{conv_flops, conv_layer_count, count_parameters, estimate_flops};
pub use config::{CruKind, Fusion, ModelConfig, Variant, CHANNELS, HB_COUNT, SL_LAYERS};
pub use network::adsrnet_forward;
pub use params::{cb_stages, parameter_specs, Bindings, Init, ParamSpec, ParameterSet};

use crate::backend::{Eager, Tape};
use crate::dynamic::TemperatureSchedule;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParameterSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds the network described by `config` with seeded initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self { config, params: ParameterSet::init(&config, seed)? })
    }

    pub fn from_params(config: ModelConfig, params: ParameterSet<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Eager forward pass with no gradient bookkeeping.
    pub fn infer(&self, input: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
        let mut eager = Eager::new(&self.params);
        let x = eager.input(input.clone());
        Ok(adsrnet_forward(&mut eager, &self.config, &x, tau)?.into_tensor())
    }

    /// Inference at the end-of-schedule temperature.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(input, TemperatureSchedule::DEFAULT_END)
    }

    /// Records a forward pass on `graph`, binding every parameter as a
    /// trainable leaf. Returns the bindings and the output node.
    pub fn forward_on(&self, graph: &mut Graph<T>, input: Var, tau: f64) -> Result<(Bindings, Var)> {
        let bindings = self.params.bind(graph, true);
        let out = {
            let mut tape = Tape::new(graph, &bindings.map);
            adsrnet_forward(&mut tape, &self.config, &input, tau)?
        };
        Ok((bindings, out))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config, params: self.params.cast() }
    }
}

/// Constructs any variant; the returned model's forward is [`Model::infer`] /
/// [`Model::forward_on`].
pub fn build_variant<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    Model::new(*config, seed)
}
