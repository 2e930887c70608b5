//! The embedding network mapping a sensor window to a point in metric space.
//!
//! Two architectures are available. `Dense` flattens the window and applies
//! fully connected layers. `TemporalConv` runs a stack of valid-padding 1-D
//! convolutions over time before the dense head. In both, hidden layers use
//! the configured activation and the final projection to the embedding is
//! linear.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{stack_windows, InputSpec, LabeledBatch, Window};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Dense {
        hidden: Vec<usize>,
    },
    TemporalConv {
        filters: usize,
        kernel: usize,
        conv_layers: usize,
        hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub activation: Activation,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Dense { hidden: vec![128] },
            activation: Activation::Relu,
            embedding_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    /// Weight `[in, out]`, bias `[out]`.
    Dense { inputs: usize, outputs: usize, activate: bool },
    /// Weight `[out, in, kernel]`, bias `[out]`.
    Conv { in_channels: usize, length: usize, filters: usize, kernel: usize },
}

impl Layer {
    fn param_shapes(&self) -> [Vec<usize>; 2] {
        match *self {
            Layer::Dense { inputs, outputs, .. } => [vec![inputs, outputs], vec![outputs]],
            Layer::Conv { in_channels, filters, kernel, .. } => [vec![filters, in_channels, kernel], vec![filters]],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Conv { in_channels, kernel, .. } => in_channels * kernel,
        }
    }
}

fn plan(input: InputSpec, config: &EncoderConfig) -> Result<Vec<Layer>> {
    if config.embedding_dim == 0 {
        return Err(contract!("embedding dimension must be positive"));
    }
    if input.channels == 0 || input.timesteps == 0 {
        return Err(contract!("input spec must have at least one channel and one timestep"));
    }
    let mut layers = Vec::new();
    let mut width = input.width();
    let hidden = match &config.architecture {
        Architecture::Dense { hidden } => hidden,
        Architecture::TemporalConv { filters, kernel, conv_layers, hidden } => {
            let (mut channels, mut length) = (input.channels, input.timesteps);
            if *filters == 0 || *kernel == 0 {
                return Err(contract!("convolution needs positive filters and kernel"));
            }
            for _ in 0..*conv_layers {
                if *kernel > length {
                    return Err(contract!("kernel {} longer than remaining sequence {}", kernel, length));
                }
                layers.push(Layer::Conv { in_channels: channels, length, filters: *filters, kernel: *kernel });
                channels = *filters;
                length = length - kernel + 1;
            }
            width = channels * length;
            hidden
        }
    };
    for &h in hidden {
        if h == 0 {
            return Err(contract!("hidden layer width must be positive"));
        }
        layers.push(Layer::Dense { inputs: width, outputs: h, activate: true });
        width = h;
    }
    layers.push(Layer::Dense { inputs: width, outputs: config.embedding_dim, activate: false });
    Ok(layers)
}

/// Encoder parameters θ together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    input: InputSpec,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
}

impl Encoder {
    /// Draws weights from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`; biases start at zero.
    pub fn init(input: InputSpec, config: EncoderConfig, seed: u64) -> Result<Self> {
        let layers = plan(input, &config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.len() * 2);
        for layer in &layers {
            let [ws, bs] = layer.param_shapes();
            let bound = libm::sqrt(6.0 / layer.fan_in() as f64);
            let n: usize = ws.iter().product();
            let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Tensor::new(ws, w)?);
            params.push(Tensor::zeros(bs));
        }
        Ok(Self { config, input, layers, params })
    }

    /// Builds an encoder from explicit parameters, checking every shape.
    pub fn from_params(input: InputSpec, config: EncoderConfig, params: Vec<Tensor>) -> Result<Self> {
        let layers = plan(input, &config)?;
        if params.len() != layers.len() * 2 {
            return Err(contract!("expected {} parameter tensors, got {}", layers.len() * 2, params.len()));
        }
        for (i, layer) in layers.iter().enumerate() {
            let shapes = layer.param_shapes();
            for k in 0..2 {
                if params[2 * i + k].shape() != shapes[k].as_slice() {
                    return Err(contract!(
                        "parameter {} has shape {:?}, expected {:?}",
                        2 * i + k,
                        params[2 * i + k].shape(),
                        shapes[k]
                    ));
                }
            }
        }
        Ok(Self { config, input, layers, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Appends the forward pass for the `n × width` input `x` to `g`, using
    /// `params` (leaves created from [`Encoder::params`]). Returns `n × d`.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(contract!("forward given {} parameter handles, encoder has {}", params.len(), self.params.len()));
        }
        let width = g.shape(x).get(1).copied().unwrap_or(0);
        if g.shape(x).len() != 2 || width != self.input.width() {
            return Err(contract!("encoder input has shape {:?}, expected n x {}", g.shape(x), self.input.width()));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = (params[2 * i], params[2 * i + 1]);
            h = match *layer {
                Layer::Conv { in_channels, length, .. } => {
                    let y = g.conv1d(h, w, b, in_channels, length)?;
                    self.activate(g, y)?
                }
                Layer::Dense { activate, .. } => {
                    let y = g.matmul(h, w)?;
                    let y = g.add_row(y, b)?;
                    if activate {
                        self.activate(g, y)?
                    } else {
                        y
                    }
                }
            };
        }
        Ok(h)
    }

    fn activate(&self, g: &mut Graph, y: Var) -> Result<Var> {
        match self.config.activation {
            Activation::Relu => g.relu(y),
            Activation::Tanh => g.tanh(y),
        }
    }

    /// Embeds an `n × width` matrix of windows, returning an `n × d` tensor.
    pub fn embed_matrix(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() == 0 {
            return Err(contract!("cannot embed an empty batch"));
        }
        let mut g = Graph::new();
        let vars = self.params.iter().map(|p| g.input(p)).collect::<Result<Vec<_>>>()?;
        let xv = g.input(x)?;
        let out = self.forward(&mut g, &vars, xv)?;
        Ok(g.to_tensor(out))
    }

    pub fn embed<'a>(&self, windows: impl IntoIterator<Item = &'a Window>) -> Result<Tensor> {
        self.embed_matrix(&stack_windows(windows, self.input)?)
    }

    pub fn embed_batch(&self, batch: &LabeledBatch) -> Result<Tensor> {
        self.embed(batch.iter().map(|s| &s.window))
    }
}
