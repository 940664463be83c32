//! Shared MLP decoder `f(x - center, z)`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FieldError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Linear,
    Tanh,
}

/// Decoder shape. Layer `l` (0-based, the output layer is `hidden.len()`)
/// receives the raw decoder input concatenated to its input when `l` is in
/// `skip_in`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub skip_in: Vec<usize>,
    #[serde(default)]
    pub output: OutputActivation,
}

impl Default for DecoderConfig {
    /// 4 hidden layers of width 128, 64-dimensional latents, linear output.
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden: vec![128; 4],
            skip_in: vec![],
            output: OutputActivation::Linear,
        }
    }
}

impl DecoderConfig {
    /// DeepSDF-sized decoder: 8 x 512, skip connection into layer 4,
    /// 256-dimensional latents, tanh output.
    pub fn deepsdf() -> Self {
        Self {
            latent_dim: 256,
            hidden: vec![512; 8],
            skip_in: vec![4],
            output: OutputActivation::Tanh,
        }
    }

    pub fn small(latent_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            latent_dim,
            hidden,
            skip_in: vec![],
            output: OutputActivation::Linear,
        }
    }

    pub fn input_dim(&self) -> usize {
        3 + self.latent_dim
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(inputs, outputs)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let prev = if l == 0 { 0 } else { self.hidden[l - 1] };
        let skip = if l == 0 || self.skip_in.contains(&l) {
            self.input_dim()
        } else {
            0
        };
        let out = if l == self.hidden.len() { 1 } else { self.hidden[l] };
        (prev + skip, out)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.hidden.contains(&0) {
            return Err(FieldError::Config("hidden widths must be > 0".into()));
        }
        if let Some(&l) = self
            .skip_in
            .iter()
            .find(|&&l| l == 0 || l > self.hidden.len())
        {
            return Err(FieldError::Config(format!(
                "skip connection into layer {l} is out of range 1..={}",
                self.hidden.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `outputs x inputs`, row-major.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    layers: Vec<DenseLayer>,
}

impl Decoder {
    pub fn from_layers(config: DecoderConfig, layers: Vec<DenseLayer>) -> Result<Self, FieldError> {
        config.validate()?;
        if layers.len() != config.num_layers() {
            return Err(FieldError::Config(format!(
                "decoder has {} layers, config expects {}",
                layers.len(),
                config.num_layers()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (i, o) = config.layer_shape(l);
            if layer.weight.dim() != (o, i) || layer.bias.len() != o {
                return Err(FieldError::Config(format!(
                    "layer {l} has weight {:?} and bias {}, expected ({o}, {i}) and {o}",
                    layer.weight.dim(),
                    layer.bias.len()
                )));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(FieldError::NonFinite(format!("decoder layer {l}")));
            }
        }
        Ok(Self { config, layers })
    }

    /// All weights and biases zero.
    pub fn zeros(config: DecoderConfig) -> Result<Self, FieldError> {
        let layers = (0..config.num_layers())
            .map(|l| {
                let (i, o) = config.layer_shape(l);
                DenseLayer {
                    weight: Array2::zeros((o, i)),
                    bias: Array1::zeros(o),
                }
            })
            .collect();
        Self::from_layers(config, layers)
    }

    /// Kaiming-normal hidden layers, a down-scaled output layer, zero biases.
    pub fn kaiming<R: Rng>(config: DecoderConfig, rng: &mut R) -> Result<Self, FieldError> {
        config.validate()?;
        let last = config.num_layers() - 1;
        let layers = (0..config.num_layers())
            .map(|l| {
                let (i, o) = config.layer_shape(l);
                let std = if l == last {
                    0.1 * (1.0 / i as f64).sqrt()
                } else {
                    (2.0 / i as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                DenseLayer {
                    weight: Array2::from_shape_simple_fn((o, i), || normal.sample(rng)),
                    bias: Array1::zeros(o),
                }
            })
            .collect();
        Self::from_layers(config, layers)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Forward pass for one input row `[x - center, z]`.
    pub fn eval(&self, input: &[f64]) -> f64 {
        assert_eq!(input.len(), self.input_dim(), "decoder input width");
        let last = self.layers.len() - 1;
        let mut h: Vec<f64> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let x: Vec<f64> = if l == 0 {
                input.to_vec()
            } else if self.config.skip_in.contains(&l) {
                h.iter().chain(input.iter()).copied().collect()
            } else {
                std::mem::take(&mut h)
            };
            let (o, _) = layer.weight.dim();
            h = (0..o)
                .map(|r| {
                    let row = layer.weight.row(r);
                    let z = layer.bias[r] + row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
                    if l == last {
                        match self.config.output {
                            OutputActivation::Linear => z,
                            OutputActivation::Tanh => z.tanh(),
                        }
                    } else {
                        z.max(0.0)
                    }
                })
                .collect();
        }
        h[0]
    }
}
