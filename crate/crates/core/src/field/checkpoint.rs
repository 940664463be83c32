//! Versioned JSON checkpoint of a [`BasisField`].

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BasisField, Decoder, DecoderConfig, DenseLayer, FieldError, LocalBasis, OutputActivation};
use crate::geom::{Point3, Vec3};

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    /// Row-major `outputs x inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderDoc {
    /// Hidden layer widths.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub skip_in: Vec<usize>,
    #[serde(default)]
    pub output: OutputActivation,
    pub layers: Vec<LayerDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisDoc {
    pub mu: [f64; 3],
    pub z: Vec<f64>,
    pub s_raw: [f64; 3],
    pub r_raw: [f64; 6],
    pub delta: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldCheckpoint {
    pub version: u64,
    pub d_z: usize,
    pub decoder: DecoderDoc,
    pub bases: Vec<BasisDoc>,
}

impl FieldCheckpoint {
    pub fn from_field(field: &BasisField) -> Self {
        let c = field.decoder().config();
        Self {
            version: CHECKPOINT_VERSION,
            d_z: field.latent_dim(),
            decoder: DecoderDoc {
                widths: c.hidden.clone(),
                skip_in: c.skip_in.clone(),
                output: c.output,
                layers: field
                    .decoder()
                    .layers()
                    .iter()
                    .map(|l| LayerDoc {
                        weight: l.weight.iter().copied().collect(),
                        bias: l.bias.to_vec(),
                    })
                    .collect(),
            },
            bases: field
                .bases()
                .iter()
                .map(|b| BasisDoc {
                    mu: [b.mu.x, b.mu.y, b.mu.z],
                    z: b.z.clone(),
                    s_raw: b.s_raw,
                    r_raw: b.r_raw,
                    delta: [b.delta.x, b.delta.y, b.delta.z],
                })
                .collect(),
        }
    }

    pub fn to_field(&self) -> Result<BasisField, FieldError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(FieldError::Version(self.version));
        }
        let config = DecoderConfig {
            latent_dim: self.d_z,
            hidden: self.decoder.widths.clone(),
            skip_in: self.decoder.skip_in.clone(),
            output: self.decoder.output,
        };
        config.validate()?;
        if self.decoder.layers.len() != config.num_layers() {
            return Err(FieldError::Checkpoint(format!(
                "{} decoder layers listed, widths imply {}",
                self.decoder.layers.len(),
                config.num_layers()
            )));
        }
        let layers = self
            .decoder
            .layers
            .iter()
            .enumerate()
            .map(|(l, doc)| {
                let (i, o) = config.layer_shape(l);
                let weight = Array2::from_shape_vec((o, i), doc.weight.clone()).map_err(|_| {
                    FieldError::Checkpoint(format!(
                        "layer {l} weight has {} entries, expected {}",
                        doc.weight.len(),
                        o * i
                    ))
                })?;
                Ok(DenseLayer {
                    weight,
                    bias: Array1::from(doc.bias.clone()),
                })
            })
            .collect::<Result<Vec<_>, FieldError>>()?;
        let decoder = Decoder::from_layers(config, layers)?;
        let bases = self
            .bases
            .iter()
            .map(|b| LocalBasis {
                mu: Point3::from(b.mu),
                z: b.z.clone(),
                s_raw: b.s_raw,
                r_raw: b.r_raw,
                delta: Vec3::from(b.delta),
            })
            .collect();
        BasisField::new(bases, decoder)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    /// Parses a checkpoint, rejecting unknown versions before anything else.
    pub fn from_json(text: &str) -> Result<Self, FieldError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(CHECKPOINT_VERSION) => Ok(serde_json::from_value(value)?),
            Some(v) => Err(FieldError::Version(v)),
            None => Err(FieldError::Checkpoint("missing integer \"version\"".into())),
        }
    }
}

impl BasisField {
    pub fn to_checkpoint_json(&self) -> String {
        FieldCheckpoint::from_field(self).to_json()
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, FieldError> {
        FieldCheckpoint::from_json(text)?.to_field()
    }
}
