//! The adaptive local basis representation.
//!
//! A [`BasisField`] holds `N` [`LocalBasis`] records and one shared
//! [`Decoder`]. The signed distance at `x` is the blend of the two bases
//! with the largest RBF weight `g_i(x) = exp(-|A_i (x - c_i)|^2)`, where
//! `c_i = mu_i + delta_i` is the effective center and
//! `A_i = diag(exp(s_raw_i)) R(r_raw_i)`:
//!
//! ```text
//! sdf(x) = a_p f_p(x) + a_q f_q(x),   a_i = g_i / (g_p + g_q),
//! f_i(x) = decoder(x - c_i, z_i)
//! ```

mod checkpoint;
mod decoder;
mod downsample;
pub mod engine;
mod rotation;
pub mod taped;

pub use checkpoint::{FieldCheckpoint, CHECKPOINT_VERSION};
pub use decoder::{Decoder, DecoderConfig, DenseLayer, OutputActivation};
pub use downsample::{domain_downsample, domain_downsample_reference, coverage_matrix};
pub use engine::{BlendMode, Engine, PointAdjoint, PointEval};
pub use rotation::{rotation_from_6d, rotation_from_6d_backward, RotationDefect, DEGENERATE_NORM, IDENTITY_6D};

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::diff::ParamVector;
use crate::geom::{Aabb, Mat3, Point3, Sdf, Vec3};

/// Half extent of the box reported as [`Sdf::bounds`] for a field.
pub const FIELD_HALF_EXTENT: f64 = 0.55;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate rotation parameters for basis {basis}: {defect:?}")]
    DegenerateRotation { basis: usize, defect: RotationDefect },
    #[error("basis {basis} has latent dimension {got}, expected {expected}")]
    LatentDim {
        basis: usize,
        got: usize,
        expected: usize,
    },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("n_keep = {n_keep} is out of range 1..={n}")]
    KeepCount { n_keep: usize, n: usize },
    #[error("unsupported checkpoint version {0}")]
    Version(u64),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One local basis function.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalBasis {
    pub mu: Point3,
    pub z: Vec<f64>,
    pub s_raw: [f64; 3],
    pub r_raw: [f64; 6],
    pub delta: Vec3,
}

impl LocalBasis {
    /// Identity rotation, unit scale, zero offset.
    pub fn new(mu: Point3, z: Vec<f64>) -> Self {
        Self {
            mu,
            z,
            s_raw: [0.0; 3],
            r_raw: IDENTITY_6D,
            delta: Vec3::zeros(),
        }
    }

    pub fn center(&self) -> Point3 {
        self.mu + self.delta
    }

    /// `A = diag(exp(s_raw)) R(r_raw)`.
    pub fn domain_transform(&self) -> Result<Mat3, RotationDefect> {
        let r = rotation_from_6d(&self.r_raw)?;
        let s = Vec3::new(self.s_raw[0].exp(), self.s_raw[1].exp(), self.s_raw[2].exp());
        Ok(Mat3::from_diagonal(&s) * r)
    }

    /// `exp(-|A (x - mu - delta)|^2)`.
    pub fn rbf_weight(&self, x: &Point3) -> Result<f64, RotationDefect> {
        let a = self.domain_transform()?;
        Ok((-(a * (x - self.center())).norm_squared()).exp())
    }

    fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.z.iter().all(|v| v.is_finite())
            && self.s_raw.iter().all(|v| v.is_finite())
            && self.r_raw.iter().all(|v| v.is_finite())
            && self.delta.iter().all(|v| v.is_finite())
    }
}

/// Offsets of every parameter block inside the flat parameter vector.
///
/// Per basis: `mu (3) | z (d_z) | s_raw (3) | r_raw (6) | delta (3)`, then the
/// decoder layers as `weight (row-major) | bias`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldLayout {
    pub n_bases: usize,
    pub latent_dim: usize,
    /// `(weight offset, bias offset, outputs, inputs)` per decoder layer.
    pub layers: Vec<(usize, usize, usize, usize)>,
    pub len: usize,
}

impl FieldLayout {
    pub fn new(n_bases: usize, config: &DecoderConfig) -> Self {
        let latent_dim = config.latent_dim;
        let mut offset = n_bases * (15 + latent_dim);
        let layers = (0..config.num_layers())
            .map(|l| {
                let (i, o) = config.layer_shape(l);
                let entry = (offset, offset + o * i, o, i);
                offset += o * i + o;
                entry
            })
            .collect();
        Self {
            n_bases,
            latent_dim,
            layers,
            len: offset,
        }
    }

    pub fn basis_stride(&self) -> usize {
        15 + self.latent_dim
    }

    pub fn mu(&self, i: usize) -> usize {
        i * self.basis_stride()
    }

    pub fn z(&self, i: usize) -> usize {
        self.mu(i) + 3
    }

    pub fn s_raw(&self, i: usize) -> usize {
        self.z(i) + self.latent_dim
    }

    pub fn r_raw(&self, i: usize) -> usize {
        self.s_raw(i) + 3
    }

    pub fn delta(&self, i: usize) -> usize {
        self.r_raw(i) + 6
    }

    pub fn decoder_offset(&self) -> usize {
        self.n_bases * self.basis_stride()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct DomainCache {
    pub a: Mat3,
    pub center: Point3,
}

/// A complete implicit shape: bases plus the shared decoder.
#[derive(Debug)]
pub struct BasisField {
    bases: Vec<LocalBasis>,
    decoder: Decoder,
    domains: Vec<DomainCache>,
    underflow: AtomicU64,
}

impl Clone for BasisField {
    fn clone(&self) -> Self {
        Self {
            bases: self.bases.clone(),
            decoder: self.decoder.clone(),
            domains: self.domains.clone(),
            underflow: AtomicU64::new(self.underflow_fallbacks()),
        }
    }
}

/// Equality of parameters; diagnostic counters are ignored.
impl PartialEq for BasisField {
    fn eq(&self, other: &Self) -> bool {
        self.bases == other.bases && self.decoder == other.decoder
    }
}

fn domains_of(bases: &[LocalBasis]) -> Result<Vec<DomainCache>, FieldError> {
    bases
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let a = b
                .domain_transform()
                .map_err(|defect| FieldError::DegenerateRotation { basis: i, defect })?;
            if !a.iter().all(|v| v.is_finite()) {
                return Err(FieldError::NonFinite(format!("domain transform of basis {i}")));
            }
            Ok(DomainCache {
                a,
                center: b.center(),
            })
        })
        .collect()
}

impl BasisField {
    pub fn new(bases: Vec<LocalBasis>, decoder: Decoder) -> Result<Self, FieldError> {
        if bases.is_empty() {
            return Err(FieldError::Config("a field needs at least one basis".into()));
        }
        let d_z = decoder.latent_dim();
        for (i, b) in bases.iter().enumerate() {
            if b.z.len() != d_z {
                return Err(FieldError::LatentDim {
                    basis: i,
                    got: b.z.len(),
                    expected: d_z,
                });
            }
            if !b.is_finite() {
                return Err(FieldError::NonFinite(format!("basis {i}")));
            }
        }
        let domains = domains_of(&bases)?;
        Ok(Self {
            bases,
            decoder,
            domains,
            underflow: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn bases(&self) -> &[LocalBasis] {
        &self.bases
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.latent_dim()
    }

    pub fn layout(&self) -> FieldLayout {
        FieldLayout::new(self.len(), self.decoder.config())
    }

    pub(crate) fn domains(&self) -> &[DomainCache] {
        &self.domains
    }

    pub fn domain_transform(&self, i: usize) -> Mat3 {
        self.domains[i].a
    }

    pub fn center(&self, i: usize) -> Point3 {
        self.domains[i].center
    }

    pub fn rbf_weight(&self, i: usize, x: &Point3) -> f64 {
        let d = &self.domains[i];
        (-(d.a * (x - d.center)).norm_squared()).exp()
    }

    /// Indices of the two largest RBF weights, larger first, ties to the
    /// lower index. `(0, 0)` when `N = 1`.
    pub fn top2(&self, x: &Point3) -> (usize, usize) {
        let g: Vec<f64> = (0..self.len()).map(|i| self.rbf_weight(i, x)).collect();
        engine::top2_of(&g)
    }

    /// `decoder(x - c_i, z_i)`.
    pub fn decoder_eval(&self, i: usize, x: &Point3) -> f64 {
        let d = x - self.domains[i].center;
        let mut input = Vec::with_capacity(self.decoder.input_dim());
        input.extend_from_slice(&[d.x, d.y, d.z]);
        input.extend_from_slice(&self.bases[i].z);
        self.decoder.eval(&input)
    }

    /// Index of the Euclidean-nearest effective center, ties to the lower
    /// index.
    pub fn nearest_center(&self, x: &Point3) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, d) in self.domains.iter().enumerate() {
            let dist = (x - d.center).norm_squared();
            if dist < best_d {
                best = i;
                best_d = dist;
            }
        }
        best
    }

    /// Blended signed distance with all intermediate quantities.
    pub fn sdf_eval_detailed(&self, x: &Point3) -> PointEval {
        let e = Engine::new(self).eval_point(x, false);
        if e.mode == BlendMode::Fallback {
            self.underflow.fetch_add(1, Ordering::Relaxed);
        }
        e
    }

    pub fn sdf_eval(&self, x: &Point3) -> f64 {
        self.sdf_eval_detailed(x).value
    }

    /// Number of queries that hit the `g_p + g_q = 0` fallback since creation
    /// or the last [`reset_diagnostics`](Self::reset_diagnostics).
    pub fn underflow_fallbacks(&self) -> u64 {
        self.underflow.load(Ordering::Relaxed)
    }

    pub(crate) fn record_fallbacks(&self, n: u64) {
        if n > 0 {
            self.underflow.fetch_add(n, Ordering::Relaxed);
        }
    }

    pub fn reset_diagnostics(&self) {
        self.underflow.store(0, Ordering::Relaxed);
    }

    /// Sub-field with the bases at `indices` (in the given order) and the same
    /// decoder.
    pub fn select(&self, indices: &[usize]) -> Result<Self, FieldError> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(FieldError::Config(format!(
                "basis index {i} out of range for {} bases",
                self.len()
            )));
        }
        Self::new(
            indices.iter().map(|&i| self.bases[i].clone()).collect(),
            self.decoder.clone(),
        )
    }

    /// Writes every parameter into `out` following [`FieldLayout`].
    pub fn write_params(&self, out: &mut [f64]) -> Result<(), FieldError> {
        let layout = self.layout();
        if out.len() != layout.len {
            return Err(FieldError::ParamLength {
                got: out.len(),
                expected: layout.len,
            });
        }
        for (i, b) in self.bases.iter().enumerate() {
            out[layout.mu(i)..layout.mu(i) + 3].copy_from_slice(b.mu.coords.as_slice());
            out[layout.z(i)..layout.z(i) + layout.latent_dim].copy_from_slice(&b.z);
            out[layout.s_raw(i)..layout.s_raw(i) + 3].copy_from_slice(&b.s_raw);
            out[layout.r_raw(i)..layout.r_raw(i) + 6].copy_from_slice(&b.r_raw);
            out[layout.delta(i)..layout.delta(i) + 3].copy_from_slice(b.delta.as_slice());
        }
        for (layer, &(w, bo, o, i)) in self.decoder.layers().iter().zip(&layout.layers) {
            out[w..w + o * i].copy_from_slice(layer.weight.as_slice().expect("standard layout"));
            out[bo..bo + o].copy_from_slice(layer.bias.as_slice().expect("standard layout"));
        }
        Ok(())
    }

    pub fn param_values(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.layout().len];
        self.write_params(&mut v).expect("layout length");
        v
    }

    /// Overwrites every parameter from a flat vector and revalidates.
    /// On error the field is left unchanged.
    pub fn read_params(&mut self, values: &[f64]) -> Result<(), FieldError> {
        let layout = self.layout();
        if values.len() != layout.len {
            return Err(FieldError::ParamLength {
                got: values.len(),
                expected: layout.len,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(format!("parameter coordinate {i}")));
        }
        let mut bases = self.bases.clone();
        for (i, b) in bases.iter_mut().enumerate() {
            let v = |o: usize, k: usize| values[o + k];
            b.mu = Point3::new(v(layout.mu(i), 0), v(layout.mu(i), 1), v(layout.mu(i), 2));
            b.z.copy_from_slice(&values[layout.z(i)..layout.z(i) + layout.latent_dim]);
            b.s_raw.copy_from_slice(&values[layout.s_raw(i)..layout.s_raw(i) + 3]);
            b.r_raw.copy_from_slice(&values[layout.r_raw(i)..layout.r_raw(i) + 6]);
            b.delta = Vec3::new(
                v(layout.delta(i), 0),
                v(layout.delta(i), 1),
                v(layout.delta(i), 2),
            );
        }
        let domains = domains_of(&bases)?;
        self.bases = bases;
        self.domains = domains;
        for (layer, &(w, bo, o, i)) in self.decoder.layers_mut().iter_mut().zip(&layout.layers) {
            layer
                .weight
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&values[w..w + o * i]);
            layer
                .bias
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&values[bo..bo + o]);
        }
        Ok(())
    }

    /// Named parameter blocks: `basis{i}.mu`, `basis{i}.z`, `basis{i}.s_raw`,
    /// `basis{i}.r_raw`, `basis{i}.delta`, `decoder.w{l}`, `decoder.b{l}`.
    pub fn to_params(&self) -> ParamVector {
        let values = self.param_values();
        let layout = self.layout();
        let mut p = ParamVector::new();
        for i in 0..self.len() {
            p.register(format!("basis{i}.mu"), &values[layout.mu(i)..layout.z(i)]);
            p.register(format!("basis{i}.z"), &values[layout.z(i)..layout.s_raw(i)]);
            p.register(format!("basis{i}.s_raw"), &values[layout.s_raw(i)..layout.r_raw(i)]);
            p.register(format!("basis{i}.r_raw"), &values[layout.r_raw(i)..layout.delta(i)]);
            p.register(format!("basis{i}.delta"), &values[layout.delta(i)..layout.delta(i) + 3]);
        }
        for (l, &(w, b, o, i)) in layout.layers.iter().enumerate() {
            p.register(format!("decoder.w{l}"), &values[w..w + o * i]);
            p.register(format!("decoder.b{l}"), &values[b..b + o]);
        }
        p
    }

    /// Copy of `self` with parameters taken from `params` (same layout as
    /// [`to_params`](Self::to_params)).
    pub fn with_params(&self, params: &ParamVector) -> Result<Self, FieldError> {
        let mut f = self.clone();
        f.read_params(params.as_slice())?;
        f.reset_diagnostics();
        Ok(f)
    }
}

impl Sdf for BasisField {
    fn sdf(&self, x: &Point3) -> f64 {
        self.sdf_eval(x)
    }

    fn sdf_batch(&self, xs: &[Point3]) -> Vec<f64> {
        Engine::new(self).values(xs)
    }

    fn bounds(&self) -> Aabb {
        Aabb::cube(FIELD_HALF_EXTENT)
    }
}
