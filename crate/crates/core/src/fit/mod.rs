//! Fitting pipelines: initialize a field from a scene, fit it to samples with
//! Adam, compact it with domain-based downsampling, and refine centers and
//! latents with the post-optimization objective.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::AdamState;
use crate::field::{
    domain_downsample, BasisField, Decoder, DecoderConfig, FieldError, LocalBasis, IDENTITY_6D,
};
use crate::geom::{
    farthest_point_sample, sample_training_set, surface_points, Point3, PointCloud, SampleSet,
    SamplingError, Sdf, Vec3,
};
use crate::objective::{
    center_latent_mask, inte_value_and_grad, opt_value_and_grad, Anchor, LossEval, LossWeights,
    ObjectiveError, OptInputs,
};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("numerical failure at step {step}: {what}")]
    Numerical { step: usize, what: String },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// How the blending domains are treated during fitting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum WeightStrategy {
    /// Scales, rotations and offsets are optimized.
    #[default]
    Learnable,
    /// Fixed isotropic domains `A = sigma I` with identity rotation; scales,
    /// rotations and offsets stay frozen.
    Soft { sigma: f64 },
}

/// Training-sample generation from a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_near: usize,
    pub n_uniform: usize,
    pub noise_stds: [f64; 2],
    /// Surface points from which initial centers are picked by FPS.
    pub n_surface: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_near: 18_000,
            n_uniform: 2_000,
            noise_stds: [0.01, 0.003],
            n_surface: 4_096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Final basis count.
    pub n_bases: usize,
    /// Basis count before downsampling; `None` means no compaction.
    pub n_init: Option<usize>,
    pub decoder: DecoderConfig,
    pub steps: usize,
    /// Steps after downsampling; `None` reuses `steps`.
    pub phase2_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay to `learning_rate * final_lr_fraction`; 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Fraction of steps (from the start) during which the offset regularizer
    /// is active.
    pub reg_fraction: f64,
    pub strategy: WeightStrategy,
    pub sampling: SamplingConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_bases: 64,
            n_init: None,
            decoder: DecoderConfig::default(),
            steps: 4_000,
            phase2_steps: None,
            batch_size: 2_048,
            learning_rate: 1e-3,
            final_lr_fraction: 1.0,
            seed: 0,
            weights: LossWeights::default(),
            reg_fraction: 0.1,
            strategy: WeightStrategy::Learnable,
            sampling: SamplingConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: String| Err(FitError::Config(m));
        if self.n_bases == 0 {
            return bad("n_bases must be >= 1".into());
        }
        if let Some(n) = self.n_init {
            if n < self.n_bases {
                return bad(format!("n_init = {n} is smaller than n_bases = {}", self.n_bases));
            }
        }
        if self.steps == 0 || self.phase2_steps == Some(0) {
            return bad("steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad(format!(
                "final_lr_fraction must be in (0, 1], got {}",
                self.final_lr_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.reg_fraction) {
            return bad(format!("reg_fraction must be in [0, 1], got {}", self.reg_fraction));
        }
        if let WeightStrategy::Soft { sigma } = self.strategy {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return bad(format!("soft strategy sigma must be > 0, got {sigma}"));
            }
        }
        self.weights.validate()?;
        self.decoder.validate()?;
        Ok(())
    }

    fn learning_rate_at(&self, step: usize, steps: usize) -> f64 {
        if self.final_lr_fraction >= 1.0 || steps <= 1 {
            return self.learning_rate;
        }
        let t = step as f64 / (steps - 1) as f64;
        let f = self.final_lr_fraction;
        self.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (PI * t).cos()))
    }
}

/// Post-optimization settings. Defaults: 1000 iterations at learning rate
/// 0.001 with face/pos/adj/stable weights 1/10/10/0.1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    /// Points drawn from each input set per iteration; `None` uses all.
    pub batch_size: Option<usize>,
    /// Adjacency points sampled around every anchored center.
    pub adjacency_per_basis: usize,
    pub adjacency_std: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 1_000,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            batch_size: Some(1_024),
            adjacency_per_basis: 64,
            adjacency_std: 0.05,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.iterations == 0 {
            return Err(FitError::Config("iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FitError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == Some(0) {
            return Err(FitError::Config("batch_size must be >= 1".into()));
        }
        if !(self.adjacency_std >= 0.0 && self.adjacency_std.is_finite()) {
            return Err(FitError::Config("adjacency_std must be >= 0".into()));
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// Per-step loss trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub total: Vec<f64>,
    pub terms: BTreeMap<String, Vec<f64>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    fn push(&mut self, eval: &LossEval) {
        self.total.push(eval.total);
        for (k, v) in &eval.terms {
            self.terms.entry(k.clone()).or_default().push(*v);
        }
    }

    fn extend(&mut self, other: Trace) {
        self.total.extend(other.total);
        for (k, v) in other.terms {
            self.terms.entry(k).or_default().extend(v);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Query evaluations that hit the `g_p + g_q = 0` fallback.
    pub underflow_fallbacks: u64,
    /// Parameter coordinates excluded from gradient updates (frozen).
    pub excluded_gradient_coords: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub version: u32,
    pub trace: Trace,
    /// Trace indices where a new phase starts (after downsampling).
    pub phase_boundaries: Vec<usize>,
    /// L2 norms of the final parameter groups.
    pub final_param_norms: BTreeMap<String, f64>,
    pub diagnostics: Diagnostics,
    /// Kept out of the JSON so reports stay byte-identical across runs.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl FitReport {
    fn new(trace: Trace, field: &BasisField, diagnostics: Diagnostics, wall_time: Duration) -> Self {
        Self {
            version: REPORT_VERSION,
            trace,
            phase_boundaries: vec![],
            final_param_norms: param_norms(field),
            diagnostics,
            wall_time,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn param_norms(field: &BasisField) -> BTreeMap<String, f64> {
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for b in field.bases() {
        *sq.entry("mu".into()).or_default() += b.mu.coords.norm_squared();
        *sq.entry("z".into()).or_default() += b.z.iter().map(|v| v * v).sum::<f64>();
        *sq.entry("s_raw".into()).or_default() += b.s_raw.iter().map(|v| v * v).sum::<f64>();
        *sq.entry("r_raw".into()).or_default() += b.r_raw.iter().map(|v| v * v).sum::<f64>();
        *sq.entry("delta".into()).or_default() += b.delta.norm_squared();
    }
    let dec: f64 = field
        .decoder()
        .layers()
        .iter()
        .map(|l| l.weight.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
        .sum();
    sq.insert("decoder".into(), dec);
    sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// What an observer sees at every step, before the update.
pub struct StepInfo<'a> {
    pub step: usize,
    pub field: &'a BasisField,
    pub points: &'a [Point3],
    pub targets: &'a [f64],
    pub lambda_reg: f64,
    pub eval: &'a LossEval,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_SAMPLES: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_PHASE1: u64 = 3;
const STREAM_PHASE2: u64 = 4;
const STREAM_REFINE: u64 = 5;

/// Training samples for `config` drawn from `scene`.
pub fn training_samples<S: Sdf + ?Sized>(scene: &S, config: &FitConfig) -> Result<SampleSet, FitError> {
    let s = &config.sampling;
    let seed = stream(config.seed, STREAM_SAMPLES).random();
    Ok(sample_training_set(scene, s.n_near, s.n_uniform, s.noise_stds, seed)?)
}

fn mean_nearest_spacing(centers: &[Point3]) -> f64 {
    let n = centers.len();
    let total: f64 = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (centers[i] - centers[j]).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / n as f64
}

/// Initial field with `n` bases: FPS centers on the surface, zero offsets,
/// small random latents, identity rotations and domains whose `e^-1`
/// radius is twice the mean nearest-center spacing (0.5 for one basis).
pub fn init_field_with<S: Sdf + ?Sized>(
    scene: &S,
    config: &FitConfig,
    n: usize,
) -> Result<BasisField, FitError> {
    config.validate()?;
    let mut rng = stream(config.seed, STREAM_INIT);
    let n_surface = config.sampling.n_surface.max(n);
    let surface = surface_points(scene, n_surface, rng.random())?;
    let idx = farthest_point_sample(&surface, n, rng.random())?;
    let centers: Vec<Point3> = idx.iter().map(|&i| surface.points[i]).collect();
    let s_raw = match config.strategy {
        WeightStrategy::Soft { sigma } => sigma.ln(),
        WeightStrategy::Learnable => {
            let radius = if n == 1 {
                0.5
            } else {
                2.0 * mean_nearest_spacing(&centers)
            };
            -radius.ln()
        }
    };
    let normal = Normal::new(0.0, 0.01).expect("finite std");
    let d_z = config.decoder.latent_dim;
    let bases = centers
        .into_iter()
        .map(|mu| LocalBasis {
            mu,
            z: (0..d_z).map(|_| normal.sample(&mut rng)).collect(),
            s_raw: [s_raw; 3],
            r_raw: IDENTITY_6D,
            delta: Vec3::zeros(),
        })
        .collect();
    let decoder = Decoder::kaiming(config.decoder.clone(), &mut rng)?;
    Ok(BasisField::new(bases, decoder)?)
}

/// [`init_field_with`] using `n_init` when set, otherwise `n_bases`.
pub fn init_field<S: Sdf + ?Sized>(scene: &S, config: &FitConfig) -> Result<BasisField, FitError> {
    init_field_with(scene, config, config.n_init.unwrap_or(config.n_bases))
}

fn frozen_mask(field: &BasisField, strategy: WeightStrategy) -> Option<Vec<bool>> {
    match strategy {
        WeightStrategy::Learnable => None,
        WeightStrategy::Soft { .. } => {
            let layout = field.layout();
            let mut mask = vec![true; layout.len];
            for i in 0..field.len() {
                mask[layout.s_raw(i)..layout.delta(i) + 3]
                    .iter_mut()
                    .for_each(|m| *m = false);
            }
            Some(mask)
        }
    }
}

fn check_finite(eval: &LossEval, step: usize) -> Result<(), FitError> {
    if !eval.total.is_finite() {
        return Err(FitError::Numerical {
            step,
            what: format!("loss is {}", eval.total),
        });
    }
    if let Some(i) = eval.grad.iter().position(|g| !g.is_finite()) {
        return Err(FitError::Numerical {
            step,
            what: format!("gradient coordinate {i} is {}", eval.grad[i]),
        });
    }
    Ok(())
}

fn apply(field: &mut BasisField, params: &[f64], step: usize) -> Result<(), FitError> {
    field.read_params(params).map_err(|e| FitError::Numerical {
        step,
        what: e.to_string(),
    })
}

/// Cycles through shuffled permutations of `0..n` in batches.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch,
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if self.batch >= n {
            return self.order.clone();
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (self.batch - out.len()).min(n - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

fn fit_phase(
    field: BasisField,
    samples: &SampleSet,
    config: &FitConfig,
    steps: usize,
    rng: ChaCha8Rng,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<(BasisField, Trace, Diagnostics), FitError> {
    let mut field = field;
    let mut params = field.param_values();
    let mut adam = AdamState::new(params.len(), config.learning_rate);
    let mask = frozen_mask(&field, config.strategy);
    let boundary = (config.reg_fraction * steps as f64).ceil() as usize;
    let mut batcher = Batcher::new(samples.len(), config.batch_size, rng);
    let mut trace = Trace::default();
    let mut diag = Diagnostics {
        excluded_gradient_coords: mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&b| !b).count() as u64),
        ..Default::default()
    };
    let mut points = Vec::with_capacity(config.batch_size);
    let mut targets = Vec::with_capacity(config.batch_size);
    for step in 0..steps {
        let idx = batcher.next();
        points.clear();
        targets.clear();
        points.extend(idx.iter().map(|&i| samples.points[i]));
        targets.extend(idx.iter().map(|&i| samples.targets[i]));
        let lambda_reg = if step < boundary {
            config.weights.lambda_reg
        } else {
            0.0
        };
        let eval = inte_value_and_grad(&field, &points, &targets, &config.weights, lambda_reg);
        check_finite(&eval, step)?;
        diag.underflow_fallbacks += eval.fallbacks;
        trace.push(&eval);
        observer(&StepInfo {
            step,
            field: &field,
            points: &points,
            targets: &targets,
            lambda_reg,
            eval: &eval,
        });
        adam.learning_rate = config.learning_rate_at(step, steps);
        adam.update_masked(&mut params, &eval.grad, mask.as_deref())
            .expect("gradient length matches layout");
        apply(&mut field, &params, step)?;
    }
    Ok((field, trace, diag))
}

/// Adam over the field parameters minimizing the fitting objective on
/// shuffled mini-batches. The trace entry of step `s` is the mini-batch loss
/// before update `s`.
pub fn fit_field(
    field: BasisField,
    samples: &SampleSet,
    config: &FitConfig,
) -> Result<(BasisField, FitReport), FitError> {
    fit_field_observed(field, samples, config, &mut |_| {})
}

/// [`fit_field`] with a callback invoked at every step.
pub fn fit_field_observed(
    field: BasisField,
    samples: &SampleSet,
    config: &FitConfig,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<(BasisField, FitReport), FitError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(FitError::Config("no training samples".into()));
    }
    let start = Instant::now();
    let rng = stream(config.seed, STREAM_PHASE1);
    let (field, trace, diag) = fit_phase(field, samples, config, config.steps, rng, observer)?;
    let report = FitReport::new(trace, &field, diag, start.elapsed());
    Ok((field, report))
}

/// Samples `scene`, initializes `n_bases` bases and fits them.
pub fn fit_scene<S: Sdf + ?Sized>(scene: &S, config: &FitConfig) -> Result<(BasisField, FitReport), FitError> {
    let samples = training_samples(scene, config)?;
    let field = init_field_with(scene, config, config.n_bases)?;
    fit_field(field, &samples, config)
}

/// Two-phase fit: `n_init` bases (default: `n_bases`), domain-based
/// downsampling to `n_bases`, then a warm-started fit of the survivors.
/// Returns the kept indices into the phase-1 field.
pub fn compact_fit<S: Sdf + ?Sized>(
    scene: &S,
    config: &FitConfig,
) -> Result<(BasisField, Vec<usize>, FitReport), FitError> {
    let samples = training_samples(scene, config)?;
    let field = init_field(scene, config)?;
    compact_from(field, &samples, config)
}

/// [`compact_fit`] from an initialized field and given samples.
pub fn compact_from(
    field: BasisField,
    samples: &SampleSet,
    config: &FitConfig,
) -> Result<(BasisField, Vec<usize>, FitReport), FitError> {
    if field.len() < config.n_bases {
        return Err(FitError::Config(format!(
            "field has {} bases, fewer than n_bases = {}",
            field.len(),
            config.n_bases
        )));
    }
    let (phase1, report) = fit_field(field, samples, config)?;
    compact_after(&phase1, &report, samples, config)
}

/// Second half of [`compact_fit`]: downsamples a phase-1 result to
/// `n_bases` and refits the survivors. The returned report continues the
/// phase-1 trace.
pub fn compact_after(
    phase1: &BasisField,
    phase1_report: &FitReport,
    samples: &SampleSet,
    config: &FitConfig,
) -> Result<(BasisField, Vec<usize>, FitReport), FitError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(FitError::Config("no training samples".into()));
    }
    let start = Instant::now();
    let kept = domain_downsample(phase1, config.n_bases)?;
    let survivors = phase1.select(&kept)?;
    let steps2 = config.phase2_steps.unwrap_or(config.steps);
    let rng = stream(config.seed, STREAM_PHASE2);
    let (field, trace2, diag2) = fit_phase(survivors, samples, config, steps2, rng, &mut |_| {})?;
    let mut trace = phase1_report.trace.clone();
    let boundary = trace.len();
    trace.extend(trace2);
    let diag = Diagnostics {
        underflow_fallbacks: phase1_report.diagnostics.underflow_fallbacks + diag2.underflow_fallbacks,
        excluded_gradient_coords: diag2.excluded_gradient_coords,
    };
    let mut report = FitReport::new(trace, &field, diag, phase1_report.wall_time + start.elapsed());
    report.phase_boundaries = vec![boundary];
    Ok((field, kept, report))
}

/// Points drawn from an isotropic Gaussian around every center.
pub fn adjacency_points(centers: &[Point3], per_center: usize, std: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut pts = Vec::with_capacity(centers.len() * per_center);
    for c in centers {
        for _ in 0..per_center {
            pts.push(Point3::new(
                c.x + normal.sample(&mut rng),
                c.y + normal.sample(&mut rng),
                c.z + normal.sample(&mut rng),
            ));
        }
    }
    PointCloud::new(pts)
}

fn subsample(cloud: &PointCloud, batcher: &mut Batcher) -> PointCloud {
    cloud.select(&batcher.next())
}

/// Post-optimization: Adam on centers `mu` and latents `z` only, minimizing
/// the face/positive/adjacency/stability objective. Every other parameter is
/// left bit-identical. Adjacency points are drawn around the anchored
/// centers.
pub fn refine(
    field: BasisField,
    surface: &PointCloud,
    positive: &PointCloud,
    anchor: &Anchor,
    config: &RefineConfig,
) -> Result<(BasisField, FitReport), FitError> {
    config.validate()?;
    let start = Instant::now();
    let mut rng = stream(config.seed, STREAM_REFINE);
    let adjacency = adjacency_points(&anchor.mu, config.adjacency_per_basis, config.adjacency_std, rng.random());
    let mut field = field;
    let mut params = field.param_values();
    let mask = center_latent_mask(&field);
    let mut adam = AdamState::new(params.len(), config.learning_rate);
    let batch = |n: usize| config.batch_size.unwrap_or(n).max(1);
    let mut batchers = [
        Batcher::new(surface.len(), batch(surface.len()), stream(rng.random(), 0)),
        Batcher::new(positive.len(), batch(positive.len()), stream(rng.random(), 1)),
        Batcher::new(adjacency.len(), batch(adjacency.len()), stream(rng.random(), 2)),
    ];
    let mut trace = Trace::default();
    let mut diag = Diagnostics {
        excluded_gradient_coords: mask.iter().filter(|&&m| !m).count() as u64,
        ..Default::default()
    };
    for step in 0..config.iterations {
        let inputs = OptInputs {
            surface: subsample(surface, &mut batchers[0]),
            positive: subsample(positive, &mut batchers[1]),
            adjacency: subsample(&adjacency, &mut batchers[2]),
        };
        let eval = opt_value_and_grad(&field, &inputs, &config.weights, anchor)?;
        check_finite(&eval, step)?;
        diag.underflow_fallbacks += eval.fallbacks;
        trace.push(&eval);
        adam.update_masked(&mut params, &eval.grad, Some(&mask))
            .expect("gradient length matches layout");
        apply(&mut field, &params, step)?;
    }
    let report = FitReport::new(trace, &field, diag, start.elapsed());
    Ok((field, report))
}

#[cfg(test)]
mod tests;
