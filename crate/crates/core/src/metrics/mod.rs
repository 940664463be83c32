//! Volumetric IoU, Chamfer-L2 and F-score between shapes.

mod nearest;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Point3, PointCloud, Sdf, TriMesh};
use crate::surface::{marching_cubes, GridSpec, SurfaceError};

pub use nearest::NearestTree;

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_TAU: f64 = 0.01;

const IOU_CHUNK: usize = 1 << 16;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("sample count must be >= 1")]
    Count,
    #[error("threshold must be > 0, got {0}")]
    Threshold(f64),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
}

/// Fraction of `n` uniform samples in the union of both bounding boxes that
/// are inside both shapes, relative to those inside either (`sdf < 0`).
/// Two shapes with no occupied sample score 1.
pub fn iou<A: Sdf + ?Sized, B: Sdf + ?Sized>(a: &A, b: &B, n: usize, seed: u64) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::Count);
    }
    let bounds = a.bounds().union(&b.bounds());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0u64, 0u64);
    let mut left = n;
    while left > 0 {
        let m = left.min(IOU_CHUNK);
        let pts: Vec<Point3> = (0..m)
            .map(|_| bounds.lerp([rng.random(), rng.random(), rng.random()]))
            .collect();
        let (va, vb) = (a.sdf_batch(&pts), b.sdf_batch(&pts));
        for (x, y) in va.iter().zip(&vb) {
            let (ia, ib) = (*x < 0.0, *y < 0.0);
            both += (ia && ib) as u64;
            either += (ia || ib) as u64;
        }
        left -= m;
    }
    Ok(if either == 0 { 1.0 } else { both as f64 / either as f64 })
}

fn nearest_squared(from: &PointCloud, to: &PointCloud) -> Vec<f64> {
    let tree = NearestTree::new(to);
    from.points
        .par_iter()
        .map(|p| tree.distance_squared(p).expect("nonempty target"))
        .collect()
}

fn check_nonempty(a: &PointCloud, b: &PointCloud) -> Result<(), MetricError> {
    if a.is_empty() {
        return Err(MetricError::Empty("first point set"));
    }
    if b.is_empty() {
        return Err(MetricError::Empty("second point set"));
    }
    Ok(())
}

fn mean_squared_nearest(from: &PointCloud, to: &PointCloud) -> f64 {
    nearest_squared(from, to).iter().sum::<f64>() / from.len() as f64
}

/// Symmetric sum of mean squared nearest-neighbour distances.
pub fn chamfer_l2(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricError> {
    check_nonempty(a, b)?;
    Ok(mean_squared_nearest(a, b) + mean_squared_nearest(b, a))
}

fn fraction_within(from: &PointCloud, to: &PointCloud, tau: f64) -> f64 {
    let d = nearest_squared(from, to);
    d.iter().filter(|&&d2| d2.sqrt() <= tau).count() as f64 / from.len() as f64
}

/// Harmonic mean of precision (points of `a` within `tau` of `b`) and
/// recall (points of `b` within `tau` of `a`); 0 when both vanish.
pub fn f_score(a: &PointCloud, b: &PointCloud, tau: f64) -> Result<f64, MetricError> {
    check_nonempty(a, b)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(MetricError::Threshold(tau));
    }
    let p = fraction_within(a, b, tau);
    let r = fraction_within(b, a, tau);
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    /// Uniform samples for IoU.
    pub n_iou: usize,
    /// Surface samples drawn from each extracted mesh.
    pub n_surface: usize,
    pub tau: f64,
    /// IoU and first-mesh samples use `seed`, second-mesh samples `seed + 1`.
    pub seed: u64,
    /// Marching-cubes cells per axis.
    pub resolution: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_iou: 100_000,
            n_surface: 100_000,
            tau: DEFAULT_TAU,
            seed: 0,
            resolution: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub iou: f64,
    pub chamfer_l2: f64,
    pub f_score: f64,
    pub tau: f64,
    pub n_iou: usize,
    pub n_surface: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// Extraction grid covering both shapes with a two-cell margin.
pub fn eval_grid<A: Sdf + ?Sized, B: Sdf + ?Sized>(a: &A, b: &B, resolution: usize) -> GridSpec {
    let bounds = a.bounds().union(&b.bounds());
    let half = (0..3)
        .map(|k| bounds.min[k].abs().max(bounds.max[k].abs()))
        .fold(0.0, f64::max);
    let res = resolution.max(1) as f64;
    GridSpec::cube(resolution, half * res / (res - 4.0).max(1.0))
}

/// Extracts both shapes, samples their surfaces and computes all metrics.
pub fn evaluate<A: Sdf + ?Sized, B: Sdf + ?Sized>(
    a: &A,
    b: &B,
    protocol: &EvalProtocol,
) -> Result<MetricReport, MetricError> {
    if protocol.n_surface == 0 {
        return Err(MetricError::Count);
    }
    let grid = eval_grid(a, b, protocol.resolution);
    let mesh_a = marching_cubes(a, &grid)?;
    let mesh_b = marching_cubes(b, &grid)?;
    evaluate_meshes(a, b, &mesh_a, &mesh_b, protocol)
}

/// [`evaluate`] with already extracted meshes.
pub fn evaluate_meshes<A: Sdf + ?Sized, B: Sdf + ?Sized>(
    a: &A,
    b: &B,
    mesh_a: &TriMesh,
    mesh_b: &TriMesh,
    protocol: &EvalProtocol,
) -> Result<MetricReport, MetricError> {
    let iou = iou(a, b, protocol.n_iou, protocol.seed)?;
    let pa = mesh_a.sample_surface(protocol.n_surface, protocol.seed);
    let pb = mesh_b.sample_surface(protocol.n_surface, protocol.seed.wrapping_add(1));
    if pa.is_empty() {
        return Err(MetricError::Empty("first surface"));
    }
    if pb.is_empty() {
        return Err(MetricError::Empty("second surface"));
    }
    Ok(MetricReport {
        version: REPORT_VERSION,
        iou,
        chamfer_l2: chamfer_l2(&pa, &pb)?,
        f_score: f_score(&pa, &pb, protocol.tau)?,
        tau: protocol.tau,
        n_iou: protocol.n_iou,
        n_surface: protocol.n_surface,
        resolution: protocol.resolution,
        seed: protocol.seed,
    })
}
