//! Seeded sampling of surface points, training samples and free-space points.
//!
//! Every routine is a pure function of its inputs and seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{numeric_gradient, Aabb, Point3, PointCloud, Sdf};

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("requested {requested} points but the valid range is {min}..={max}")]
    Count {
        requested: usize,
        min: usize,
        max: usize,
    },
    #[error("surface projection failed for {failed} of {attempted} candidates (limit 1%)")]
    Projection { failed: usize, attempted: usize },
    #[error("no surface found after {attempts} candidates")]
    NoSurface { attempts: usize },
    #[error("acceptance rate below 1% ({accepted} of {attempts}) for margin {margin}")]
    LowAcceptance {
        accepted: usize,
        attempts: usize,
        margin: f64,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Origin of a training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleTag {
    NearSurface,
    Uniform,
    Surface,
    Positive,
}

/// Query points with their target signed distances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    pub points: Vec<Point3>,
    pub targets: Vec<f64>,
    pub tags: Vec<SampleTag>,
}

impl SampleSet {
    pub fn new(
        points: Vec<Point3>,
        targets: Vec<f64>,
        tags: Vec<SampleTag>,
    ) -> Result<Self, SamplingError> {
        if points.len() != targets.len() || points.len() != tags.len() {
            return Err(SamplingError::Parameter(format!(
                "length mismatch: {} points, {} targets, {} tags",
                points.len(),
                targets.len(),
                tags.len()
            )));
        }
        if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
            return Err(SamplingError::Parameter(format!(
                "target {i} is not finite"
            )));
        }
        Ok(Self {
            points,
            targets,
            tags,
        })
    }

    /// Labels every point with the oracle's distance.
    pub fn from_oracle<S: Sdf + ?Sized>(oracle: &S, points: Vec<Point3>, tag: SampleTag) -> Self {
        let targets = oracle.sdf_batch(&points);
        let tags = vec![tag; points.len()];
        Self {
            points,
            targets,
            tags,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, tag: SampleTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    pub fn subset(&self, indices: &[usize]) -> SampleSet {
        SampleSet {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            tags: indices.iter().map(|&i| self.tags[i]).collect(),
        }
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, b: &Aabb) -> Point3 {
    b.lerp([rng.random(), rng.random(), rng.random()])
}

const PROJECTION_TOL: f64 = 1e-7;
const PROJECTION_ITERS: usize = 40;
const GRADIENT_STEP: f64 = 1e-6;

fn project_to_surface<S: Sdf + ?Sized>(sdf: &S, start: Point3) -> Option<Point3> {
    let mut x = start;
    for _ in 0..PROJECTION_ITERS {
        let d = sdf.sdf(&x);
        if !d.is_finite() {
            return None;
        }
        if d.abs() <= PROJECTION_TOL {
            return Some(x);
        }
        let g = numeric_gradient(sdf, &x, GRADIENT_STEP);
        let g2 = g.norm_squared();
        if !(g2 > 1e-12) {
            return None;
        }
        x -= g * (d / g2);
    }
    (sdf.sdf(&x).abs() <= PROJECTION_TOL).then_some(x)
}

/// Samples `n` points on the zero level set.
///
/// Candidates are drawn uniformly in the oracle bounds, kept when they fall
/// inside a thin band around the surface, then projected with Newton steps
/// along the numeric gradient. Fails when more than 1% of projections do not
/// converge.
pub fn surface_points<S: Sdf + ?Sized>(
    sdf: &S,
    n: usize,
    seed: u64,
) -> Result<PointCloud, SamplingError> {
    if n == 0 {
        return Err(SamplingError::Count {
            requested: n,
            min: 1,
            max: usize::MAX,
        });
    }
    const BAND: f64 = 0.04;
    let bounds = sdf.bounds().expanded(BAND);
    let max_candidates = 100_000 + 2_000 * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let (mut candidates, mut projected, mut failed) = (0usize, 0usize, 0usize);
    while points.len() < n {
        if candidates >= max_candidates {
            return Err(SamplingError::NoSurface {
                attempts: candidates,
            });
        }
        candidates += 1;
        let c = uniform_in(&mut rng, &bounds);
        if sdf.sdf(&c).abs() >= BAND {
            continue;
        }
        projected += 1;
        match project_to_surface(sdf, c) {
            Some(p) => points.push(p),
            None => failed += 1,
        }
    }
    if failed * 100 > projected {
        return Err(SamplingError::Projection {
            failed,
            attempted: projected,
        });
    }
    Ok(PointCloud::new(points))
}

/// Greedy farthest point sampling with the first index drawn from `seed`.
pub fn farthest_point_sample(
    cloud: &PointCloud,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>, SamplingError> {
    check_fps_count(cloud, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..cloud.len());
    farthest_point_sample_from(cloud, n, first)
}

fn check_fps_count(cloud: &PointCloud, n: usize) -> Result<(), SamplingError> {
    if n == 0 || n > cloud.len() {
        return Err(SamplingError::Count {
            requested: n,
            min: 1,
            max: cloud.len(),
        });
    }
    Ok(())
}

/// Greedy farthest point sampling from a given first index. Ties go to the
/// lowest index.
pub fn farthest_point_sample_from(
    cloud: &PointCloud,
    n: usize,
    first: usize,
) -> Result<Vec<usize>, SamplingError> {
    check_fps_count(cloud, n)?;
    if first >= cloud.len() {
        return Err(SamplingError::Parameter(format!(
            "first index {first} out of range for {} points",
            cloud.len()
        )));
    }
    let pts = &cloud.points;
    let mut nearest = vec![f64::INFINITY; pts.len()];
    let mut chosen = Vec::with_capacity(n);
    let mut current = first;
    loop {
        chosen.push(current);
        if chosen.len() == n {
            break;
        }
        let c = pts[current];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

/// DeepSDF-style training samples: perturbed surface points plus uniform
/// points in the unit cube, labelled by the oracle.
///
/// The first `ceil(n_near / 2)` near-surface points use `noise_stds[0]`, the
/// rest `noise_stds[1]`.
pub fn sample_training_set<S: Sdf + ?Sized>(
    oracle: &S,
    n_near: usize,
    n_uniform: usize,
    noise_stds: [f64; 2],
    seed: u64,
) -> Result<SampleSet, SamplingError> {
    if n_near + n_uniform == 0 {
        return Err(SamplingError::Count {
            requested: 0,
            min: 1,
            max: usize::MAX,
        });
    }
    if noise_stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(SamplingError::Parameter(format!(
            "noise standard deviations must be > 0, got {noise_stds:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surface_seed = rng.random::<u64>();
    let mut points = Vec::with_capacity(n_near + n_uniform);
    let mut tags = Vec::with_capacity(n_near + n_uniform);
    if n_near > 0 {
        let surface = surface_points(oracle, n_near, surface_seed)?;
        let first_half = n_near.div_ceil(2);
        for (i, p) in surface.points.into_iter().enumerate() {
            let std = if i < first_half {
                noise_stds[0]
            } else {
                noise_stds[1]
            };
            let normal = Normal::new(0.0, std).expect("std validated");
            let offset = [
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            ];
            points.push(Point3::new(p.x + offset[0], p.y + offset[1], p.z + offset[2]));
            tags.push(SampleTag::NearSurface);
        }
    }
    let cube = Aabb::unit();
    for _ in 0..n_uniform {
        points.push(uniform_in(&mut rng, &cube));
        tags.push(SampleTag::Uniform);
    }
    let targets = oracle.sdf_batch(&points);
    Ok(SampleSet {
        points,
        targets,
        tags,
    })
}

/// Rejection-samples `n` points in the unit cube with `sdf > margin`.
pub fn positive_points<S: Sdf + ?Sized>(
    oracle: &S,
    n: usize,
    margin: f64,
    seed: u64,
) -> Result<PointCloud, SamplingError> {
    if n == 0 {
        return Err(SamplingError::Count {
            requested: n,
            min: 1,
            max: usize::MAX,
        });
    }
    if !(margin >= 0.0) {
        return Err(SamplingError::Parameter(format!(
            "margin must be >= 0, got {margin}"
        )));
    }
    let budget = 100 * n.max(10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cube = Aabb::unit();
    let mut points = Vec::with_capacity(n);
    let mut attempts = 0;
    while points.len() < n {
        if attempts >= budget {
            return Err(SamplingError::LowAcceptance {
                accepted: points.len(),
                attempts,
                margin,
            });
        }
        attempts += 1;
        let p = uniform_in(&mut rng, &cube);
        if oracle.sdf(&p) > margin {
            points.push(p);
        }
    }
    Ok(PointCloud::new(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{SceneNode, SceneSpec};

    fn brute_fps(cloud: &PointCloud, n: usize, first: usize) -> Vec<usize> {
        let mut chosen = vec![first];
        while chosen.len() < n {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..cloud.len() {
                let d = chosen
                    .iter()
                    .map(|&c| (cloud.points[i] - cloud.points[c]).norm())
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            chosen.push(best.1);
        }
        chosen
    }

    #[test]
    fn sphere_surface_points_are_on_surface() {
        let s = SceneSpec::sphere(0.4).unwrap();
        let pts = surface_points(&s, 100, 1).unwrap();
        assert_eq!(pts.len(), 100);
        let worst = pts
            .iter()
            .map(|p| (p.coords.norm() - 0.4).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-4, "{worst}");
        assert_eq!(pts, surface_points(&s, 100, 1).unwrap());
    }

    #[test]
    fn union_components_both_get_points() {
        let s = SceneSpec::new(SceneNode::Union {
            children: vec![
                SceneNode::sphere(0.15).at([-0.25, 0.0, 0.0]),
                SceneNode::sphere(0.15).at([0.25, 0.0, 0.0]),
            ],
        })
        .unwrap();
        let pts = surface_points(&s, 1000, 4).unwrap();
        let left = pts.iter().filter(|p| p.x < 0.0).count();
        let right = pts.len() - left;
        assert!(left > 300 && right > 300, "{left} / {right}");
    }

    #[test]
    fn fps_examples() {
        let cloud = PointCloud::new(vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.5, 0.0, 0.0),
        ]);
        assert_eq!(farthest_point_sample_from(&cloud, 2, 0).unwrap(), vec![0, 1]);
        let mut all = farthest_point_sample(&cloud, 3, 9).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(farthest_point_sample(&cloud, 4, 0).is_err());
        assert!(farthest_point_sample(&cloud, 0, 0).is_err());
    }

    #[test]
    fn fps_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let cloud = PointCloud::new(
                (0..50)
                    .map(|_| uniform_in(&mut rng, &Aabb::unit()))
                    .collect(),
            );
            let first = trial % 50;
            assert_eq!(
                farthest_point_sample_from(&cloud, 10, first).unwrap(),
                brute_fps(&cloud, 10, first)
            );
        }
    }

    #[test]
    fn training_set_contract() {
        let s = SceneSpec::sphere(0.4).unwrap();
        let uni = sample_training_set(&s, 0, 1000, [0.01, 0.003], 2).unwrap();
        assert_eq!(uni.count(SampleTag::Uniform), 1000);
        for (p, t) in uni.points.iter().zip(&uni.targets) {
            assert_eq!(*t, s.sdf(p));
            assert!(Aabb::unit().contains(p, 0.0));
        }
        let near = sample_training_set(&s, 1000, 0, [0.01, 0.01], 2).unwrap();
        let close = near.targets.iter().filter(|t| t.abs() <= 0.05).count();
        assert!(close >= 990, "{close}");
        assert_eq!(near, sample_training_set(&s, 1000, 0, [0.01, 0.01], 2).unwrap());
        assert!(sample_training_set(&s, 0, 0, [0.01, 0.01], 2).is_err());
        assert!(sample_training_set(&s, 1, 0, [0.0, 0.01], 2).is_err());
    }

    #[test]
    fn positive_points_respect_margin() {
        let s = SceneSpec::sphere(0.1).unwrap();
        let p = positive_points(&s, 100, 0.05, 5).unwrap();
        assert!(p.iter().all(|x| x.coords.norm() > 0.15));
        let q = positive_points(&s, 100, 0.0, 5).unwrap();
        assert!(q.iter().all(|x| s.sdf(x) > 0.0));
        assert_eq!(p, positive_points(&s, 100, 0.05, 5).unwrap());
        let big = SceneSpec::new(SceneNode::cuboid([0.5, 0.5, 0.5])).unwrap();
        assert!(matches!(
            positive_points(&big, 10, 0.0, 1),
            Err(SamplingError::LowAcceptance { .. })
        ));
    }
}
