//! Points, meshes, point clouds, analytic SDF oracles and the sampling
//! routines that produce training data.

mod mesh;
mod sampling;
mod scene;

pub use mesh::TriMesh;
pub use sampling::{
    farthest_point_sample, farthest_point_sample_from, positive_points, sample_training_set,
    surface_points, SampleSet, SampleTag, SamplingError,
};
pub use scene::{scene_sdf, SceneError, SceneNode, SceneSpec, Transform, SCENE_VERSION};

use nalgebra as na;

pub type Point3 = na::Point3<f64>;
pub type Vec3 = na::Vector3<f64>;
pub type Mat3 = na::Matrix3<f64>;

/// Half side length of the normalized shape cube.
pub const UNIT_HALF_EXTENT: f64 = 0.5;

/// Anything that can be queried for a signed distance.
///
/// Negative values are inside. `bounds` must enclose the zero level set.
pub trait Sdf: Sync {
    fn sdf(&self, x: &Point3) -> f64;

    fn sdf_batch(&self, xs: &[Point3]) -> Vec<f64> {
        xs.iter().map(|x| self.sdf(x)).collect()
    }

    fn bounds(&self) -> Aabb;
}

impl<T: Sdf + ?Sized> Sdf for &T {
    fn sdf(&self, x: &Point3) -> f64 {
        (**self).sdf(x)
    }

    fn sdf_batch(&self, xs: &[Point3]) -> Vec<f64> {
        (**self).sdf_batch(xs)
    }

    fn bounds(&self) -> Aabb {
        (**self).bounds()
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Self {
        Self { min, max }
    }

    pub fn cube(half: f64) -> Self {
        Self::new(Point3::new(-half, -half, -half), Point3::new(half, half, half))
    }

    pub fn unit() -> Self {
        Self::cube(UNIT_HALF_EXTENT)
    }

    pub fn empty() -> Self {
        Self::new(
            Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        )
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|k| self.min[k] > self.max[k])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Point3 {
        na::center(&self.min, &self.max)
    }

    pub fn include(&mut self, p: &Point3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb::new(self.min.inf(&other.min), self.max.sup(&other.max))
    }

    pub fn intersection(&self, other: &Aabb) -> Aabb {
        Aabb::new(self.min.sup(&other.min), self.max.inf(&other.max))
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        let m = Vec3::repeat(margin);
        Aabb::new(self.min - m, self.max + m)
    }

    pub fn contains(&self, p: &Point3, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }

    pub fn contains_box(&self, other: &Aabb, tol: f64) -> bool {
        self.contains(&other.min, tol) && self.contains(&other.max, tol)
    }

    /// Point at fractional coordinates `t` in `[0, 1]^3`.
    pub fn lerp(&self, t: [f64; 3]) -> Point3 {
        let e = self.extent();
        Point3::new(
            self.min.x + t[0] * e.x,
            self.min.y + t[1] * e.y,
            self.min.z + t[2] * e.z,
        )
    }
}

/// An ordered list of points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    pub fn transformed(&self, iso: &na::Isometry3<f64>) -> PointCloud {
        PointCloud::new(self.points.iter().map(|p| iso * p).collect())
    }

    pub fn bounds(&self) -> Aabb {
        let mut b = Aabb::empty();
        for p in &self.points {
            b.include(p);
        }
        b
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

impl From<Vec<Point3>> for PointCloud {
    fn from(points: Vec<Point3>) -> Self {
        Self::new(points)
    }
}

/// Wraps a closure as an [`Sdf`] with explicit bounds.
pub struct FnSdf<F> {
    pub f: F,
    pub bounds: Aabb,
}

impl<F: Fn(&Point3) -> f64 + Sync> FnSdf<F> {
    pub fn new(bounds: Aabb, f: F) -> Self {
        Self { f, bounds }
    }
}

impl<F: Fn(&Point3) -> f64 + Sync> Sdf for FnSdf<F> {
    fn sdf(&self, x: &Point3) -> f64 {
        (self.f)(x)
    }

    fn bounds(&self) -> Aabb {
        self.bounds
    }
}

/// Central-difference gradient of an SDF.
pub fn numeric_gradient<S: Sdf + ?Sized>(sdf: &S, x: &Point3, h: f64) -> Vec3 {
    let mut g = Vec3::zeros();
    for k in 0..3 {
        let mut a = *x;
        let mut b = *x;
        a[k] += h;
        b[k] -= h;
        g[k] = (sdf.sdf(&a) - sdf.sdf(&b)) / (2.0 * h);
    }
    g
}
