//! Analytic CSG scenes used as ground-truth SDF oracles.
//!
//! Primitive distances are exact:
//!
//! * sphere: `|p| - r`
//! * box: `|max(q, 0)| + min(max(q.x, q.y, q.z), 0)` with `q = |p| - b`
//! * torus (axis y): `|(|p.xz| - R, p.y)| - r`
//! * capped cylinder (axis y): `min(max(d.x, d.y), 0) + |max(d, 0)|` with
//!   `d = (|p.xz| - r, |p.y| - h)`
//! * capsule (segment along y): `|p - (0, clamp(p.y, -h, h), 0)| - r`
//!
//! Union, intersection and difference use `min`, `max` and `max(a, -b)`.
//! Those combinations bound the true distance and are exact away from the
//! seams where children meet.

use nalgebra as na;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Aabb, Point3, Sdf, Vec3};

pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene node at {path} has no children")]
    EmptyNode { path: String },
    #[error("scene node at {path}: parameter `{name}` must be finite and > 0, got {value}")]
    BadParameter {
        path: String,
        name: &'static str,
        value: f64,
    },
    #[error("scene node at {path}: transform must be finite")]
    BadTransform { path: String },
    #[error("scene bounds {min:?}..{max:?} leave the unit cube [-0.5, 0.5]^3")]
    OutOfBounds { min: [f64; 3], max: [f64; 3] },
    #[error("unsupported scene version {0} (expected {SCENE_VERSION})")]
    Version(u32),
    #[error("invalid scene json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Rigid transform: rotation (axis-angle vector, radians) then translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "TransformRepr", into = "TransformRepr")]
pub struct Transform {
    pub translation: Vec3,
    pub rotation: Vec3,
    inverse: na::Isometry3<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    #[serde(default)]
    translation: [f64; 3],
    #[serde(default)]
    rotation: [f64; 3],
}

impl From<TransformRepr> for Transform {
    fn from(r: TransformRepr) -> Self {
        Transform::new(Vec3::from(r.translation), Vec3::from(r.rotation))
    }
}

impl From<Transform> for TransformRepr {
    fn from(t: Transform) -> Self {
        TransformRepr {
            translation: t.translation.into(),
            rotation: t.rotation.into(),
        }
    }
}

impl Default for Transform {
    fn default() -> Self {
        Transform::new(Vec3::zeros(), Vec3::zeros())
    }
}

impl Transform {
    pub fn new(translation: Vec3, rotation: Vec3) -> Self {
        let iso = na::Isometry3::new(translation, rotation);
        Self {
            translation,
            rotation,
            inverse: iso.inverse(),
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self::new(Vec3::from(t), Vec3::zeros())
    }

    pub fn isometry(&self) -> na::Isometry3<f64> {
        self.inverse.inverse()
    }

    fn to_local(&self, x: &Point3) -> Point3 {
        self.inverse * x
    }

    fn is_finite(&self) -> bool {
        self.translation.iter().chain(self.rotation.iter()).all(|v| v.is_finite())
    }
}

fn is_identity(t: &Transform) -> bool {
    t.translation == Vec3::zeros() && t.rotation == Vec3::zeros()
}

/// One node of a CSG tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SceneNode {
    Sphere {
        radius: f64,
        #[serde(default, skip_serializing_if = "is_identity")]
        transform: Transform,
    },
    Box {
        half_extents: [f64; 3],
        #[serde(default, skip_serializing_if = "is_identity")]
        transform: Transform,
    },
    Torus {
        major_radius: f64,
        minor_radius: f64,
        #[serde(default, skip_serializing_if = "is_identity")]
        transform: Transform,
    },
    Cylinder {
        radius: f64,
        half_height: f64,
        #[serde(default, skip_serializing_if = "is_identity")]
        transform: Transform,
    },
    Capsule {
        radius: f64,
        half_height: f64,
        #[serde(default, skip_serializing_if = "is_identity")]
        transform: Transform,
    },
    Union {
        children: Vec<SceneNode>,
    },
    Intersection {
        children: Vec<SceneNode>,
    },
    /// First child minus the union of the rest.
    Difference {
        children: Vec<SceneNode>,
    },
}

impl SceneNode {
    pub fn sphere(radius: f64) -> Self {
        SceneNode::Sphere {
            radius,
            transform: Transform::default(),
        }
    }

    pub fn cuboid(half_extents: [f64; 3]) -> Self {
        SceneNode::Box {
            half_extents,
            transform: Transform::default(),
        }
    }

    pub fn torus(major_radius: f64, minor_radius: f64) -> Self {
        SceneNode::Torus {
            major_radius,
            minor_radius,
            transform: Transform::default(),
        }
    }

    pub fn cylinder(radius: f64, half_height: f64) -> Self {
        SceneNode::Cylinder {
            radius,
            half_height,
            transform: Transform::default(),
        }
    }

    pub fn capsule(radius: f64, half_height: f64) -> Self {
        SceneNode::Capsule {
            radius,
            half_height,
            transform: Transform::default(),
        }
    }

    /// Replaces the transform of a primitive. No effect on CSG nodes.
    pub fn with_transform(mut self, t: Transform) -> Self {
        match &mut self {
            SceneNode::Sphere { transform, .. }
            | SceneNode::Box { transform, .. }
            | SceneNode::Torus { transform, .. }
            | SceneNode::Cylinder { transform, .. }
            | SceneNode::Capsule { transform, .. } => *transform = t,
            _ => {}
        }
        self
    }

    pub fn at(self, translation: [f64; 3]) -> Self {
        self.with_transform(Transform::translation(translation))
    }

    pub fn sdf(&self, x: &Point3) -> f64 {
        match self {
            SceneNode::Sphere { radius, transform } => {
                transform.to_local(x).coords.norm() - radius
            }
            SceneNode::Box {
                half_extents,
                transform,
            } => {
                let p = transform.to_local(x);
                let q = p.coords.abs() - Vec3::from(*half_extents);
                let outside = q.sup(&Vec3::zeros()).norm();
                let inside = q.max().min(0.0);
                outside + inside
            }
            SceneNode::Torus {
                major_radius,
                minor_radius,
                transform,
            } => {
                let p = transform.to_local(x);
                let qx = (p.x * p.x + p.z * p.z).sqrt() - major_radius;
                (qx * qx + p.y * p.y).sqrt() - minor_radius
            }
            SceneNode::Cylinder {
                radius,
                half_height,
                transform,
            } => {
                let p = transform.to_local(x);
                let dx = (p.x * p.x + p.z * p.z).sqrt() - radius;
                let dy = p.y.abs() - half_height;
                let inside = dx.max(dy).min(0.0);
                let ox = dx.max(0.0);
                let oy = dy.max(0.0);
                inside + (ox * ox + oy * oy).sqrt()
            }
            SceneNode::Capsule {
                radius,
                half_height,
                transform,
            } => {
                let p = transform.to_local(x);
                let y = p.y.clamp(-half_height, *half_height);
                (p - Point3::new(0.0, y, 0.0)).norm() - radius
            }
            SceneNode::Union { children } => children
                .iter()
                .map(|c| c.sdf(x))
                .fold(f64::INFINITY, f64::min),
            SceneNode::Intersection { children } => children
                .iter()
                .map(|c| c.sdf(x))
                .fold(f64::NEG_INFINITY, f64::max),
            SceneNode::Difference { children } => {
                let base = children[0].sdf(x);
                children[1..]
                    .iter()
                    .map(|c| -c.sdf(x))
                    .fold(base, f64::max)
            }
        }
    }

    /// Conservative bounding box.
    pub fn bounds(&self) -> Aabb {
        let primitive = |local: Aabb, t: &Transform| {
            let iso = t.isometry();
            let mut b = Aabb::empty();
            for i in 0..8 {
                let c = Point3::new(
                    if i & 1 == 0 { local.min.x } else { local.max.x },
                    if i & 2 == 0 { local.min.y } else { local.max.y },
                    if i & 4 == 0 { local.min.z } else { local.max.z },
                );
                b.include(&(iso * c));
            }
            b
        };
        match self {
            SceneNode::Sphere { radius, transform } => primitive(Aabb::cube(*radius), transform),
            SceneNode::Box {
                half_extents: h,
                transform,
            } => primitive(
                Aabb::new(Point3::new(-h[0], -h[1], -h[2]), Point3::new(h[0], h[1], h[2])),
                transform,
            ),
            SceneNode::Torus {
                major_radius,
                minor_radius,
                transform,
            } => {
                let r = major_radius + minor_radius;
                primitive(
                    Aabb::new(
                        Point3::new(-r, -minor_radius, -r),
                        Point3::new(r, *minor_radius, r),
                    ),
                    transform,
                )
            }
            SceneNode::Cylinder {
                radius,
                half_height,
                transform,
            } => primitive(
                Aabb::new(
                    Point3::new(-radius, -half_height, -radius),
                    Point3::new(*radius, *half_height, *radius),
                ),
                transform,
            ),
            SceneNode::Capsule {
                radius,
                half_height,
                transform,
            } => {
                let hy = half_height + radius;
                primitive(
                    Aabb::new(Point3::new(-radius, -hy, -radius), Point3::new(*radius, hy, *radius)),
                    transform,
                )
            }
            SceneNode::Union { children } => children
                .iter()
                .map(|c| c.bounds())
                .fold(Aabb::empty(), |a, b| a.union(&b)),
            SceneNode::Intersection { children } => children
                .iter()
                .map(|c| c.bounds())
                .reduce(|a, b| a.intersection(&b))
                .unwrap_or_else(Aabb::empty),
            SceneNode::Difference { children } => children[0].bounds(),
        }
    }

    fn validate(&self, path: &str) -> Result<(), SceneError> {
        let positive = |name: &'static str, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(SceneError::BadParameter {
                    path: path.to_string(),
                    name,
                    value,
                })
            }
        };
        let transform_ok = |t: &Transform| {
            if t.is_finite() {
                Ok(())
            } else {
                Err(SceneError::BadTransform {
                    path: path.to_string(),
                })
            }
        };
        match self {
            SceneNode::Sphere { radius, transform } => {
                positive("radius", *radius)?;
                transform_ok(transform)
            }
            SceneNode::Box {
                half_extents,
                transform,
            } => {
                for h in half_extents {
                    positive("half_extents", *h)?;
                }
                transform_ok(transform)
            }
            SceneNode::Torus {
                major_radius,
                minor_radius,
                transform,
            } => {
                positive("major_radius", *major_radius)?;
                positive("minor_radius", *minor_radius)?;
                transform_ok(transform)
            }
            SceneNode::Cylinder {
                radius,
                half_height,
                transform,
            }
            | SceneNode::Capsule {
                radius,
                half_height,
                transform,
            } => {
                positive("radius", *radius)?;
                positive("half_height", *half_height)?;
                transform_ok(transform)
            }
            SceneNode::Union { children }
            | SceneNode::Intersection { children }
            | SceneNode::Difference { children } => {
                if children.is_empty() {
                    return Err(SceneError::EmptyNode {
                        path: path.to_string(),
                    });
                }
                for (i, c) in children.iter().enumerate() {
                    c.validate(&format!("{path}/{i}"))?;
                }
                Ok(())
            }
        }
    }
}

/// A validated CSG scene that fits in the unit cube.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    root: SceneNode,
    bounds: Aabb,
}

#[derive(Serialize, Deserialize)]
struct SceneDocument {
    version: u32,
    root: SceneNode,
}

impl SceneSpec {
    pub fn new(root: SceneNode) -> Result<Self, SceneError> {
        root.validate("root")?;
        let bounds = root.bounds();
        if bounds.is_empty() || !Aabb::unit().contains_box(&bounds, 1e-9) {
            return Err(SceneError::OutOfBounds {
                min: bounds.min.into(),
                max: bounds.max.into(),
            });
        }
        Ok(Self { root, bounds })
    }

    pub fn sphere(radius: f64) -> Result<Self, SceneError> {
        Self::new(SceneNode::sphere(radius))
    }

    pub fn root(&self) -> &SceneNode {
        &self.root
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let doc: SceneDocument = serde_json::from_str(text)?;
        if doc.version != SCENE_VERSION {
            return Err(SceneError::Version(doc.version));
        }
        Self::new(doc.root)
    }

    pub fn to_json(&self) -> String {
        let doc = SceneDocument {
            version: SCENE_VERSION,
            root: self.root.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("scene serializes")
    }

    /// A chair-like fixture: seat slab, backrest and four cylindrical legs.
    pub fn chair() -> Self {
        let leg = |x: f64, z: f64| SceneNode::cylinder(0.04, 0.2).at([x, -0.22, z]);
        let root = SceneNode::Union {
            children: vec![
                SceneNode::cuboid([0.26, 0.035, 0.26]).at([0.0, 0.0, 0.0]),
                SceneNode::cuboid([0.26, 0.2, 0.035]).at([0.0, 0.235, -0.225]),
                leg(0.2, 0.2),
                leg(-0.2, 0.2),
                leg(0.2, -0.2),
                leg(-0.2, -0.2),
            ],
        };
        Self::new(root).expect("chair fixture is valid")
    }
}

impl Sdf for SceneSpec {
    fn sdf(&self, x: &Point3) -> f64 {
        self.root.sdf(x)
    }

    fn bounds(&self) -> Aabb {
        self.bounds
    }
}

/// Free-function form of [`SceneSpec`]'s distance query.
pub fn scene_sdf(scene: &SceneSpec, x: &Point3) -> f64 {
    scene.sdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn primitive_examples() {
        let s = SceneSpec::sphere(0.4).unwrap();
        assert_eq!(s.sdf(&Point3::origin()), -0.4);
        assert_abs_diff_eq!(s.sdf(&Point3::new(0.4, 0.0, 0.0)), 0.0);
        let b = SceneSpec::new(SceneNode::cuboid([0.2, 0.2, 0.2])).unwrap();
        assert_abs_diff_eq!(b.sdf(&Point3::new(0.5, 0.0, 0.0)), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn box_corner_and_inside() {
        let b = SceneNode::cuboid([0.1, 0.2, 0.3]);
        assert_abs_diff_eq!(b.sdf(&Point3::new(0.0, 0.0, 0.0)), -0.1);
        let d = b.sdf(&Point3::new(0.2, 0.3, 0.3));
        assert_abs_diff_eq!(d, (0.01f64 + 0.01).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn torus_cylinder_capsule() {
        let t = SceneNode::torus(0.3, 0.1);
        assert_abs_diff_eq!(t.sdf(&Point3::new(0.3, 0.0, 0.0)), -0.1);
        assert_abs_diff_eq!(t.sdf(&Point3::origin()), 0.2, epsilon = 1e-15);
        let c = SceneNode::cylinder(0.1, 0.2);
        assert_abs_diff_eq!(c.sdf(&Point3::new(0.0, 0.3, 0.0)), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(c.sdf(&Point3::new(0.2, 0.0, 0.0)), 0.1, epsilon = 1e-15);
        let k = SceneNode::capsule(0.1, 0.2);
        assert_abs_diff_eq!(k.sdf(&Point3::new(0.0, 0.4, 0.0)), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(k.sdf(&Point3::new(0.3, 0.1, 0.0)), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn transforms_move_the_primitive() {
        let s = SceneNode::sphere(0.1).at([0.2, 0.0, 0.0]);
        assert_abs_diff_eq!(s.sdf(&Point3::new(0.2, 0.0, 0.0)), -0.1);
        let rotated = SceneNode::cylinder(0.05, 0.3).with_transform(Transform::new(
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
        ));
        // axis y rotated onto -x
        assert_abs_diff_eq!(rotated.sdf(&Point3::new(0.3, 0.0, 0.0)), 0.0, epsilon = 1e-12);
        assert!(rotated.bounds().max.x > 0.29);
    }

    #[test]
    fn csg_combinations() {
        let a = SceneNode::sphere(0.2).at([-0.2, 0.0, 0.0]);
        let b = SceneNode::sphere(0.2).at([0.2, 0.0, 0.0]);
        let x = Point3::new(-0.2, 0.0, 0.0);
        let u = SceneNode::Union {
            children: vec![a.clone(), b.clone()],
        };
        assert_abs_diff_eq!(u.sdf(&x), -0.2);
        let i = SceneNode::Intersection {
            children: vec![a.clone(), b.clone()],
        };
        assert_abs_diff_eq!(i.sdf(&x), 0.2, epsilon = 1e-15);
        let d = SceneNode::Difference {
            children: vec![SceneNode::sphere(0.4), SceneNode::sphere(0.2)],
        };
        assert_abs_diff_eq!(d.sdf(&Point3::origin()), 0.2);
        assert_abs_diff_eq!(d.sdf(&Point3::new(0.3, 0.0, 0.0)), -0.1, epsilon = 1e-15);
    }

    #[test]
    fn validation_rejects_bad_scenes() {
        assert!(matches!(
            SceneSpec::sphere(0.6),
            Err(SceneError::OutOfBounds { .. })
        ));
        assert!(matches!(
            SceneSpec::sphere(-0.1),
            Err(SceneError::BadParameter { .. })
        ));
        assert!(matches!(
            SceneSpec::new(SceneNode::Union { children: vec![] }),
            Err(SceneError::EmptyNode { .. })
        ));
        let err = SceneSpec::from_json(r#"{"version": 7, "root": {"type": "sphere", "radius": 0.1}}"#)
            .unwrap_err();
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn json_round_trip() {
        let chair = SceneSpec::chair();
        let back = SceneSpec::from_json(&chair.to_json()).unwrap();
        assert_eq!(chair, back);
        let s = SceneSpec::from_json(r#"{"version": 1, "root": {"type": "sphere", "radius": 0.4}}"#)
            .unwrap();
        assert_eq!(s.sdf(&Point3::origin()), -0.4);
    }
}
