//! Continuous 6D rotation parameterization (Gram–Schmidt of two 3-vectors).

use crate::geom::{Mat3, Vec3};

/// Threshold below which a Gram–Schmidt input is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RotationDefect {
    /// `|a1|` is too small.
    FirstVector,
    /// `a2` is (nearly) parallel to `a1`.
    Parallel,
}

/// Maps `(a1, a2)` to the rotation with columns `(b1, b2, b1 x b2)`.
pub fn rotation_from_6d(r: &[f64; 6]) -> Result<Mat3, RotationDefect> {
    let a1 = Vec3::new(r[0], r[1], r[2]);
    let a2 = Vec3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    if !(n1 >= DEGENERATE_NORM) || !n1.is_finite() {
        return Err(RotationDefect::FirstVector);
    }
    let b1 = a1 / n1;
    let w = a2 - b1 * b1.dot(&a2);
    let n2 = w.norm();
    if !(n2 >= DEGENERATE_NORM) || !n2.is_finite() {
        return Err(RotationDefect::Parallel);
    }
    let b2 = w / n2;
    let b3 = b1.cross(&b2);
    Ok(Mat3::from_columns(&[b1, b2, b3]))
}

/// Pulls a gradient with respect to the rotation matrix back to the six raw
/// parameters.
pub fn rotation_from_6d_backward(r: &[f64; 6], d_rot: &Mat3) -> [f64; 6] {
    let a1 = Vec3::new(r[0], r[1], r[2]);
    let a2 = Vec3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    let b1 = a1 / n1;
    let t = b1.dot(&a2);
    let w = a2 - b1 * t;
    let n2 = w.norm();
    let b2 = w / n2;

    let mut db1: Vec3 = d_rot.column(0).into();
    let mut db2: Vec3 = d_rot.column(1).into();
    let db3: Vec3 = d_rot.column(2).into();
    db1 += b2.cross(&db3);
    db2 += db3.cross(&b1);

    let dw = (db2 - b2 * b2.dot(&db2)) / n2;
    let mut da2 = dw;
    let dt = -dw.dot(&b1);
    db1 -= dw * t;
    db1 += a2 * dt;
    da2 += b1 * dt;
    let da1 = (db1 - b1 * b1.dot(&db1)) / n1;
    [da1.x, da1.y, da1.z, da2.x, da2.y, da2.z]
}

pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn examples() {
        assert_eq!(rotation_from_6d(&IDENTITY_6D).unwrap(), Mat3::identity());
        assert_eq!(
            rotation_from_6d(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(),
            Mat3::identity()
        );
        let r = rotation_from_6d(&[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.column(0), Vec3::new(0.0, 1.0, 0.0));
        assert_eq!(r.column(1), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(r.column(2), Vec3::new(0.0, 0.0, -1.0));
        assert_abs_diff_eq!(r.determinant(), 1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(
            rotation_from_6d(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Err(RotationDefect::FirstVector)
        );
        assert_eq!(
            rotation_from_6d(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            Err(RotationDefect::Parallel)
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        let r = [0.3, -0.8, 0.5, 0.9, 0.2, -0.4];
        // objective: sum_ij c_ij R_ij
        let c = Mat3::new(0.1, -0.7, 0.4, 1.3, 0.2, -0.5, 0.6, 0.9, -1.1);
        let f = |r: &[f64; 6]| rotation_from_6d(r).unwrap().component_mul(&c).sum();
        let g = rotation_from_6d_backward(&r, &c);
        let h = 1e-6;
        for i in 0..6 {
            let mut a = r;
            let mut b = r;
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert_abs_diff_eq!(fd, g[i], epsilon = 1e-8);
        }
    }
}
