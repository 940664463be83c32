//! Loss functions over a [`BasisField`] and sample data.
//!
//! Every point-based loss is a mean over its point set; a term over an empty
//! set is 0. The value functions and the `*_value_and_grad` functions share
//! the same per-point code and summation order, so a value reported during
//! fitting can be reproduced bit-for-bit from a parameter snapshot.
//!
//! Subgradients follow the tape conventions: `|t|' = +1` at 0, a hinge has
//! derivative 0 at its kink, and `min(|f_p|, |f_q|)` ties select `f_p`.

pub mod taped;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{BasisField, BlendMode, Engine, PointAdjoint, PointEval};
use crate::geom::{Point3, PointCloud, SampleSet};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("anchor does not match the field: {0}")]
    Anchor(String),
    #[error("invalid loss weight {name} = {value}")]
    Weight { name: &'static str, value: f64 },
}

/// Which reading of the face/positive hinge to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HingeMode {
    /// Penalize `|sdf| > eps` on surface points and `sdf < eps` on positive
    /// points: `max(|sdf| - eps, 0)^2`, `max(eps - sdf, 0)^2`.
    #[default]
    Prose,
    /// The literal formulas `min(|sdf| - eps, 0)^2` and
    /// `min(-sdf - eps, 0)^2`.
    Formula,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_smooth: f64,
    /// Weight of the offset regularizer while it is active.
    pub lambda_reg: f64,
    pub lambda_face: f64,
    pub lambda_pos: f64,
    pub lambda_adj: f64,
    pub lambda_stable: f64,
    pub epsilon: f64,
    pub a1: f64,
    pub a2: f64,
    pub hinge: HingeMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_smooth: 0.5,
            lambda_reg: 0.01,
            lambda_face: 1.0,
            lambda_pos: 10.0,
            lambda_adj: 10.0,
            lambda_stable: 0.1,
            epsilon: 0.005,
            a1: 1e4,
            a2: 1e3,
            hinge: HingeMode::Prose,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (name, value) in [
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_reg", self.lambda_reg),
            ("lambda_face", self.lambda_face),
            ("lambda_pos", self.lambda_pos),
            ("lambda_adj", self.lambda_adj),
            ("lambda_stable", self.lambda_stable),
            ("epsilon", self.epsilon),
            ("a1", self.a1),
            ("a2", self.a2),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ObjectiveError::Weight { name, value });
            }
        }
        Ok(())
    }

    /// Regularizer weight in `epoch`: `lambda_reg` in epoch 0, then 0.
    pub fn lambda_reg_at(&self, epoch: usize) -> f64 {
        if epoch == 0 {
            self.lambda_reg
        } else {
            0.0
        }
    }
}

/// Reference centers and latents for the stability term.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub mu: Vec<Point3>,
    pub z: Vec<Vec<f64>>,
}

impl Anchor {
    pub fn from_field(field: &BasisField) -> Self {
        Self {
            mu: field.bases().iter().map(|b| b.mu).collect(),
            z: field.bases().iter().map(|b| b.z.clone()).collect(),
        }
    }

    fn check(&self, field: &BasisField) -> Result<(), ObjectiveError> {
        if self.mu.len() != field.len() || self.z.len() != field.len() {
            return Err(ObjectiveError::Anchor(format!(
                "{} anchored bases, field has {}",
                self.mu.len(),
                field.len()
            )));
        }
        if let Some(i) = self.z.iter().position(|z| z.len() != field.latent_dim()) {
            return Err(ObjectiveError::Anchor(format!(
                "anchor latent {i} has length {}, field uses {}",
                self.z[i].len(),
                field.latent_dim()
            )));
        }
        Ok(())
    }
}

/// Point sets driving post-optimization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptInputs {
    /// Points on the observed surface (face term).
    pub surface: PointCloud,
    /// Points known to be outside (positive term).
    pub positive: PointCloud,
    /// Points near the surface where neighbouring bases meet (adjacency term).
    pub adjacency: PointCloud,
}

/// Loss value, named terms and gradient in [`FieldLayout`](crate::field::FieldLayout) order.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub grad: Vec<f64>,
    pub fallbacks: u64,
}

pub(crate) fn sgn(t: f64) -> f64 {
    if t >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Adjoint of the blended value `a_p f_p + a_q f_q` scaled by `dv`.
fn value_adjoint(e: &PointEval, dv: f64) -> PointAdjoint {
    if e.mode == BlendMode::Pair {
        PointAdjoint {
            d_fp: dv * e.alpha_p,
            d_fq: dv * e.alpha_q,
            d_alpha_p: dv * e.f_p,
            d_alpha_q: dv * e.f_q,
            ..Default::default()
        }
    } else {
        PointAdjoint {
            d_fp: dv,
            ..Default::default()
        }
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

// ---------------------------------------------------------------------------
// Per-point heads. `terms` receives raw contributions; the returned adjoint
// is the derivative of `sum_t w[t] * contribution[t]`.

/// Terms `[sdf, euc, smooth]`.
fn inte_point(e: &PointEval, y: f64, w: [f64; 3], terms: &mut [f64; 4]) -> PointAdjoint {
    let rp = e.f_p - y;
    let rq = e.f_q - y;
    let rk = e.f_k - y;
    terms[0] += e.alpha_p * rp.abs() + e.alpha_q * rq.abs();
    terms[1] += rk.abs();
    let mut adj = PointAdjoint {
        d_fp: w[0] * e.alpha_p * sgn(rp),
        d_fq: w[0] * e.alpha_q * sgn(rq),
        d_fk: w[1] * sgn(rk),
        ..Default::default()
    };
    if e.mode == BlendMode::Pair {
        adj.d_alpha_p = w[0] * rp.abs();
        adj.d_alpha_q = w[0] * rq.abs();
        let d = e.f_p - e.f_q;
        terms[2] += d.abs();
        adj.d_fp += w[2] * sgn(d);
        adj.d_fq -= w[2] * sgn(d);
    }
    adj
}

fn face_point(e: &PointEval, eps: f64, mode: HingeMode, w: f64, terms: &mut [f64; 4]) -> PointAdjoint {
    let t = e.value.abs() - eps;
    let h = match mode {
        HingeMode::Prose => t.max(0.0),
        HingeMode::Formula => t.min(0.0),
    };
    terms[0] += h * h;
    value_adjoint(e, w * 2.0 * h * sgn(e.value))
}

fn pos_point(e: &PointEval, eps: f64, mode: HingeMode, w: f64, terms: &mut [f64; 4]) -> PointAdjoint {
    let h = match mode {
        HingeMode::Prose => (eps - e.value).max(0.0),
        HingeMode::Formula => (-e.value - eps).min(0.0),
    };
    terms[0] += h * h;
    value_adjoint(e, -w * 2.0 * h)
}

fn adj_point(e: &PointEval, a1: f64, a2: f64, w: f64, terms: &mut [f64; 4]) -> PointAdjoint {
    if e.mode != BlendMode::Pair {
        return PointAdjoint::default();
    }
    let (ap, aq) = (e.f_p.abs(), e.f_q.abs());
    let from_p = ap <= aq;
    let m = if from_p { ap } else { aq };
    let w1 = (-a1 * m * m).exp();
    let dg = e.g_p - e.g_q;
    let w2 = (-a2 * dg * dg).exp();
    let d = e.f_p - e.f_q;
    let v = w1 * w2 * d * d;
    terms[0] += v;
    // d/dm of w1 times d^2 w2
    let dm = -2.0 * a1 * m * w1 * w2 * d * d;
    let mut adj = PointAdjoint {
        d_fp: w * 2.0 * w1 * w2 * d,
        d_fq: -w * 2.0 * w1 * w2 * d,
        d_gp: w * (-2.0 * a2 * dg) * v,
        d_gq: w * (2.0 * a2 * dg) * v,
        ..Default::default()
    };
    if from_p {
        adj.d_fp += w * dm * sgn(e.f_p);
    } else {
        adj.d_fq += w * dm * sgn(e.f_q);
    }
    adj
}

// ---------------------------------------------------------------------------
// Values.

/// Means of `[sdf, euc, smooth]` over the samples.
pub fn inte_terms(field: &BasisField, points: &[Point3], targets: &[f64]) -> [f64; 3] {
    assert_eq!(points.len(), targets.len(), "points and targets differ in length");
    let (t, _) = Engine::new(field).reduce(points, true, |i, e, terms| {
        inte_point(e, targets[i], [0.0; 3], terms);
    });
    [0, 1, 2].map(|k| mean(t[k], points.len()))
}

/// `mean(a_p |f_p - y| + a_q |f_q - y|)`.
pub fn loss_sdf(field: &BasisField, samples: &SampleSet) -> f64 {
    inte_terms(field, &samples.points, &samples.targets)[0]
}

/// `mean |f_p - f_q|`; 0 for a single basis.
pub fn loss_smooth(field: &BasisField, samples: &SampleSet) -> f64 {
    inte_terms(field, &samples.points, &samples.targets)[2]
}

/// `mean |f_k - y|` with `k` the Euclidean-nearest effective center.
pub fn loss_sdf_euc(field: &BasisField, samples: &SampleSet) -> f64 {
    inte_terms(field, &samples.points, &samples.targets)[1]
}

/// Mean over bases of `|delta_i|_1`.
pub fn loss_reg(field: &BasisField) -> f64 {
    let s: f64 = field
        .bases()
        .iter()
        .map(|b| b.delta.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    mean(s, field.len())
}

fn inte_total(t: [f64; 3], reg: f64, weights: &LossWeights, lambda_reg: f64) -> f64 {
    t[0] + t[1] + weights.lambda_smooth * t[2] + lambda_reg * reg
}

/// `L_sdf + L_euc + lambda_smooth L_smooth + lambda_reg(epoch) L_reg`.
pub fn loss_inte(field: &BasisField, samples: &SampleSet, weights: &LossWeights, epoch: usize) -> f64 {
    let t = inte_terms(field, &samples.points, &samples.targets);
    inte_total(t, loss_reg(field), weights, weights.lambda_reg_at(epoch))
}

fn nearest_distance(p: &Point3, cloud: &PointCloud) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in cloud.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    (best.0, best.1.sqrt())
}

/// Two-sided mean of unsquared nearest-neighbour distances (brute force).
pub fn loss_chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, ObjectiveError> {
    Ok(chamfer_value_and_grad(a, b)?.0)
}

/// Chamfer loss and its gradient with respect to the points of `a`.
pub fn chamfer_value_and_grad(
    a: &PointCloud,
    b: &PointCloud,
) -> Result<(f64, Vec<[f64; 3]>), ObjectiveError> {
    if a.is_empty() {
        return Err(ObjectiveError::Empty("first point set"));
    }
    if b.is_empty() {
        return Err(ObjectiveError::Empty("second point set"));
    }
    let mut grad = vec![[0.0; 3]; a.len()];
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut sa = 0.0;
    for (i, p) in a.iter().enumerate() {
        let (j, d) = nearest_distance(p, b);
        sa += d;
        if d > 0.0 {
            let u = (p - b.points[j]) / d;
            for k in 0..3 {
                grad[i][k] += u[k] / na;
            }
        }
    }
    let mut sb = 0.0;
    for q in b.iter() {
        let (i, d) = nearest_distance(q, a);
        sb += d;
        if d > 0.0 {
            let u = (a.points[i] - q) / d;
            for k in 0..3 {
                grad[i][k] += u[k] / nb;
            }
        }
    }
    Ok((sa / na + sb / nb, grad))
}

/// Mean of the face hinge over `points`.
pub fn loss_face(field: &BasisField, points: &PointCloud, eps: f64, mode: HingeMode) -> f64 {
    let (t, _) = Engine::new(field).reduce(&points.points, false, |_, e, terms| {
        face_point(e, eps, mode, 0.0, terms);
    });
    mean(t[0], points.len())
}

/// Mean of the positive-side hinge over `points`.
pub fn loss_pos(field: &BasisField, points: &PointCloud, eps: f64, mode: HingeMode) -> f64 {
    let (t, _) = Engine::new(field).reduce(&points.points, false, |_, e, terms| {
        pos_point(e, eps, mode, 0.0, terms);
    });
    mean(t[0], points.len())
}

/// `mean w1 w2 (f_p - f_q)^2`, `w1 = exp(-a1 min(|f_p|, |f_q|)^2)`,
/// `w2 = exp(-a2 (g_p - g_q)^2)`; 0 for a single basis.
pub fn loss_adj(field: &BasisField, points: &PointCloud, a1: f64, a2: f64) -> f64 {
    let (t, _) = Engine::new(field).reduce(&points.points, false, |_, e, terms| {
        adj_point(e, a1, a2, 0.0, terms);
    });
    mean(t[0], points.len())
}

/// Mean over bases of `|mu - mu_hat|^2 + |z - z_hat|^2`.
pub fn loss_stable(field: &BasisField, anchor: &Anchor) -> Result<f64, ObjectiveError> {
    anchor.check(field)?;
    let s: f64 = field
        .bases()
        .iter()
        .enumerate()
        .map(|(i, b)| {
            (b.mu - anchor.mu[i]).norm_squared()
                + b.z.iter().zip(&anchor.z[i]).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()
        })
        .sum();
    Ok(mean(s, field.len()))
}

/// `lambda_face L_face + lambda_pos L_pos + lambda_adj L_adj + lambda_stable L_stable`.
pub fn loss_opt(
    field: &BasisField,
    inputs: &OptInputs,
    weights: &LossWeights,
    anchor: &Anchor,
) -> Result<f64, ObjectiveError> {
    let face = loss_face(field, &inputs.surface, weights.epsilon, weights.hinge);
    let pos = loss_pos(field, &inputs.positive, weights.epsilon, weights.hinge);
    let adj = loss_adj(field, &inputs.adjacency, weights.a1, weights.a2);
    let stable = loss_stable(field, anchor)?;
    Ok(opt_total(face, pos, adj, stable, weights))
}

fn opt_total(face: f64, pos: f64, adj: f64, stable: f64, w: &LossWeights) -> f64 {
    w.lambda_face * face + w.lambda_pos * pos + w.lambda_adj * adj + w.lambda_stable * stable
}

// ---------------------------------------------------------------------------
// Values with gradients.

fn scaled(mut g: Vec<f64>, n: usize) -> Vec<f64> {
    if n > 0 {
        let s = 1.0 / n as f64;
        g.iter_mut().for_each(|v| *v *= s);
    }
    g
}

/// Fitting objective and its gradient over every field parameter.
/// Terms: `sdf`, `euc`, `smooth`, `reg`.
pub fn inte_value_and_grad(
    field: &BasisField,
    points: &[Point3],
    targets: &[f64],
    weights: &LossWeights,
    lambda_reg: f64,
) -> LossEval {
    inte_weighted_value_and_grad(field, points, targets, [1.0, 1.0, weights.lambda_smooth], lambda_reg)
}

/// `w[0] L_sdf + w[1] L_euc + w[2] L_smooth + lambda_reg L_reg` and its
/// gradient; isolates single terms for gradient checks.
pub fn inte_weighted_value_and_grad(
    field: &BasisField,
    points: &[Point3],
    targets: &[f64],
    w: [f64; 3],
    lambda_reg: f64,
) -> LossEval {
    assert_eq!(points.len(), targets.len(), "points and targets differ in length");
    let out = Engine::new(field).value_and_grad(points, true, |i, e, terms| {
        inte_point(e, targets[i], w, terms)
    });
    let n = points.len();
    let t = [0, 1, 2].map(|k| mean(out.terms[k], n));
    let reg = loss_reg(field);
    let mut grad = scaled(out.grad, n);
    if lambda_reg != 0.0 {
        let layout = field.layout();
        let s = lambda_reg / field.len() as f64;
        for (i, b) in field.bases().iter().enumerate() {
            for k in 0..3 {
                grad[layout.delta(i) + k] += s * sgn(b.delta[k]);
            }
        }
    }
    let terms = BTreeMap::from([
        ("sdf".to_string(), t[0]),
        ("euc".to_string(), t[1]),
        ("smooth".to_string(), t[2]),
        ("reg".to_string(), reg),
    ]);
    LossEval {
        total: w[0] * t[0] + w[1] * t[1] + w[2] * t[2] + lambda_reg * reg,
        terms,
        grad,
        fallbacks: out.fallbacks,
    }
}

/// Post-optimization objective. The gradient is restricted to the centers
/// `mu` and latents `z`; every other coordinate is exactly 0.
/// Terms: `face`, `pos`, `adj`, `stable`.
pub fn opt_value_and_grad(
    field: &BasisField,
    inputs: &OptInputs,
    weights: &LossWeights,
    anchor: &Anchor,
) -> Result<LossEval, ObjectiveError> {
    let mut eval = opt_value_and_grad_unmasked(field, inputs, weights, anchor)?;
    for (g, keep) in eval.grad.iter_mut().zip(&center_latent_mask(field)) {
        if !keep {
            *g = 0.0;
        }
    }
    Ok(eval)
}

/// [`opt_value_and_grad`] with the gradient over every field parameter.
pub fn opt_value_and_grad_unmasked(
    field: &BasisField,
    inputs: &OptInputs,
    weights: &LossWeights,
    anchor: &Anchor,
) -> Result<LossEval, ObjectiveError> {
    anchor.check(field)?;
    let engine = Engine::new(field);
    let (eps, mode) = (weights.epsilon, weights.hinge);
    let face = engine.value_and_grad(&inputs.surface.points, false, |_, e, t| {
        face_point(e, eps, mode, weights.lambda_face, t)
    });
    let pos = engine.value_and_grad(&inputs.positive.points, false, |_, e, t| {
        pos_point(e, eps, mode, weights.lambda_pos, t)
    });
    let adj = engine.value_and_grad(&inputs.adjacency.points, false, |_, e, t| {
        adj_point(e, weights.a1, weights.a2, weights.lambda_adj, t)
    });
    let layout = field.layout();
    let mut grad = vec![0.0; layout.len];
    for (part, n) in [
        (&face.grad, inputs.surface.len()),
        (&pos.grad, inputs.positive.len()),
        (&adj.grad, inputs.adjacency.len()),
    ] {
        if n == 0 {
            continue;
        }
        let s = 1.0 / n as f64;
        for (g, v) in grad.iter_mut().zip(part) {
            *g += s * v;
        }
    }
    let stable = loss_stable(field, anchor)?;
    let s = weights.lambda_stable * 2.0 / field.len() as f64;
    for (i, b) in field.bases().iter().enumerate() {
        for k in 0..3 {
            grad[layout.mu(i) + k] += s * (b.mu[k] - anchor.mu[i][k]);
        }
        for k in 0..layout.latent_dim {
            grad[layout.z(i) + k] += s * (b.z[k] - anchor.z[i][k]);
        }
    }
    let t = [
        mean(face.terms[0], inputs.surface.len()),
        mean(pos.terms[0], inputs.positive.len()),
        mean(adj.terms[0], inputs.adjacency.len()),
    ];
    let terms = BTreeMap::from([
        ("face".to_string(), t[0]),
        ("pos".to_string(), t[1]),
        ("adj".to_string(), t[2]),
        ("stable".to_string(), stable),
    ]);
    Ok(LossEval {
        total: opt_total(t[0], t[1], t[2], stable, weights),
        terms,
        grad,
        fallbacks: face.fallbacks + pos.fallbacks + adj.fallbacks,
    })
}

/// Coordinates (in [`FieldLayout`](crate::field::FieldLayout) order) of every
/// center `mu` and latent `z`.
pub fn center_latent_mask(field: &BasisField) -> Vec<bool> {
    let layout = field.layout();
    let mut mask = vec![false; layout.len];
    for i in 0..field.len() {
        mask[layout.mu(i)..layout.mu(i) + 3].iter_mut().for_each(|m| *m = true);
        mask[layout.z(i)..layout.z(i) + layout.latent_dim]
            .iter_mut()
            .for_each(|m| *m = true);
    }
    mask
}
