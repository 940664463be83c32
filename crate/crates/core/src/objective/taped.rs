//! The losses written directly on the scalar tape. Used as the reference
//! for the batched gradients and by the gradient checker.

use super::{Anchor, HingeMode, LossWeights, OptInputs};
use crate::diff::{Tape, Var};
use crate::field::taped::{TapedEval, TapedField};
use crate::field::BlendMode;
use crate::geom::{Point3, PointCloud};

fn mean(tape: &mut Tape, xs: &[Var]) -> Var {
    if xs.is_empty() {
        tape.constant(0.0)
    } else {
        tape.mean(xs)
    }
}

fn evals(tape: &mut Tape, tf: &TapedField, points: &[Point3], euclid: bool) -> Vec<TapedEval> {
    points.iter().map(|x| tf.eval(tape, x, euclid)).collect()
}

fn abs_residual(tape: &mut Tape, f: Var, y: f64) -> Var {
    let r = tape.add_const(f, -y);
    tape.abs(r)
}

pub fn loss_sdf(tape: &mut Tape, tf: &TapedField, points: &[Point3], targets: &[f64]) -> Var {
    let es = evals(tape, tf, points, false);
    let parts: Vec<Var> = es
        .iter()
        .zip(targets)
        .map(|(e, &y)| {
            let rp = abs_residual(tape, e.f_p, y);
            let rq = abs_residual(tape, e.f_q, y);
            let a = tape.mul(e.alpha_p, rp);
            let b = tape.mul(e.alpha_q, rq);
            tape.add(a, b)
        })
        .collect();
    mean(tape, &parts)
}

pub fn loss_sdf_euc(tape: &mut Tape, tf: &TapedField, points: &[Point3], targets: &[f64]) -> Var {
    let es = evals(tape, tf, points, true);
    let parts: Vec<Var> = es
        .iter()
        .zip(targets)
        .map(|(e, &y)| abs_residual(tape, e.f_k, y))
        .collect();
    mean(tape, &parts)
}

pub fn loss_smooth(tape: &mut Tape, tf: &TapedField, points: &[Point3]) -> Var {
    let es = evals(tape, tf, points, false);
    let parts: Vec<Var> = es
        .iter()
        .map(|e| {
            if e.mode == BlendMode::Pair {
                let d = tape.sub(e.f_p, e.f_q);
                tape.abs(d)
            } else {
                tape.constant(0.0)
            }
        })
        .collect();
    mean(tape, &parts)
}

pub fn loss_reg(tape: &mut Tape, tf: &TapedField) -> Var {
    let layout = tf.layout().clone();
    let parts: Vec<Var> = (0..tf.len())
        .map(|i| {
            let a: Vec<Var> = (0..3)
                .map(|k| tape.abs(tf.param(layout.delta(i) + k)))
                .collect();
            tape.sum(&a)
        })
        .collect();
    mean(tape, &parts)
}

pub fn loss_inte(
    tape: &mut Tape,
    tf: &TapedField,
    points: &[Point3],
    targets: &[f64],
    weights: &LossWeights,
    lambda_reg: f64,
) -> Var {
    let sdf = loss_sdf(tape, tf, points, targets);
    let euc = loss_sdf_euc(tape, tf, points, targets);
    let smooth = loss_smooth(tape, tf, points);
    let reg = loss_reg(tape, tf);
    let a = tape.add(sdf, euc);
    let b = tape.scale(smooth, weights.lambda_smooth);
    let c = tape.scale(reg, lambda_reg);
    let ab = tape.add(a, b);
    tape.add(ab, c)
}

pub fn loss_face(tape: &mut Tape, tf: &TapedField, points: &[Point3], eps: f64, mode: HingeMode) -> Var {
    let es = evals(tape, tf, points, false);
    let zero = tape.constant(0.0);
    let parts: Vec<Var> = es
        .iter()
        .map(|e| {
            let a = tape.abs(e.value);
            let t = tape.add_const(a, -eps);
            let h = match mode {
                HingeMode::Prose => tape.hinge(t),
                HingeMode::Formula => tape.min(t, zero),
            };
            tape.square(h)
        })
        .collect();
    mean(tape, &parts)
}

pub fn loss_pos(tape: &mut Tape, tf: &TapedField, points: &[Point3], eps: f64, mode: HingeMode) -> Var {
    let es = evals(tape, tf, points, false);
    let zero = tape.constant(0.0);
    let parts: Vec<Var> = es
        .iter()
        .map(|e| {
            let h = match mode {
                HingeMode::Prose => {
                    let n = tape.neg(e.value);
                    let t = tape.add_const(n, eps);
                    tape.hinge(t)
                }
                HingeMode::Formula => {
                    let n = tape.neg(e.value);
                    let t = tape.add_const(n, -eps);
                    tape.min(t, zero)
                }
            };
            tape.square(h)
        })
        .collect();
    mean(tape, &parts)
}

pub fn loss_adj(tape: &mut Tape, tf: &TapedField, points: &[Point3], a1: f64, a2: f64) -> Var {
    let es = evals(tape, tf, points, false);
    let parts: Vec<Var> = es
        .iter()
        .map(|e| {
            if e.mode != BlendMode::Pair {
                return tape.constant(0.0);
            }
            let ap = tape.abs(e.f_p);
            let aq = tape.abs(e.f_q);
            let m = tape.min(ap, aq);
            let m2 = tape.square(m);
            let e1 = tape.scale(m2, -a1);
            let w1 = tape.exp(e1);
            let dg = tape.sub(e.g_p, e.g_q);
            let dg2 = tape.square(dg);
            let e2 = tape.scale(dg2, -a2);
            let w2 = tape.exp(e2);
            let d = tape.sub(e.f_p, e.f_q);
            let d2 = tape.square(d);
            let w = tape.mul(w1, w2);
            tape.mul(w, d2)
        })
        .collect();
    mean(tape, &parts)
}

pub fn loss_stable(tape: &mut Tape, tf: &TapedField, anchor: &Anchor) -> Var {
    let layout = tf.layout().clone();
    let parts: Vec<Var> = (0..tf.len())
        .map(|i| {
            let mut diffs = Vec::with_capacity(3 + layout.latent_dim);
            for k in 0..3 {
                diffs.push(tape.add_const(tf.param(layout.mu(i) + k), -anchor.mu[i][k]));
            }
            for k in 0..layout.latent_dim {
                diffs.push(tape.add_const(tf.param(layout.z(i) + k), -anchor.z[i][k]));
            }
            tape.norm_squared(&diffs)
        })
        .collect();
    mean(tape, &parts)
}

pub fn loss_opt(
    tape: &mut Tape,
    tf: &TapedField,
    inputs: &OptInputs,
    weights: &LossWeights,
    anchor: &Anchor,
) -> Var {
    let face = loss_face(tape, tf, &inputs.surface.points, weights.epsilon, weights.hinge);
    let pos = loss_pos(tape, tf, &inputs.positive.points, weights.epsilon, weights.hinge);
    let adj = loss_adj(tape, tf, &inputs.adjacency.points, weights.a1, weights.a2);
    let stable = loss_stable(tape, tf, anchor);
    let terms = [
        tape.scale(face, weights.lambda_face),
        tape.scale(pos, weights.lambda_pos),
        tape.scale(adj, weights.lambda_adj),
        tape.scale(stable, weights.lambda_stable),
    ];
    tape.sum(&terms)
}

/// Chamfer loss with the points of the first set as tape nodes. Nearest
/// neighbour indices are recorded in the signature.
pub fn loss_chamfer(tape: &mut Tape, a: &[[Var; 3]], b: &PointCloud) -> Var {
    let av: Vec<Point3> = a
        .iter()
        .map(|p| Point3::new(tape.value(p[0]), tape.value(p[1]), tape.value(p[2])))
        .collect();
    let nearest = |p: &Point3, set: &mut dyn Iterator<Item = Point3>| {
        let mut best = (0, f64::INFINITY);
        for (j, q) in set.enumerate() {
            let d = (p - q).norm_squared();
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    };
    let mut da = Vec::with_capacity(a.len());
    for (i, p) in av.iter().enumerate() {
        let j = nearest(p, &mut b.points.iter().copied());
        tape.mark(j as u32);
        let d: Vec<Var> = (0..3).map(|k| tape.add_const(a[i][k], -b.points[j][k])).collect();
        da.push(tape.norm(&d));
    }
    let mut db = Vec::with_capacity(b.len());
    for q in b.iter() {
        let i = nearest(q, &mut av.iter().copied());
        tape.mark(i as u32);
        let d: Vec<Var> = (0..3).map(|k| tape.add_const(a[i][k], -q[k])).collect();
        db.push(tape.norm(&d));
    }
    let ma = mean(tape, &da);
    let mb = mean(tape, &db);
    tape.add(ma, mb)
}
