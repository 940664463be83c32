//! Reference implementation of field evaluation on the scalar [`Tape`].
//!
//! Slow but written directly from the definitions; the batched engine is
//! checked against it.

use super::{engine::top2_of, BasisField, BlendMode, DecoderConfig, FieldLayout, OutputActivation};
use crate::diff::{Tape, Var};
use crate::geom::Point3;

/// Tape nodes for one query point.
#[derive(Clone, Copy, Debug)]
pub struct TapedEval {
    pub mode: BlendMode,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub g_p: Var,
    pub g_q: Var,
    pub alpha_p: Var,
    pub alpha_q: Var,
    pub f_p: Var,
    pub f_q: Var,
    pub f_k: Var,
    pub value: Var,
}

/// A field whose parameters are tape leaves (in [`FieldLayout`] order).
pub struct TapedField {
    layout: FieldLayout,
    config: DecoderConfig,
    params: Vec<Var>,
    /// Row-major `A` per basis.
    domains: Vec<[Var; 9]>,
    centers: Vec<[Var; 3]>,
}

impl TapedField {
    pub fn build(tape: &mut Tape, field: &BasisField, params: &[Var]) -> Self {
        let layout = field.layout();
        assert_eq!(params.len(), layout.len, "parameter leaves do not match the field");
        let mut domains = Vec::with_capacity(field.len());
        let mut centers = Vec::with_capacity(field.len());
        for b in 0..field.len() {
            let r = &params[layout.r_raw(b)..layout.r_raw(b) + 6];
            let n1 = tape.norm(&r[0..3]);
            let b1: Vec<Var> = r[0..3].iter().map(|&v| tape.div(v, n1)).collect();
            let t = tape.dot(&b1, &r[3..6]);
            let w: Vec<Var> = (0..3)
                .map(|k| {
                    let proj = tape.mul(b1[k], t);
                    tape.sub(r[3 + k], proj)
                })
                .collect();
            let n2 = tape.norm(&w);
            let b2: Vec<Var> = w.iter().map(|&v| tape.div(v, n2)).collect();
            let cross = |tape: &mut Tape, i: usize, j: usize| {
                let a = tape.mul(b1[i], b2[j]);
                let c = tape.mul(b1[j], b2[i]);
                tape.sub(a, c)
            };
            let b3 = [cross(tape, 1, 2), cross(tape, 2, 0), cross(tape, 0, 1)];
            let cols = [b1, b2, b3.to_vec()];
            let mut a = [params[0]; 9];
            for k in 0..3 {
                let sk = tape.exp(params[layout.s_raw(b) + k]);
                for j in 0..3 {
                    a[3 * k + j] = tape.mul(sk, cols[j][k]);
                }
            }
            domains.push(a);
            let c = [0, 1, 2].map(|k| tape.add(params[layout.mu(b) + k], params[layout.delta(b) + k]));
            centers.push(c);
        }
        Self {
            layout,
            config: field.decoder().config().clone(),
            params: params.to_vec(),
            domains,
            centers,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn param(&self, i: usize) -> Var {
        self.params[i]
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    fn offset(&self, tape: &mut Tape, b: usize, x: &Point3) -> [Var; 3] {
        let c = self.centers[b];
        [0, 1, 2].map(|k| {
            let xk = tape.constant(x[k]);
            tape.sub(xk, c[k])
        })
    }

    pub fn rbf_weight(&self, tape: &mut Tape, b: usize, x: &Point3) -> Var {
        let d = self.offset(tape, b, x);
        let a = self.domains[b];
        let u: Vec<Var> = (0..3).map(|k| tape.dot(&a[3 * k..3 * k + 3], &d)).collect();
        let n = tape.norm_squared(&u);
        let m = tape.neg(n);
        tape.exp(m)
    }

    pub fn decoder_eval(&self, tape: &mut Tape, b: usize, x: &Point3) -> Var {
        let d = self.offset(tape, b, x);
        let mut input = d.to_vec();
        let zo = self.layout.z(b);
        input.extend_from_slice(&self.params[zo..zo + self.layout.latent_dim]);
        let last = self.layout.layers.len() - 1;
        let mut h: Vec<Var> = Vec::new();
        for (l, &(w_off, b_off, o, i)) in self.layout.layers.iter().enumerate() {
            let x_l: Vec<Var> = if l == 0 {
                input.clone()
            } else if self.config.skip_in.contains(&l) {
                h.iter().chain(input.iter()).copied().collect()
            } else {
                std::mem::take(&mut h)
            };
            h = (0..o)
                .map(|r| {
                    let w = &self.params[w_off + r * i..w_off + (r + 1) * i];
                    let z = tape.affine(w, &x_l, self.params[b_off + r]);
                    if l < last {
                        tape.relu(z)
                    } else if self.config.output == OutputActivation::Tanh {
                        tape.tanh(z)
                    } else {
                        z
                    }
                })
                .collect();
        }
        h[0]
    }

    /// Euclidean-nearest center by tape values, ties to the lower index.
    fn nearest(&self, tape: &Tape, x: &Point3) -> usize {
        let mut best = (0, f64::INFINITY);
        for (b, c) in self.centers.iter().enumerate() {
            let d: f64 = (0..3).map(|k| (x[k] - tape.value(c[k])).powi(2)).sum();
            if d < best.1 {
                best = (b, d);
            }
        }
        best.0
    }

    /// Blend at `x`. The selected indices are recorded in the tape signature.
    /// `f_k` is evaluated only when `need_euclid` is set (otherwise it
    /// aliases `f_p`).
    pub fn eval(&self, tape: &mut Tape, x: &Point3, need_euclid: bool) -> TapedEval {
        let g: Vec<Var> = (0..self.len()).map(|b| self.rbf_weight(tape, b, x)).collect();
        let gv = tape.values(&g);
        let (p, q) = top2_of(&gv);
        let k = self.nearest(tape, x);
        tape.mark(p as u32);
        tape.mark(q as u32);
        tape.mark(k as u32);
        let one = tape.constant(1.0);
        let zero = tape.constant(0.0);
        let (mode, p, q) = if self.len() == 1 {
            (BlendMode::Single, p, q)
        } else if gv[p] + gv[q] == 0.0 {
            (BlendMode::Fallback, k, k)
        } else {
            (BlendMode::Pair, p, q)
        };
        let f_p = self.decoder_eval(tape, p, x);
        let f_q = if q == p { f_p } else { self.decoder_eval(tape, q, x) };
        let f_k = if k == p {
            f_p
        } else if k == q {
            f_q
        } else if need_euclid {
            self.decoder_eval(tape, k, x)
        } else {
            f_p
        };
        let (alpha_p, alpha_q, value) = if mode == BlendMode::Pair {
            let s = tape.add(g[p], g[q]);
            let ap = tape.div(g[p], s);
            let aq = tape.div(g[q], s);
            let a = tape.mul(ap, f_p);
            let b = tape.mul(aq, f_q);
            (ap, aq, tape.add(a, b))
        } else {
            (one, zero, f_p)
        };
        TapedEval {
            mode,
            p,
            q,
            k,
            g_p: g[p],
            g_q: g[q],
            alpha_p,
            alpha_q,
            f_p,
            f_q,
            f_k,
            value,
        }
    }
}
