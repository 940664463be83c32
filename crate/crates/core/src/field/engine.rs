//! Batched evaluation of a [`BasisField`] with a hand-written reverse pass.
//!
//! Points are processed in fixed-size chunks. Each chunk classifies its
//! points (top-2, Euclidean nearest), stacks one decoder input row per
//! distinct basis a point needs, runs the MLP as dense matrix products and,
//! when gradients are requested, pulls per-point adjoints back to every
//! field parameter. Chunks may run in parallel; their partial sums are
//! reduced in chunk order, so results do not depend on the thread count.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rayon::prelude::*;

use super::{rotation_from_6d, rotation_from_6d_backward, BasisField, FieldLayout, OutputActivation};
use crate::geom::{Mat3, Point3, Vec3};

/// Points per chunk. Fixed so the reduction order never changes.
pub const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlendMode {
    /// `N = 1`: the only basis with weight 1.
    Single,
    /// Regular two-basis blend.
    Pair,
    /// `g_p + g_q` underflowed to 0: the Euclidean-nearest basis with weight 1.
    Fallback,
}

/// Everything computed for one query point.
///
/// In `Single` and `Fallback` mode `q == p`, `f_q == f_p`, `alpha_p = 1` and
/// `alpha_q = 0`. `f_k` is the decoder value of the Euclidean-nearest basis
/// `k`; it is NaN when it was not requested and `k` is neither `p` nor `q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointEval {
    pub mode: BlendMode,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub g_p: f64,
    pub g_q: f64,
    pub alpha_p: f64,
    pub alpha_q: f64,
    pub f_p: f64,
    pub f_q: f64,
    pub f_k: f64,
    pub value: f64,
}

/// Derivatives of a per-point loss contribution with respect to the
/// quantities in [`PointEval`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PointAdjoint {
    pub d_fp: f64,
    pub d_fq: f64,
    pub d_fk: f64,
    pub d_alpha_p: f64,
    pub d_alpha_q: f64,
    pub d_gp: f64,
    pub d_gq: f64,
}

/// Result of [`Engine::value_and_grad`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradOutput {
    /// Per-term sums of the values the head wrote (not averaged).
    pub terms: [f64; 4],
    /// Gradient of `sum over points of the head's loss` in [`FieldLayout`]
    /// order.
    pub grad: Vec<f64>,
    pub fallbacks: u64,
}

/// Indices of the two largest weights, larger first, ties to the lower
/// index; `(0, 0)` for a single weight.
pub fn top2_of(g: &[f64]) -> (usize, usize) {
    if g.len() == 1 {
        return (0, 0);
    }
    let (mut p, mut q) = (usize::MAX, usize::MAX);
    for (i, &w) in g.iter().enumerate() {
        if p == usize::MAX || w > g[p] {
            q = p;
            p = i;
        } else if q == usize::MAX || w > g[q] {
            q = i;
        }
    }
    (p, q)
}

struct Chunk {
    evals: Vec<PointEval>,
    /// Basis of every decoder row.
    row_basis: Vec<usize>,
    /// Row of `p`, `q` and `k` per point (`usize::MAX` when `k` is unused).
    slots: Vec<[usize; 3]>,
    /// Input of every layer.
    inputs: Vec<Array2<f64>>,
    out: Array1<f64>,
    fallbacks: u64,
}

struct ChunkGrad {
    grad: Vec<f64>,
    d_a: Vec<Mat3>,
    d_c: Vec<Vec3>,
    terms: [f64; 4],
}

pub struct Engine<'a> {
    field: &'a BasisField,
}

impl<'a> Engine<'a> {
    pub fn new(field: &'a BasisField) -> Self {
        Self { field }
    }

    fn classify(&self, x: &Point3, g: &mut Vec<f64>) -> PointEval {
        let doms = self.field.domains();
        g.clear();
        g.extend(doms.iter().map(|d| (-(d.a * (x - d.center)).norm_squared()).exp()));
        let k = self.field.nearest_center(x);
        let (p, q) = top2_of(g);
        let mut e = PointEval {
            mode: BlendMode::Pair,
            p,
            q,
            k,
            g_p: g[p],
            g_q: g[q],
            alpha_p: 1.0,
            alpha_q: 0.0,
            f_p: f64::NAN,
            f_q: f64::NAN,
            f_k: f64::NAN,
            value: f64::NAN,
        };
        if doms.len() == 1 {
            e.mode = BlendMode::Single;
        } else if g[p] + g[q] == 0.0 {
            e.mode = BlendMode::Fallback;
            e.p = k;
            e.q = k;
        } else {
            let s = g[p] + g[q];
            e.alpha_p = g[p] / s;
            e.alpha_q = g[q] / s;
        }
        e
    }

    fn finish(e: &mut PointEval) {
        e.value = match e.mode {
            BlendMode::Pair => e.alpha_p * e.f_p + e.alpha_q * e.f_q,
            _ => e.f_p,
        };
    }

    /// Single-point evaluation with the scalar decoder.
    pub fn eval_point(&self, x: &Point3, need_euclid: bool) -> PointEval {
        let mut g = Vec::with_capacity(self.field.len());
        let mut e = self.classify(x, &mut g);
        e.f_p = self.field.decoder_eval(e.p, x);
        e.f_q = if e.q == e.p { e.f_p } else { self.field.decoder_eval(e.q, x) };
        if e.k == e.p {
            e.f_k = e.f_p;
        } else if e.k == e.q {
            e.f_k = e.f_q;
        } else if need_euclid {
            e.f_k = self.field.decoder_eval(e.k, x);
        }
        Self::finish(&mut e);
        e
    }

    fn forward_chunk(&self, xs: &[Point3], need_euclid: bool) -> Chunk {
        let field = self.field;
        let mut g = Vec::with_capacity(field.len());
        let mut evals: Vec<PointEval> = xs.iter().map(|x| self.classify(x, &mut g)).collect();
        let mut row_basis = Vec::with_capacity(2 * xs.len());
        let mut row_point = Vec::with_capacity(2 * xs.len());
        let mut slots = Vec::with_capacity(xs.len());
        let mut fallbacks = 0;
        for (i, e) in evals.iter().enumerate() {
            let mut push = |b: usize| {
                row_basis.push(b);
                row_point.push(i);
                row_basis.len() - 1
            };
            let sp = push(e.p);
            let sq = if e.q == e.p { sp } else { push(e.q) };
            let sk = if e.k == e.p {
                sp
            } else if e.k == e.q {
                sq
            } else if need_euclid {
                push(e.k)
            } else {
                usize::MAX
            };
            slots.push([sp, sq, sk]);
            if e.mode == BlendMode::Fallback {
                fallbacks += 1;
            }
        }

        let dim = field.decoder().input_dim();
        let mut x0 = Array2::<f64>::zeros((row_basis.len(), dim));
        for (r, (&b, &i)) in row_basis.iter().zip(&row_point).enumerate() {
            let d = xs[i] - field.domains()[b].center;
            let mut row = x0.row_mut(r);
            row[0] = d.x;
            row[1] = d.y;
            row[2] = d.z;
            for (dst, &src) in row.iter_mut().skip(3).zip(&field.bases()[b].z) {
                *dst = src;
            }
        }

        let (inputs, out) = mlp_forward(field, x0);
        for (e, slot) in evals.iter_mut().zip(&slots) {
            e.f_p = out[slot[0]];
            e.f_q = out[slot[1]];
            if slot[2] != usize::MAX {
                e.f_k = out[slot[2]];
            }
            Self::finish(e);
        }
        Chunk {
            evals,
            row_basis,
            slots,
            inputs,
            out,
            fallbacks,
        }
    }

    /// Batched evaluation of every point.
    pub fn evaluate(&self, xs: &[Point3], need_euclid: bool) -> Vec<PointEval> {
        let chunks: Vec<Chunk> = xs
            .par_chunks(CHUNK)
            .map(|c| self.forward_chunk(c, need_euclid))
            .collect();
        let mut out = Vec::with_capacity(xs.len());
        for c in chunks {
            self.field.record_fallbacks(c.fallbacks);
            out.extend(c.evals);
        }
        out
    }

    /// Batched blended signed distances.
    pub fn values(&self, xs: &[Point3]) -> Vec<f64> {
        let chunks: Vec<(Vec<f64>, u64)> = xs
            .par_chunks(CHUNK)
            .map(|c| {
                let ch = self.forward_chunk(c, false);
                (ch.evals.iter().map(|e| e.value).collect(), ch.fallbacks)
            })
            .collect();
        let mut out = Vec::with_capacity(xs.len());
        for (v, n) in chunks {
            self.field.record_fallbacks(n);
            out.extend(v);
        }
        out
    }

    /// Per-term sums of a per-point function, accumulated in exactly the
    /// order [`value_and_grad`](Self::value_and_grad) uses, so both report
    /// bit-identical values. Also returns the fallback count.
    pub fn reduce<F>(&self, xs: &[Point3], need_euclid: bool, f: F) -> ([f64; 4], u64)
    where
        F: Fn(usize, &PointEval, &mut [f64; 4]) + Sync,
    {
        let parts: Vec<([f64; 4], u64)> = xs
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, c)| {
                let chunk = self.forward_chunk(c, need_euclid);
                let mut terms = [0.0; 4];
                for (i, e) in chunk.evals.iter().enumerate() {
                    f(ci * CHUNK + i, e, &mut terms);
                }
                (terms, chunk.fallbacks)
            })
            .collect();
        let mut terms = [0.0; 4];
        let mut fallbacks = 0;
        for (t, n) in parts {
            for k in 0..4 {
                terms[k] += t[k];
            }
            fallbacks += n;
        }
        (terms, fallbacks)
    }

    /// Sum over points of a per-point loss and its gradient with respect to
    /// every field parameter.
    ///
    /// `head(i, eval, terms)` receives the global point index, adds the
    /// point's contribution to up to four named terms, and returns the
    /// derivative of its total contribution.
    pub fn value_and_grad<H>(&self, xs: &[Point3], need_euclid: bool, head: H) -> GradOutput
    where
        H: Fn(usize, &PointEval, &mut [f64; 4]) -> PointAdjoint + Sync,
    {
        let layout = self.field.layout();
        let parts: Vec<(ChunkGrad, u64)> = xs
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, c)| {
                let chunk = self.forward_chunk(c, need_euclid);
                let g = self.backward_chunk(&layout, c, ci * CHUNK, &chunk, &head);
                (g, chunk.fallbacks)
            })
            .collect();

        let n = self.field.len();
        let mut grad = vec![0.0; layout.len];
        let mut d_a = vec![Mat3::zeros(); n];
        let mut d_c = vec![Vec3::zeros(); n];
        let mut terms = [0.0; 4];
        let mut fallbacks = 0;
        for (part, f) in parts {
            for (a, b) in grad.iter_mut().zip(&part.grad) {
                *a += b;
            }
            for b in 0..n {
                d_a[b] += part.d_a[b];
                d_c[b] += part.d_c[b];
            }
            for (t, v) in terms.iter_mut().zip(&part.terms) {
                *t += v;
            }
            fallbacks += f;
        }
        for (b, basis) in self.field.bases().iter().enumerate() {
            let a = self.field.domains()[b].a;
            let mut d_rot = Mat3::zeros();
            for k in 0..3 {
                let sk = basis.s_raw[k].exp();
                let mut ds = 0.0;
                for j in 0..3 {
                    ds += d_a[b][(k, j)] * a[(k, j)];
                    d_rot[(k, j)] = d_a[b][(k, j)] * sk;
                }
                grad[layout.s_raw(b) + k] += ds;
            }
            debug_assert!(rotation_from_6d(&basis.r_raw).is_ok());
            let dr = rotation_from_6d_backward(&basis.r_raw, &d_rot);
            for (k, v) in dr.iter().enumerate() {
                grad[layout.r_raw(b) + k] += v;
            }
            for k in 0..3 {
                grad[layout.mu(b) + k] += d_c[b][k];
                grad[layout.delta(b) + k] += d_c[b][k];
            }
        }
        GradOutput {
            terms,
            grad,
            fallbacks,
        }
    }

    fn backward_chunk<H>(
        &self,
        layout: &FieldLayout,
        xs: &[Point3],
        offset: usize,
        chunk: &Chunk,
        head: &H,
    ) -> ChunkGrad
    where
        H: Fn(usize, &PointEval, &mut [f64; 4]) -> PointAdjoint,
    {
        let field = self.field;
        let n = field.len();
        let mut out = ChunkGrad {
            grad: vec![0.0; layout.len],
            d_a: vec![Mat3::zeros(); n],
            d_c: vec![Vec3::zeros(); n],
            terms: [0.0; 4],
        };
        let mut d_out = Array1::<f64>::zeros(chunk.row_basis.len());
        for (i, (e, slot)) in chunk.evals.iter().zip(&chunk.slots).enumerate() {
            let adj = head(offset + i, e, &mut out.terms);
            d_out[slot[0]] += adj.d_fp;
            d_out[slot[1]] += adj.d_fq;
            if adj.d_fk != 0.0 {
                assert!(slot[2] != usize::MAX, "head used f_k without requesting it");
                d_out[slot[2]] += adj.d_fk;
            }
            if e.mode != BlendMode::Pair {
                continue;
            }
            let cross = (adj.d_alpha_p - adj.d_alpha_q) * e.alpha_p * e.alpha_q;
            let dlg_p = e.g_p * adj.d_gp + cross;
            let dlg_q = e.g_q * adj.d_gq - cross;
            for (b, dlg) in [(e.p, dlg_p), (e.q, dlg_q)] {
                if dlg == 0.0 {
                    continue;
                }
                let dom = &field.domains()[b];
                let d = xs[i] - dom.center;
                let u = dom.a * d;
                let du = u * (-2.0 * dlg);
                out.d_a[b] += du * d.transpose();
                out.d_c[b] -= dom.a.transpose() * du;
            }
        }

        let d_x0 = mlp_backward(field, layout, &chunk.inputs, &chunk.out, d_out, &mut out.grad);
        let d_z = layout.latent_dim;
        for (r, &b) in chunk.row_basis.iter().enumerate() {
            let row = d_x0.row(r);
            out.d_c[b] -= Vec3::new(row[0], row[1], row[2]);
            let zo = layout.z(b);
            for k in 0..d_z {
                out.grad[zo + k] += row[3 + k];
            }
        }
        out
    }
}

fn mlp_forward(field: &BasisField, x0: Array2<f64>) -> (Vec<Array2<f64>>, Array1<f64>) {
    let dec = field.decoder();
    let config = dec.config();
    let last = dec.layers().len() - 1;
    let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(dec.layers().len());
    let mut h = x0.clone();
    for (l, layer) in dec.layers().iter().enumerate() {
        let x = if l > 0 && config.skip_in.contains(&l) {
            concatenate![Axis(1), h, x0]
        } else {
            h
        };
        let mut z = x.dot(&layer.weight.t());
        z += &layer.bias;
        inputs.push(x);
        if l < last {
            z.mapv_inplace(|v| v.max(0.0));
        } else if config.output == OutputActivation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
        h = z;
    }
    let out = h.column(0).to_owned();
    (inputs, out)
}

/// Accumulates decoder weight gradients into `grad` and returns the gradient
/// with respect to the decoder input rows.
fn mlp_backward(
    field: &BasisField,
    layout: &FieldLayout,
    inputs: &[Array2<f64>],
    out: &Array1<f64>,
    d_out: Array1<f64>,
    grad: &mut [f64],
) -> Array2<f64> {
    let dec = field.decoder();
    let config = dec.config();
    let rows = d_out.len();
    let mut d_z = match config.output {
        OutputActivation::Linear => d_out,
        OutputActivation::Tanh => &d_out * &out.mapv(|f| 1.0 - f * f),
    }
    .into_shape_with_order((rows, 1))
    .expect("column vector");
    let mut d_x0 = Array2::<f64>::zeros((rows, dec.input_dim()));
    for l in (0..dec.layers().len()).rev() {
        let layer = &dec.layers()[l];
        let x = &inputs[l];
        let (w_off, b_off, o, i) = layout.layers[l];
        let d_w = d_z.t().dot(x);
        for (dst, src) in grad[w_off..w_off + o * i].iter_mut().zip(d_w.iter()) {
            *dst += src;
        }
        let d_b = d_z.sum_axis(Axis(0));
        for (dst, src) in grad[b_off..b_off + o].iter_mut().zip(d_b.iter()) {
            *dst += src;
        }
        let d_x = d_z.dot(&layer.weight);
        if l == 0 {
            d_x0 += &d_x;
            break;
        }
        let width = config.hidden[l - 1];
        if config.skip_in.contains(&l) {
            d_x0 += &d_x.slice(s![.., width..]);
        }
        let h = x.slice(s![.., ..width]);
        let mut d_h = d_x.slice(s![.., ..width]).to_owned();
        ndarray::Zip::from(&mut d_h)
            .and(&h)
            .for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
        d_z = d_h;
    }
    d_x0
}
