//! Scalar reverse-mode tape (Wengert list).
//!
//! Every node stores its value and the partial derivatives with respect to
//! its inputs, which always precede it. `backward` walks the list once in
//! reverse.
//!
//! Conventions at non-differentiable points:
//!
//! * `max(a, b)` / `min(a, b)` with `a == b`: the left argument receives the
//!   gradient.
//! * `abs(0)`: derivative `+1` (`abs(x) = max(x, -x)`, left wins).
//! * `relu(0)`: derivative `0` (`relu(x) = max(0, x)`, left wins).
//! * `norm` of a zero vector: derivative `0`.
//!
//! Branch decisions are recorded in a signature so callers can detect when a
//! perturbation crosses a kink.

use super::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Branch codes stored in the signature.
const BRANCH_LEFT: u32 = 0;
const BRANCH_RIGHT: u32 = 1;
const BRANCH_TIE: u32 = 2;

#[derive(Clone, Debug, Default)]
pub struct Tape {
    values: Vec<f64>,
    edge_start: Vec<u32>,
    edges: Vec<(u32, f64)>,
    leaves: Vec<u32>,
    signature: Vec<u32>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    pub fn values(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.value(v)).collect()
    }

    /// Discrete decisions made while building the tape.
    pub fn signature(&self) -> &[u32] {
        &self.signature
    }

    /// Records an external discrete decision (for example a selected index).
    pub fn mark(&mut self, decision: u32) {
        self.signature.push(decision);
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    fn push(&mut self, value: f64, inputs: &[(Var, f64)]) -> Var {
        let id = self.values.len() as u32;
        self.values.push(value);
        self.edge_start.push(self.edges.len() as u32);
        self.edges
            .extend(inputs.iter().map(|&(v, d)| (v.0, d)));
        Var(id)
    }

    /// Differentiable input. Gradients are reported in leaf creation order.
    pub fn leaf(&mut self, value: f64) -> Var {
        let v = self.push(value, &[]);
        self.leaves.push(v.0);
        v
    }

    pub fn leaves(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&x| self.leaf(x)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(value, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x * y, &[(a, y), (b, x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x / y, &[(a, 1.0 / y), (b, -x / (y * y))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(-x, &[(a, -1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        self.push(c * x, &[(a, c)])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        self.push(x + c, &[(a, 1.0)])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x * x, &[(a, 2.0 * x)])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).exp();
        self.push(y, &[(a, y)])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).tanh();
        self.push(y, &[(a, 1.0 - y * y)])
    }

    fn branch(x: f64, y: f64) -> u32 {
        if x > y {
            BRANCH_LEFT
        } else if x < y {
            BRANCH_RIGHT
        } else {
            BRANCH_TIE
        }
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let b = Self::branch(x, -x);
        self.signature.push(b);
        let d = if b == BRANCH_RIGHT { -1.0 } else { 1.0 };
        self.push(x.abs(), &[(a, d)])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let b = Self::branch(0.0, x);
        self.signature.push(b);
        if b == BRANCH_RIGHT {
            self.push(x, &[(a, 1.0)])
        } else {
            self.push(0.0, &[(a, 0.0)])
        }
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let br = Self::branch(x, y);
        self.signature.push(br);
        if br == BRANCH_RIGHT {
            self.push(y, &[(a, 0.0), (b, 1.0)])
        } else {
            self.push(x, &[(a, 1.0), (b, 0.0)])
        }
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        // LEFT when a is strictly smaller
        let br = Self::branch(y, x);
        self.signature.push(br);
        if br == BRANCH_RIGHT {
            self.push(y, &[(a, 0.0), (b, 1.0)])
        } else {
            self.push(x, &[(a, 1.0), (b, 0.0)])
        }
    }

    /// `max(a, 0)` with the hinge convention of [`Tape::relu`].
    pub fn hinge(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|&x| self.value(x)).sum();
        let inputs: Vec<(Var, f64)> = xs.iter().map(|&x| (x, 1.0)).collect();
        self.push(v, &inputs)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        let s = self.sum(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    /// Inner product `sum_i a_i b_i`.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot operands differ in length");
        let mut v = 0.0;
        let mut inputs = Vec::with_capacity(2 * a.len());
        for (&x, &y) in a.iter().zip(b) {
            let (xv, yv) = (self.value(x), self.value(y));
            v += xv * yv;
            inputs.push((x, yv));
            inputs.push((y, xv));
        }
        self.push(v, &inputs)
    }

    /// Affine combination `bias + sum_i w_i x_i`.
    pub fn affine(&mut self, w: &[Var], x: &[Var], bias: Var) -> Var {
        assert_eq!(w.len(), x.len(), "affine operands differ in length");
        let mut v = self.value(bias);
        let mut inputs = Vec::with_capacity(2 * w.len() + 1);
        for (&wi, &xi) in w.iter().zip(x) {
            let (wv, xv) = (self.value(wi), self.value(xi));
            v += wv * xv;
            inputs.push((wi, xv));
            inputs.push((xi, wv));
        }
        inputs.push((bias, 1.0));
        self.push(v, &inputs)
    }

    /// Euclidean norm.
    pub fn norm(&mut self, xs: &[Var]) -> Var {
        let n = xs.iter().map(|&x| self.value(x).powi(2)).sum::<f64>().sqrt();
        let inputs: Vec<(Var, f64)> = xs
            .iter()
            .map(|&x| (x, if n > 0.0 { self.value(x) / n } else { 0.0 }))
            .collect();
        self.push(n, &inputs)
    }

    /// Squared Euclidean norm.
    pub fn norm_squared(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|&x| self.value(x).powi(2)).sum();
        let inputs: Vec<(Var, f64)> = xs.iter().map(|&x| (x, 2.0 * self.value(x))).collect();
        self.push(v, &inputs)
    }

    /// Gradient of `output` with respect to every leaf, in leaf order.
    pub fn backward(&self, output: Var) -> Result<Vec<f64>, DiffError> {
        let n = self.values.len();
        if output.index() >= n {
            return Err(DiffError::ForeignNode {
                node: output.index(),
                len: n,
            });
        }
        let mut adjoint = vec![0.0; output.index() + 1];
        adjoint[output.index()] = 1.0;
        for node in (0..=output.index()).rev() {
            let a = adjoint[node];
            if a == 0.0 {
                continue;
            }
            let start = self.edge_start[node] as usize;
            let end = self
                .edge_start
                .get(node + 1)
                .map_or(self.edges.len(), |&e| e as usize);
            for &(input, partial) in &self.edges[start..end] {
                adjoint[input as usize] += a * partial;
            }
        }
        Ok(self
            .leaves
            .iter()
            .map(|&l| adjoint.get(l as usize).copied().unwrap_or(0.0))
            .collect())
    }
}

/// Free-function form of [`Tape::backward`].
pub fn backward(tape: &Tape, output: Var) -> Result<Vec<f64>, DiffError> {
    tape.backward(output)
}
