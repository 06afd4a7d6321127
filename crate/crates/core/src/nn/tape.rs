//! Reverse-mode differentiation over a fixed vocabulary of matrix operations.
//!
//! Every value on the tape is a 2-D `f64` matrix (`[batch, features]` for
//! activations, `[fan_in, fan_out]` for weights, `[1, n]` for row vectors and
//! `[1, 1]` for scalars). Nodes only reference earlier nodes, so the insertion
//! order is a topological order and backward is a single reverse sweep.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{Gradients, ParamId, ParamStore};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var, f64),
    Sigmoid(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    MaxScalar(Var, f64),
    SumCols(Var),
    Sum(Var),
    Concat(Var, Var),
    Slice(Var, usize, usize),
    WeightNorm { direction: Var, scale: Var },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// `(1/β)·log(1 + exp(βx))` without overflow.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x + (-bx).exp() / beta
    } else {
        bx.exp().ln_1p() / beta
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &str, a: &Matrix, b: &Matrix) {
    assert_eq!(a.dim(), b.dim(), "{op}: shape mismatch {:?} vs {:?}", a.dim(), b.dim());
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad1(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    fn grad2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
    }

    /// A constant input; gradients are not propagated into it.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A trainable leaf. Each parameter is recorded at most once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, w) = (self.value(a), self.value(b));
        assert_eq!(x.ncols(), w.nrows(), "matmul: inner dimensions {:?} x {:?}", x.dim(), w.dim());
        let out = x.dot(w);
        let ng = self.grad2(a, b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds a `[1, n]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.nrows() == 1 && r.ncols() == x.ncols(), "add_row: {:?} + {:?}", x.dim(), r.dim());
        let out = x + r;
        let ng = self.grad2(a, row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape("add", self.value(a), self.value(b));
        let out = self.value(a) + self.value(b);
        let ng = self.grad2(a, b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape("sub", self.value(a), self.value(b));
        let out = self.value(a) - self.value(b);
        let ng = self.grad2(a, b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape("mul", self.value(a), self.value(b));
        let out = self.value(a) * self.value(b);
        let ng = self.grad2(a, b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.grad1(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        let ng = self.grad1(a);
        self.push(out, Op::Offset(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.grad1(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let ng = self.grad1(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        let ng = self.grad1(a);
        self.push(out, Op::Log(a), ng)
    }

    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        assert!(beta > 0.0, "softplus: beta must be positive");
        let out = self.value(a).mapv(|x| softplus(x, beta));
        let ng = self.grad1(a);
        self.push(out, Op::Softplus(a, beta), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.grad1(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let ng = self.grad1(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        let ng = self.grad1(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// `max(a, c)` elementwise; the gradient is zero where the floor is active.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(c));
        let ng = self.grad1(a);
        self.push(out, Op::MaxScalar(a, c), ng)
    }

    /// Row sums: `[B, n] -> [B, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.grad1(a);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Sum of all entries as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.grad1(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column-wise concatenation `[B, n] ++ [B, m] -> [B, n + m]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.nrows(), y.nrows(), "concat: row mismatch");
        let out = ndarray::concatenate(Axis(1), &[x.view(), y.view()]).expect("concat");
        let ng = self.grad2(a, b);
        self.push(out, Op::Concat(a, b), ng)
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.grad1(a);
        self.push(out, Op::Slice(a, start, end), ng)
    }

    /// Effective weight `W[:, j] = g_j · v[:, j] / ||v[:, j]||₂`.
    pub fn weight_norm(&mut self, direction: Var, scale: Var) -> Var {
        let (v, g) = (self.value(direction), self.value(scale));
        assert!(g.nrows() == 1 && g.ncols() == v.ncols(), "weight_norm: {:?} vs {:?}", v.dim(), g.dim());
        let norms = column_norms(v);
        let mut out = v.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col *= g[[0, j]] / norms[j];
        }
        let ng = self.grad2(direction, scale);
        self.push(out, Op::WeightNorm { direction, scale }, ng)
    }

    /// Gradients of the sum of `root` with respect to every parameter on the tape.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(id, g),
                Op::MatMul(a, b) => {
                    if self.grad1(a) {
                        acc(&mut grads, a, g.dot(&self.value(b).t()));
                    }
                    if self.grad1(b) {
                        acc(&mut grads, b, self.value(a).t().dot(&g));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.grad1(row) {
                        acc(&mut grads, row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut grads, a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, b, g.clone());
                    acc(&mut grads, a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, b, -&g);
                    acc(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    if self.grad1(a) {
                        acc(&mut grads, a, &g * self.value(b));
                    }
                    if self.grad1(b) {
                        acc(&mut grads, b, &g * self.value(a));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, a, g * c),
                Op::Offset(a) => acc(&mut grads, a, g),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(a))
                        .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                    acc(&mut grads, a, d);
                }
                Op::Exp(a) => acc(&mut grads, a, g * &node.value),
                Op::Log(a) => acc(&mut grads, a, g / self.value(a)),
                Op::Softplus(a, beta) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(a))
                        .for_each(|d, &x| *d *= sigmoid(beta * x));
                    acc(&mut grads, a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &s| *d *= s * (1.0 - s));
                    acc(&mut grads, a, d);
                }
                Op::Square(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(a))
                        .for_each(|d, &x| *d *= 2.0 * x);
                    acc(&mut grads, a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(a)).for_each(|d, &x| {
                        if x < lo || x > hi {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, a, d);
                }
                Op::MaxScalar(a, c) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(a))
                        .for_each(|d, &x| if x < c { *d = 0.0 });
                    acc(&mut grads, a, d);
                }
                Op::SumCols(a) => {
                    let shape = self.value(a).raw_dim();
                    let d = g.broadcast(shape).expect("sum_cols broadcast").to_owned();
                    acc(&mut grads, a, d);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.value(a).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, a, d);
                }
                Op::Concat(a, b) => {
                    let split = self.value(a).ncols();
                    if self.grad1(b) {
                        acc(&mut grads, b, g.slice(s![.., split..]).to_owned());
                    }
                    if self.grad1(a) {
                        acc(&mut grads, a, g.slice(s![.., ..split]).to_owned());
                    }
                }
                Op::Slice(a, start, end) => {
                    let mut d = Array2::zeros(self.value(a).raw_dim());
                    d.slice_mut(s![.., start..end]).assign(&g);
                    acc(&mut grads, a, d);
                }
                Op::WeightNorm { direction, scale } => {
                    let v = self.value(direction);
                    let gs = self.value(scale);
                    let norms = column_norms(v);
                    // dL/dg_j = sum_i dW_ij v_ij / n_j
                    let mut dg = Array2::zeros((1, v.ncols()));
                    for j in 0..v.ncols() {
                        let dot: f64 = g.column(j).dot(&v.column(j));
                        dg[[0, j]] = dot / norms[j];
                    }
                    if self.grad1(direction) {
                        // dL/dv_ij = (g_j / n_j) (dW_ij - dg_j v_ij / n_j)
                        let mut dv = g.clone();
                        for (j, mut col) in dv.axis_iter_mut(Axis(1)).enumerate() {
                            let (n, k) = (norms[j], dg[[0, j]]);
                            Zip::from(&mut col)
                                .and(v.column(j))
                                .for_each(|d, &vij| *d = gs[[0, j]] / n * (*d - k * vij / n));
                        }
                        acc(&mut grads, direction, dv);
                    }
                    if self.grad1(scale) {
                        acc(&mut grads, scale, dg);
                    }
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn column_norms(v: &Matrix) -> Vec<f64> {
    v.axis_iter(Axis(1))
        .map(|c| c.dot(&c).sqrt())
        .collect()
}
