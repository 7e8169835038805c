//! Reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Nodes are recorded in execution order, so walking the tape
//! backwards visits every node after all of its consumers.

use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

pub const SIGMOID_CLAMP: f64 = 500.0;
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

/// `SumRows` collapses each row to one value (n×1); `SumCols` collapses each
/// column (1×c).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    SumRows,
    SumCols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var, Broadcast),
    Act(Activation, Var),
    Reduce(Reduction, Var),
    RowNormalize { a: Var, norms: Vec<f64> },
    Scale(Var, f64),
    ScaleRows(Var, Var),
    ClampMin(Var, f64),
    Ln(Var, f64),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP)).exp())
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf (a parameter or free variable).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`; zeros before any backward pass.
    pub fn grad(&self, v: Var) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        let out = gemm(va, false, vb, false);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Element-wise `a ∘ b`. `b` may also be a 1×cols row vector or a 1×1 scalar.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let bc = if va.shape() == vb.shape() {
            Broadcast::Same
        } else if vb.shape() == (1, 1) {
            Broadcast::Scalar
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            Broadcast::Row
        } else {
            return Err(Error::dim("elementwise", va.shape(), vb.shape()));
        };
        if kind == BinaryKind::Div && vb.as_slice().iter().any(|&x| x == 0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let cols = va.cols();
        let bs = vb.as_slice();
        let data = va
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let y = match bc {
                    Broadcast::Same => bs[k],
                    Broadcast::Row => bs[k % cols],
                    Broadcast::Scalar => bs[0],
                };
                f(x, y)
            })
            .collect();
        let out = Matrix::from_raw(va.rows(), cols, data);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Div)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Sigmoid => self.value(a).map(sigmoid),
            Activation::Relu => self.value(a).map(|x| x.max(0.0)),
            Activation::Identity => return a,
        };
        let rg = self.needs(&[a]);
        self.push(out, Op::Act(kind, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn reduce(&mut self, a: Var, kind: Reduction) -> Var {
        let va = self.value(a);
        let (r, c) = va.shape();
        let out = match kind {
            Reduction::Sum => Matrix::from_raw(1, 1, vec![va.sum()]),
            Reduction::Mean => Matrix::from_raw(1, 1, vec![if va.is_empty() { 0.0 } else { va.sum() / va.len() as f64 }]),
            Reduction::SumRows => Matrix::from_fn(r, 1, |i, _| va.row(i).iter().sum()),
            Reduction::SumCols => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, x) in acc.iter_mut().zip(va.row(i)) {
                        *s += x;
                    }
                }
                Matrix::from_raw(1, c, acc)
            }
        };
        let rg = self.needs(&[a]);
        self.push(out, Op::Reduce(kind, a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(a, Reduction::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(a, Reduction::Mean)
    }

    /// Divides each row by `max(‖row‖₂, 1e-12)`.
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for i in 0..va.rows() {
            let n = va.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            let d = n.max(NORM_EPS);
            for x in out.row_mut(i) {
                *x /= d;
            }
            norms.push(n);
        }
        let rg = self.needs(&[a]);
        self.push(out, Op::RowNormalize { a, norms }, rg)
    }

    /// Multiplies by a constant factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Multiplies row `i` of `a` by `w[i]`; `w` is n×1.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (va, vw) = (self.value(a), self.value(w));
        if vw.shape() != (va.rows(), 1) {
            return Err(Error::dim("scale_rows", va.shape(), vw.shape()));
        }
        let mut out = va.clone();
        for i in 0..va.rows() {
            let s = vw.get(i, 0);
            for x in out.row_mut(i) {
                *x *= s;
            }
        }
        let rg = self.needs(&[a, w]);
        Ok(self.push(out, Op::ScaleRows(a, w), rg))
    }

    /// `max(a, floor)` element-wise; the gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor));
        let rg = self.needs(&[a]);
        self.push(out, Op::ClampMin(a, floor), rg)
    }

    /// `ln(max(a, floor))` element-wise.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.needs(&[a]);
        self.push(out, Op::Ln(a, floor), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::hstack(&mats)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Propagates adjoints from a 1×1 `root` and adds them to every node's
    /// gradient. Calling it twice without [`Tape::zero_grad`] doubles them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 root, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut adj: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (parent, pg) in self.local_adjoints(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn local_adjoints(&self, i: usize, g: &Matrix) -> Vec<(Var, Matrix)> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    out.push((*a, gemm(g, false, vb, true)));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, gemm(va, true, g, false)));
                }
                out
            }
            Op::Binary(kind, a, b, bc) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let cols = va.cols();
                let bs = vb.as_slice();
                let bval = |k: usize| match bc {
                    Broadcast::Same => bs[k],
                    Broadcast::Row => bs[k % cols],
                    Broadcast::Scalar => bs[0],
                };
                let gs = g.as_slice();
                let xs = va.as_slice();
                let (ga, gb_full): (Vec<f64>, Vec<f64>) = match kind {
                    BinaryKind::Add => (gs.to_vec(), gs.to_vec()),
                    BinaryKind::Sub => (gs.to_vec(), gs.iter().map(|x| -x).collect()),
                    BinaryKind::Mul => (
                        gs.iter().enumerate().map(|(k, g)| g * bval(k)).collect(),
                        gs.iter().zip(xs).map(|(g, x)| g * x).collect(),
                    ),
                    BinaryKind::Div => (
                        gs.iter().enumerate().map(|(k, g)| g / bval(k)).collect(),
                        gs.iter()
                            .zip(xs)
                            .enumerate()
                            .map(|(k, (g, x))| {
                                let d = bval(k);
                                -g * x / (d * d)
                            })
                            .collect(),
                    ),
                };
                let gb = match bc {
                    Broadcast::Same => Matrix::from_raw(vb.rows(), vb.cols(), gb_full),
                    Broadcast::Scalar => Matrix::from_raw(1, 1, vec![gb_full.iter().sum()]),
                    Broadcast::Row => {
                        let mut acc = vec![0.0; cols];
                        for (k, v) in gb_full.iter().enumerate() {
                            acc[k % cols] += v;
                        }
                        Matrix::from_raw(1, cols, acc)
                    }
                };
                vec![(*a, Matrix::from_raw(va.rows(), cols, ga)), (*b, gb)]
            }
            Op::Act(kind, a) => {
                let d = match kind {
                    Activation::Sigmoid => y.zip_map(g, |s, g| g * s * (1.0 - s)),
                    Activation::Relu => self.value(*a).zip_map(g, |x, g| if x > 0.0 { g } else { 0.0 }),
                    Activation::Identity => Ok(g.clone()),
                };
                vec![(*a, d.expect("adjoint shape"))]
            }
            Op::Reduce(kind, a) => {
                let (r, c) = self.shape(*a);
                let d = match kind {
                    Reduction::Sum => Matrix::from_raw(r, c, vec![g.get(0, 0); r * c]),
                    Reduction::Mean => Matrix::from_raw(r, c, vec![g.get(0, 0) / (r * c).max(1) as f64; r * c]),
                    Reduction::SumRows => Matrix::from_fn(r, c, |i, _| g.get(i, 0)),
                    Reduction::SumCols => Matrix::from_fn(r, c, |_, j| g.get(0, j)),
                };
                vec![(*a, d)]
            }
            Op::RowNormalize { a, norms } => {
                let mut d = g.clone();
                for (i, &n) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let row = d.row_mut(i);
                    if n > NORM_EPS {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in row.iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * dot) / n;
                        }
                    } else {
                        for o in row.iter_mut() {
                            *o /= NORM_EPS;
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::ScaleRows(a, w) => {
                let (va, vw) = (self.value(*a), self.value(*w));
                let mut da = g.clone();
                let mut dw = Matrix::zeros(vw.rows(), 1);
                for i in 0..va.rows() {
                    let s = vw.get(i, 0);
                    let mut acc = 0.0;
                    for ((o, &gv), &xv) in da.row_mut(i).iter_mut().zip(g.row(i)).zip(va.row(i)) {
                        *o = gv * s;
                        acc += gv * xv;
                    }
                    dw.as_mut_slice()[i] = acc;
                }
                vec![(*a, da), (*w, dw)]
            }
            Op::ClampMin(a, floor) => {
                let d = self
                    .value(*a)
                    .zip_map(g, |x, g| if x > *floor { g } else { 0.0 })
                    .expect("adjoint shape");
                vec![(*a, d)]
            }
            Op::Ln(a, floor) => {
                let d = self
                    .value(*a)
                    .zip_map(g, |x, g| if x > *floor { g / x } else { 0.0 })
                    .expect("adjoint shape");
                vec![(*a, d)]
            }
            Op::ConcatCols(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    out.push((p, Matrix::from_fn(r, c, |i, j| g.get(i, offset + j))));
                    offset += c;
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    /// Central differences of `f` with respect to every entry of `x`.
    fn finite_diff(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            let mut p = x.clone();
            let mut q = x.clone();
            p.set(i, j, x.get(i, j) + h);
            q.set(i, j, x.get(i, j) - h);
            (f(&p) - f(&q)) / (2.0 * h)
        })
    }

    fn assert_grad_close(analytic: &Matrix, fd: &Matrix) {
        for (a, f) in analytic.as_slice().iter().zip(fd.as_slice()) {
            if f.abs() > 1e-8 {
                let rel = (a - f).abs() / f.abs().max(a.abs());
                assert!(rel < 1e-4, "analytic {a} vs fd {f}");
            } else {
                assert!((a - f).abs() < 1e-6, "analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut t = Tape::new();
        let i2 = t.constant(Matrix::identity(2));
        let a = t.constant(m(&[&[1.0, -2.0, 3.5], &[0.0, 4.0, 1.0]]));
        let c = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(c), t.value(a));

        let x = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let o = t.constant(m(&[&[1.0], &[1.0]]));
        let y = t.matmul(x, o).unwrap();
        assert_eq!(t.value(y).as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn grad_of_sum_matmul_is_ones_times_bt() {
        let am = m(&[&[0.3, -0.2], &[0.5, 0.9], &[-1.0, 0.1]]);
        let bm = m(&[&[0.7, -0.4, 0.2], &[0.1, 0.6, -0.8]]);
        let mut t = Tape::new();
        let a = t.leaf(am.clone());
        let b = t.constant(bm.clone());
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        let want = Matrix::ones(3, 3).matmul(&bm.transpose()).unwrap();
        let got = t.grad(a);
        for (x, y) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let fd = finite_diff(&am, |x| x.matmul(&bm).unwrap().sum());
        assert_grad_close(&got, &fd);
    }

    #[test]
    fn elementwise_identities() {
        let am = m(&[&[1.5, -2.0], &[0.25, 3.0]]);
        let mut t = Tape::new();
        let a = t.leaf(am.clone());
        let ones = t.constant(Matrix::ones(2, 2));
        let p = t.mul(a, ones).unwrap();
        assert_eq!(t.value(p), &am);
        let z = t.sub(a, a).unwrap();
        assert_eq!(t.value(z), &Matrix::zeros(2, 2));
    }

    #[test]
    fn grad_of_sum_hadamard_is_other_factor() {
        let am = m(&[&[0.3, -0.7], &[0.2, 0.9]]);
        let bm = m(&[&[-0.5, 0.4], &[0.8, -0.1]]);
        let mut t = Tape::new();
        let a = t.leaf(am.clone());
        let b = t.constant(bm.clone());
        let c = t.mul(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), bm);
        let fd = finite_diff(&am, |x| x.zip_map(&bm, |p, q| p * q).unwrap().sum());
        assert_grad_close(&t.grad(a), &fd);
    }

    #[test]
    fn division_by_zero_is_numeric_error() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::ones(1, 2));
        let b = t.constant(m(&[&[1.0, 0.0]]));
        assert!(matches!(t.div(a, b), Err(Error::Numeric(_))));
        let c = t.constant(Matrix::ones(3, 1));
        assert!(matches!(t.add(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn row_and_scalar_broadcast() {
        let mut t = Tape::new();
        let a = t.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let r = t.leaf(m(&[&[10.0, 20.0]]));
        let s = t.leaf(Matrix::scalar(2.0));
        let x = t.add(a, r).unwrap();
        assert_eq!(t.value(x).as_slice(), &[11.0, 22.0, 13.0, 24.0]);
        let y = t.mul(x, s).unwrap();
        let total = t.sum(y);
        t.backward(total).unwrap();
        assert_eq!(t.grad(r).as_slice(), &[4.0, 4.0]);
        assert_eq!(t.grad(s).as_slice(), &[70.0]);
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(1e6).is_finite() && sigmoid(-1e6).is_finite());
        let mut t = Tape::new();
        let x = t.leaf(m(&[&[-3.0, 3.0, 0.0]]));
        let r = t.relu(x);
        assert_eq!(t.value(r).as_slice(), &[0.0, 3.0, 0.0]);
        let z = t.leaf(Matrix::zeros(1, 1));
        let s = t.sigmoid(z);
        t.backward(s).unwrap();
        assert_eq!(t.grad(z).get(0, 0), 0.25);
        let fd = finite_diff(&Matrix::zeros(1, 1), |x| sigmoid(x.get(0, 0)));
        assert!((fd.get(0, 0) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(3, 2));
        let s = t.sum(z);
        assert_eq!(t.value(s).get(0, 0), 0.0);
        let a = t.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let mean = t.mean(a);
        assert_eq!(t.value(mean).get(0, 0), 2.5);
        let rs = t.reduce(a, Reduction::SumRows);
        assert_eq!(t.value(rs).as_slice(), &[3.0, 7.0]);
        let cs = t.reduce(a, Reduction::SumCols);
        assert_eq!(t.value(cs).as_slice(), &[4.0, 6.0]);
        t.backward(mean).unwrap();
        assert_eq!(t.grad(a), Matrix::filled(2, 2, 0.25));
    }

    #[test]
    fn row_normalize_cases() {
        let mut t = Tape::new();
        let a = t.leaf(m(&[&[3.0, 4.0], &[0.6, 0.8], &[0.0, 0.0]]));
        let n = t.row_l2_normalize(a);
        let v = t.value(n);
        assert!((v.get(0, 0) - 0.6).abs() < 1e-15 && (v.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.6, 0.8]);
        assert_eq!(v.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn backward_contracts() {
        let am = m(&[&[0.5, -1.5], &[2.0, 0.25]]);
        let mut t = Tape::new();
        let a = t.leaf(am.clone());
        let bad = t.scale(a, 2.0);
        assert!(matches!(t.backward(bad), Err(Error::Contract(_))));
        let s = t.sum(a);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), Matrix::ones(2, 2));

        let mut t = Tape::new();
        let a = t.leaf(am.clone());
        let sq = t.mul(a, a).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), am.map(|x| 2.0 * x));
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), am.map(|x| 4.0 * x));
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), am.map(|x| 2.0 * x));
    }

    /// A scalar composition exercising every op kind.
    fn composite(t: &mut Tape, a: Var, b: Var, c: Var, w: Var) -> Var {
        let ab = t.matmul(a, b).unwrap();
        let s = t.sigmoid(ab);
        let r = t.relu(ab);
        let n = t.row_l2_normalize(r);
        let q = t.div(s, c).unwrap();
        let p = t.sub(q, n).unwrap();
        let pp = t.mul(p, p).unwrap();
        let sr = t.scale_rows(pp, w).unwrap();
        let cat = t.concat_cols(&[sr, s]).unwrap();
        let rs = t.reduce(cat, Reduction::SumRows);
        let cs = t.reduce(ab, Reduction::SumCols);
        let l = t.ln_clamped(s, 1e-12);
        let cl = t.clamp_min(cs, -0.5);
        let m1 = t.mean(l);
        let m2 = t.sum(rs);
        let m3 = t.sum(cl);
        let x = t.add(m1, m2).unwrap();
        let y = t.add(x, m3).unwrap();
        t.scale(y, 0.7)
    }

    fn arb_matrix(r: usize, c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(lo..hi, r * c).prop_map(move |v| Matrix::new(r, c, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn analytic_matches_finite_differences(
            am in arb_matrix(3, 4, -1.0, 1.0),
            bm in arb_matrix(4, 2, -1.0, 1.0),
            cm in arb_matrix(1, 2, 0.5, 1.0),
            wm in arb_matrix(3, 1, -1.0, 1.0),
        ) {
            let eval = |am: &Matrix, bm: &Matrix, cm: &Matrix, wm: &Matrix| {
                let mut t = Tape::new();
                let (a, b, c, w) = (t.leaf(am.clone()), t.leaf(bm.clone()), t.leaf(cm.clone()), t.leaf(wm.clone()));
                let y = composite(&mut t, a, b, c, w);
                t.value(y).get(0, 0)
            };
            let mut t = Tape::new();
            let (a, b, c, w) = (t.leaf(am.clone()), t.leaf(bm.clone()), t.leaf(cm.clone()), t.leaf(wm.clone()));
            let y = composite(&mut t, a, b, c, w);
            t.backward(y).unwrap();
            // Kinks of relu and clamp make finite differences unreliable right at the switch.
            let ab = am.matmul(&bm).unwrap();
            prop_assume!(ab.as_slice().iter().all(|x| x.abs() > 1e-4));
            let mut cs = vec![0.0; 2];
            for i in 0..3 { for j in 0..2 { cs[j] += ab.get(i, j); } }
            prop_assume!(cs.iter().all(|x| (x + 0.5).abs() > 1e-4));

            assert_grad_close(&t.grad(a), &finite_diff(&am, |x| eval(x, &bm, &cm, &wm)));
            assert_grad_close(&t.grad(b), &finite_diff(&bm, |x| eval(&am, x, &cm, &wm)));
            assert_grad_close(&t.grad(c), &finite_diff(&cm, |x| eval(&am, &bm, x, &wm)));
            assert_grad_close(&t.grad(w), &finite_diff(&wm, |x| eval(&am, &bm, &cm, x)));
        }

        #[test]
        fn forward_is_deterministic_and_finite(
            am in arb_matrix(3, 4, -100.0, 100.0),
            bm in arb_matrix(4, 2, -100.0, 100.0),
            wm in arb_matrix(3, 1, -100.0, 100.0),
        ) {
            let run = || {
                let mut t = Tape::new();
                let (a, b, w) = (t.leaf(am.clone()), t.leaf(bm.clone()), t.leaf(wm.clone()));
                let c = t.constant(Matrix::filled(1, 2, 3.0));
                let y = composite(&mut t, a, b, c, w);
                t.backward(y).unwrap();
                (t.value(y).get(0, 0).to_bits(), t.grad(a))
            };
            let (v1, g1) = run();
            let (v2, g2) = run();
            prop_assert_eq!(v1, v2);
            prop_assert_eq!(&g1, &g2);
            prop_assert!(f64::from_bits(v1).is_finite());
            prop_assert!(g1.is_finite());
        }
    }
}
