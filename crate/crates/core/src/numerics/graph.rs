//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as it executes. Leaves are created as
//! parameters, inputs, or constants; only leaves marked as differentiable may
//! be requested in [`Graph::backward`], and only the part of the tape that
//! reaches such a leaf is walked. Plain inference uses the same kernels with
//! constant leaves, so values are bit-identical between the two paths.

use crate::error::{Error, Result};
use crate::numerics::tensor::Matrix;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { differentiable: bool },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    Silu(Var),
    Tanh(Var),
    Square(Var),
    Softplus(Var),
    Sum(Var),
    SumCols(Var),
    ConstMatMul(Matrix, Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Cheap to create; build one per loss evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(context: &str, expected: (usize, usize), actual: (usize, usize)) -> Error {
    Error::Shape {
        context: context.to_string(),
        expected: vec![expected.0, expected.1],
        actual: vec![actual.0, actual.1],
    }
}

/// `a · b` with a fixed i-k-j accumulation order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.rows);
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let ci = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let bk = &b.data[k * b.cols..(k + 1) * b.cols];
            for (cij, &bkj) in ci.iter_mut().zip(bk) {
                *cij += aik * bkj;
            }
        }
    }
    c
}

/// `aᵀ · b`.
fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let ak = a.row(k);
        let bk = b.row(k);
        for (i, &aki) in ak.iter().enumerate() {
            let ci = &mut c.data[i * b.cols..(i + 1) * b.cols];
            for (cij, &bkj) in ci.iter_mut().zip(bk) {
                *cij += aki * bkj;
            }
        }
    }
    c
}

/// `a · bᵀ`.
fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            let bj = b.row(j);
            c.data[i * b.rows + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
        }
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn map(a: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph {
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that gradients may be requested for.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(
            value,
            Op::Leaf {
                differentiable: true,
            },
            true,
        )
    }

    /// Leaf treated as a constant: never differentiated, never traversed.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(
            value,
            Op::Leaf {
                differentiable: false,
            },
            false,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return Err(shape_err("matmul", (va.cols, vb.cols), vb.shape()));
        }
        let out = matmul(va, vb);
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), n))
    }

    /// `a + bias`, with a `1 × cols` bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows != 1 || vb.cols != va.cols {
            return Err(shape_err("add_bias", (1, va.cols), vb.shape()));
        }
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *o += b;
            }
        }
        let n = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(a, bias), n))
    }

    fn check_same(&self, context: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(context, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), n))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), n))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x * s);
        let n = self.needs(a);
        self.push(out, Op::Scale(a, s), n)
    }

    /// Multiply row `r` by the constant `s[r]`.
    pub fn scale_rows(&mut self, a: Var, s: Vec<f64>) -> Result<Var> {
        let va = self.value(a);
        if s.len() != va.rows {
            return Err(shape_err("scale_rows", (va.rows, 1), (s.len(), 1)));
        }
        let mut out = va.clone();
        for (r, &sr) in s.iter().enumerate() {
            for o in out.row_mut(r) {
                *o *= sr;
            }
        }
        let n = self.needs(a);
        Ok(self.push(out, Op::ScaleRows(a, s), n))
    }

    /// `p·a + q·b` with per-row constant coefficients.
    pub fn lincomb_rows(&mut self, a: Var, p: Vec<f64>, b: Var, q: Vec<f64>) -> Result<Var> {
        let pa = self.scale_rows(a, p)?;
        let qb = self.scale_rows(b, q)?;
        self.add(pa, qb)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows)
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows != rows {
                return Err(shape_err("concat_cols", (rows, v.cols), v.shape()));
            }
            cols += v.cols;
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
                off += v.cols;
            }
        }
        let n = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), n))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x * sigmoid(x));
        let n = self.needs(a);
        self.push(out, Op::Silu(a), n)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        let n = self.needs(a);
        self.push(out, Op::Tanh(a), n)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x * x);
        let n = self.needs(a);
        self.push(out, Op::Square(a), n)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = map(self.value(a), softplus);
        let n = self.needs(a);
        self.push(out, Op::Softplus(a), n)
    }

    /// Sum of all entries, as a `1 × 1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let n = self.needs(a);
        self.push(Matrix::scalar(s), Op::Sum(a), n)
    }

    /// Row sums, as a `rows × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows).map(|r| va.row(r).iter().sum()).collect();
        let out = Matrix {
            rows: va.rows,
            cols: 1,
            data,
        };
        let n = self.needs(a);
        self.push(out, Op::SumCols(a), n)
    }

    /// `m · a` for a constant left factor.
    pub fn const_matmul(&mut self, m: Matrix, a: Var) -> Result<Var> {
        let va = self.value(a);
        if m.cols != va.rows {
            return Err(shape_err("const_matmul", (m.cols, va.cols), va.shape()));
        }
        let out = matmul(&m, va);
        let n = self.needs(a);
        Ok(self.push(out, Op::ConstMatMul(m, a), n))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Gradients of the scalar `loss` with respect to each leaf in `wrt`.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Matrix>> {
        let lv = self.value(loss);
        if lv.rows != 1 || lv.cols != 1 {
            return Err(Error::NonScalarLoss {
                rows: lv.rows,
                cols: lv.cols,
            });
        }
        for &w in wrt {
            match self.nodes[w.0].op {
                Op::Leaf {
                    differentiable: true,
                } => {}
                Op::Leaf {
                    differentiable: false,
                } => return Err(Error::NotDifferentiable(w.0)),
                _ => return Err(Error::NotALeaf(w.0)),
            }
        }

        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], matmul_nt(&g, self.value(*b)));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], matmul_tn(self.value(*a), &g));
                    }
                }
                Op::AddBias(a, b) => {
                    if self.needs(*b) {
                        let mut gb = Matrix::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], map(&g, |x| -x));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], zip(&g, self.value(*b), |x, y| x * y));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], zip(&g, self.value(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads[a.0], map(&g, |x| x * s));
                }
                Op::ScaleRows(a, s) => {
                    let mut ga = g;
                    for (r, &sr) in s.iter().enumerate() {
                        for o in ga.row_mut(r) {
                            *o *= sr;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        if self.needs(*p) {
                            let mut gp = Matrix::zeros(g.rows, w);
                            for r in 0..g.rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            accumulate(&mut grads[p.0], gp);
                        }
                        off += w;
                    }
                }
                Op::Silu(a) => {
                    let ga = zip(&g, self.value(*a), |gx, x| {
                        let s = sigmoid(x);
                        gx * s * (1.0 + x * (1.0 - s))
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let ga = zip(&g, &node.value, |gx, y| gx * (1.0 - y * y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Square(a) => {
                    let ga = zip(&g, self.value(*a), |gx, x| 2.0 * gx * x);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Softplus(a) => {
                    let ga = zip(&g, self.value(*a), |gx, x| gx * sigmoid(x));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    accumulate(&mut grads[a.0], Matrix::filled(va.rows, va.cols, g.data[0]));
                }
                Op::SumCols(a) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows, va.cols);
                    for r in 0..va.rows {
                        ga.row_mut(r).fill(g.data[r]);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConstMatMul(m, a) => {
                    accumulate(&mut grads[a.0], matmul_tn(m, &g));
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| {
                grads[w.0].clone().unwrap_or_else(|| {
                    let v = self.value(*w);
                    Matrix::zeros(v.rows, v.cols)
                })
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(m(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = g.sum(x);
        let gx = &g.backward(s, &[x]).unwrap()[0];
        assert_eq!(gx.data, vec![1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut g = Graph::new();
        let data = [1.5, -2.0, 0.25, 4.0];
        let x = g.leaf(m(1, 4, &data));
        let sq = g.square(x);
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        let gx = &g.backward(l, &[x]).unwrap()[0];
        assert_eq!(gx.data, data.to_vec());
    }

    #[test]
    fn rejects_non_scalar_non_leaf_and_constant() {
        let mut g = Graph::new();
        let x = g.leaf(m(1, 2, &[1.0, 2.0]));
        let c = g.constant(m(1, 2, &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        assert!(matches!(
            g.backward(y, &[x]),
            Err(Error::NonScalarLoss { .. })
        ));
        let s = g.sum(y);
        assert!(matches!(g.backward(s, &[y]), Err(Error::NotALeaf(_))));
        assert!(matches!(
            g.backward(s, &[c]),
            Err(Error::NotDifferentiable(_))
        ));
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.leaf(m(1, 2, &[1.0, 2.0]));
        let z = g.leaf(m(1, 1, &[5.0]));
        let s = g.sum(x);
        let gz = &g.backward(s, &[z]).unwrap()[0];
        assert_eq!(gz.data, vec![0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.leaf(m(2, 3, &[0.0; 6]));
        let b = g.leaf(m(2, 3, &[0.0; 6]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        let c = g.leaf(m(3, 2, &[0.0; 6]));
        assert!(g.add(a, c).is_err());
    }
}
