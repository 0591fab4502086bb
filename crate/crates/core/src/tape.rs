//! A reverse-mode automatic differentiation tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse order and accumulates vector-Jacobian products.
//! Nodes whose inputs are all constants are never visited on the way back.

use std::cell::{Ref, RefCell};

use crate::simplex;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Softplus(Var),
    Square(Var),
    ClampMin(Var, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    RowNorm(Var),
    MinRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    Entmax15Rows(Var),
    LogSumExpRows(Var),
    LogSumExpCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    GumbelSoftmax { weights: Var, tau: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn wrt(&self, v: Var, like: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.0, like.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is propagated to or through it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant node (stop-gradient).
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Value of a 1x1 node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value_ref(a).map(f);
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = {
            let (va, vb) = (self.value_ref(a), self.value_ref(b));
            assert_eq!(va.shape(), vb.shape(), "elementwise operands must agree in shape");
            va.zip_map(&vb, f)
        };
        let ng = self.ng(&[a, b]);
        self.push(value, op, ng)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value_ref(a).matmul(&self.value_ref(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value_ref(a).transpose();
        let ng = self.ng(&[a]);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn broadcast(&self, a: Var, b: Var, by_row: bool, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = {
            let (va, vb) = (self.value_ref(a), self.value_ref(b));
            let (m, n) = va.shape();
            if by_row {
                assert_eq!(vb.shape(), (1, n), "row operand must be 1 x cols");
            } else {
                assert_eq!(vb.shape(), (m, 1), "column operand must be rows x 1");
            }
            let mut out = va.clone();
            for i in 0..m {
                for j in 0..n {
                    let bv = if by_row { vb.data()[j] } else { vb.data()[i] };
                    out.set(i, j, f(va.get(i, j), bv));
                }
            }
            out
        };
        let ng = self.ng(&[a, b]);
        self.push(value, op, ng)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        self.broadcast(a, b, true, Op::AddRow(a, b), |x, y| x + y)
    }

    /// Adds the `m x 1` column `b` to every column of `a`.
    pub fn add_col(&self, a: Var, b: Var) -> Var {
        self.broadcast(a, b, false, Op::AddCol(a, b), |x, y| x + y)
    }

    pub fn mul_row(&self, a: Var, b: Var) -> Var {
        self.broadcast(a, b, true, Op::MulRow(a, b), |x, y| x * y)
    }

    pub fn mul_col(&self, a: Var, b: Var) -> Var {
        self.broadcast(a, b, false, Op::MulCol(a, b), |x, y| x * y)
    }

    pub fn div_col(&self, a: Var, b: Var) -> Var {
        self.broadcast(a, b, false, Op::DivCol(a, b), |x, y| x / y)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn shift(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise `max(a, c)`.
    pub fn clamp_min(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::ClampMin(a, c), |x| x.max(c))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value_ref(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value_ref(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `m x n -> m x 1`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let value = {
            let va = self.value_ref(a);
            let sums: Vec<f64> = (0..va.rows()).map(|i| va.row_slice(i).iter().sum()).collect();
            Tensor::column(&sums)
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::SumRows(a), ng)
    }

    /// Column sums, `m x n -> 1 x n`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = {
            let va = self.value_ref(a);
            let mut sums = vec![0.0; va.cols()];
            for i in 0..va.rows() {
                for (s, x) in sums.iter_mut().zip(va.row_slice(i)) {
                    *s += x;
                }
            }
            Tensor::row(&sums)
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::SumCols(a), ng)
    }

    /// Euclidean norm of each row, `m x n -> m x 1`. The gradient at a zero row is zero.
    pub fn row_norm(&self, a: Var) -> Var {
        let value = {
            let va = self.value_ref(a);
            let norms: Vec<f64> = (0..va.rows())
                .map(|i| va.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            Tensor::column(&norms)
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::RowNorm(a), ng)
    }

    /// Row minima, `m x n -> m x 1`; the gradient flows to the first minimiser.
    pub fn min_rows(&self, a: Var) -> Var {
        let (value, arg) = {
            let va = self.value_ref(a);
            let mut mins = Vec::with_capacity(va.rows());
            let mut arg = Vec::with_capacity(va.rows());
            for i in 0..va.rows() {
                let row = va.row_slice(i);
                let (k, &m) = row
                    .iter()
                    .enumerate()
                    .fold((0, &row[0]), |best, cur| if cur.1 < best.1 { cur } else { best });
                mins.push(m);
                arg.push(k);
            }
            (Tensor::column(&mins), arg)
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::MinRows(a, arg), ng)
    }

    fn rowwise(&self, a: Var, op: Op, f: impl Fn(&[f64]) -> Vec<f64>) -> Var {
        let value = {
            let va = self.value_ref(a);
            let mut out = Tensor::zeros(va.rows(), va.cols());
            for i in 0..va.rows() {
                out.row_slice_mut(i).copy_from_slice(&f(va.row_slice(i)));
            }
            out
        };
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.rowwise(a, Op::SoftmaxRows(a), simplex::softmax)
    }

    pub fn entmax15_rows(&self, a: Var) -> Var {
        self.rowwise(a, Op::Entmax15Rows(a), simplex::entmax15)
    }

    /// Row-wise log-sum-exp, `m x n -> m x 1`.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let value = {
            let va = self.value_ref(a);
            let v: Vec<f64> = (0..va.rows()).map(|i| simplex::logsumexp(va.row_slice(i))).collect();
            Tensor::column(&v)
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::LogSumExpRows(a), ng)
    }

    /// Column-wise log-sum-exp, `m x n -> 1 x n`.
    pub fn logsumexp_cols(&self, a: Var) -> Var {
        let value = {
            let va = self.value_ref(a);
            let mut col = vec![0.0; va.rows()];
            let v: Vec<f64> = (0..va.cols())
                .map(|j| {
                    for (i, c) in col.iter_mut().enumerate() {
                        *c = va.get(i, j);
                    }
                    simplex::logsumexp(&col)
                })
                .collect();
            Tensor::row(&v)
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::LogSumExpCols(a), ng)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value_ref(p)).collect();
            let rows = vals[0].rows();
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Tensor::zeros(rows, cols);
            for i in 0..rows {
                let mut off = 0;
                for v in &vals {
                    assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                    out.row_slice_mut(i)[off..off + v.cols()].copy_from_slice(v.row_slice(i));
                    off += v.cols();
                }
            }
            out
        };
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value_ref(p)).collect();
            let cols = vals[0].cols();
            let rows: usize = vals.iter().map(|v| v.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for v in &vals {
                assert_eq!(v.cols(), cols, "concat_rows column mismatch");
                data.extend_from_slice(v.data());
            }
            Tensor::from_vec(rows, cols, data).expect("sizes checked")
        };
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let va = self.value_ref(a);
            assert!(start + len <= va.cols(), "column slice out of range");
            let mut out = Tensor::zeros(va.rows(), len);
            for i in 0..va.rows() {
                out.row_slice_mut(i).copy_from_slice(&va.row_slice(i)[start..start + len]);
            }
            out
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let va = self.value_ref(a);
            assert!(start + len <= va.rows(), "row slice out of range");
            let c = va.cols();
            Tensor::from_vec(len, c, va.data()[start * c..(start + len) * c].to_vec())
                .expect("sizes checked")
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Selects (and possibly repeats) rows of `a`.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let value = {
            let va = self.value_ref(a);
            let c = va.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                data.extend_from_slice(va.row_slice(i));
            }
            Tensor::from_vec(idx.len(), c, data).expect("sizes checked")
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).reshaped(rows, cols);
        let ng = self.ng(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Gumbel-softmax relaxation of categorical draws from the `1 x K` weights `a`.
    ///
    /// Row `n` of the `N x K` result is `softmax((log a + noise_n) / tau)`.
    /// Components with zero weight receive exactly zero mass and no gradient.
    pub fn gumbel_softmax(&self, a: Var, noise: &Tensor, tau: f64) -> Var {
        let value = {
            let va = self.value_ref(a);
            assert_eq!(va.rows(), 1, "gumbel weights must be a single row");
            assert_eq!(va.cols(), noise.cols(), "gumbel noise width");
            let mut out = Tensor::zeros(noise.rows(), noise.cols());
            let mut logits = vec![0.0; noise.cols()];
            for n in 0..noise.rows() {
                for (k, l) in logits.iter_mut().enumerate() {
                    let w = va.data()[k];
                    *l = if w > 0.0 {
                        (w.ln() + noise.get(n, k)) / tau
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                out.row_slice_mut(n).copy_from_slice(&simplex::softmax(&logits));
            }
            out
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::GumbelSoftmax { weights: a, tau }, ng)
    }

    /// Reverse pass from the 1x1 node `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, t: Tensor| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::MatMul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    // dA = G * B^T
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, g.data(), n as isize, 1, vb.data(), 1, n as isize, ga.data_mut(), 0.0);
                    // dB = A^T * G
                    let mut gb = Tensor::zeros(k, n);
                    gemm(k, m, n, va.data(), 1, k as isize, g.data(), n as isize, 1, gb.data_mut(), 0.0);
                    acc(a, ga);
                    acc(b, gb);
                }
                &Op::Transpose(a) => acc(a, g.transpose()),
                &Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g);
                }
                &Op::Sub(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.map(|x| -x));
                }
                &Op::Mul(a, b) => {
                    acc(a, g.zip_map(val(b), |gi, bi| gi * bi));
                    acc(b, g.zip_map(val(a), |gi, ai| gi * ai));
                }
                &Op::Div(a, b) => {
                    let vb = val(b);
                    acc(a, g.zip_map(vb, |gi, bi| gi / bi));
                    let gy = g.zip_map(y, |gi, yi| gi * yi);
                    acc(b, gy.zip_map(vb, |t, bi| -t / bi));
                }
                &Op::AddRow(a, b) => {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, x) in gb.iter_mut().zip(g.row_slice(r)) {
                            *s += x;
                        }
                    }
                    acc(b, Tensor::row(&gb));
                    acc(a, g);
                }
                &Op::AddCol(a, b) => {
                    let gb: Vec<f64> = (0..g.rows()).map(|r| g.row_slice(r).iter().sum()).collect();
                    acc(b, Tensor::column(&gb));
                    acc(a, g);
                }
                &Op::MulRow(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let mut ga = g.clone();
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.set(r, c, g.get(r, c) * vb.data()[c]);
                            gb[c] += g.get(r, c) * va.get(r, c);
                        }
                    }
                    acc(a, ga);
                    acc(b, Tensor::row(&gb));
                }
                &Op::MulCol(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let mut ga = g.clone();
                    let mut gb = vec![0.0; g.rows()];
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.set(r, c, g.get(r, c) * vb.data()[r]);
                            gb[r] += g.get(r, c) * va.get(r, c);
                        }
                    }
                    acc(a, ga);
                    acc(b, Tensor::column(&gb));
                }
                &Op::DivCol(a, b) => {
                    let vb = val(b);
                    let mut ga = g.clone();
                    let mut gb = vec![0.0; g.rows()];
                    for r in 0..g.rows() {
                        let d = vb.data()[r];
                        for c in 0..g.cols() {
                            ga.set(r, c, g.get(r, c) / d);
                            gb[r] -= g.get(r, c) * y.get(r, c) / d;
                        }
                    }
                    acc(a, ga);
                    acc(b, Tensor::column(&gb));
                }
                &Op::Scale(a, c) => acc(a, g.map(|x| c * x)),
                &Op::Shift(a) => acc(a, g),
                &Op::Relu(a) => acc(a, g.zip_map(val(a), |gi, x| if x > 0.0 { gi } else { 0.0 })),
                &Op::Sigmoid(a) => acc(a, g.zip_map(y, |gi, s| gi * s * (1.0 - s))),
                &Op::Tanh(a) => acc(a, g.zip_map(y, |gi, t| gi * (1.0 - t * t))),
                &Op::Exp(a) => acc(a, g.zip_map(y, |gi, e| gi * e)),
                &Op::Ln(a) => acc(a, g.zip_map(val(a), |gi, x| gi / x)),
                &Op::Sqrt(a) => acc(a, g.zip_map(y, |gi, s| if s > 0.0 { gi * 0.5 / s } else { 0.0 })),
                &Op::Softplus(a) => acc(a, g.zip_map(val(a), |gi, x| gi * sigmoid(x))),
                &Op::Square(a) => acc(a, g.zip_map(val(a), |gi, x| 2.0 * gi * x)),
                &Op::ClampMin(a, c) => acc(a, g.zip_map(val(a), |gi, x| if x > c { gi } else { 0.0 })),
                &Op::Sum(a) => {
                    let (m, n) = val(a).shape();
                    acc(a, Tensor::filled(m, n, g.item()));
                }
                &Op::SumRows(a) => {
                    let (m, n) = val(a).shape();
                    let mut ga = Tensor::zeros(m, n);
                    for r in 0..m {
                        ga.row_slice_mut(r).fill(g.data()[r]);
                    }
                    acc(a, ga);
                }
                &Op::SumCols(a) => {
                    let (m, n) = val(a).shape();
                    let mut ga = Tensor::zeros(m, n);
                    for r in 0..m {
                        ga.row_slice_mut(r).copy_from_slice(g.data());
                    }
                    acc(a, ga);
                }
                &Op::RowNorm(a) => {
                    let va = val(a);
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let nrm = y.data()[r];
                        if nrm > 0.0 {
                            let s = g.data()[r] / nrm;
                            for (o, x) in ga.row_slice_mut(r).iter_mut().zip(va.row_slice(r)) {
                                *o = s * x;
                            }
                        }
                    }
                    acc(a, ga);
                }
                Op::MinRows(a, arg) => {
                    let (m, n) = val(*a).shape();
                    let mut ga = Tensor::zeros(m, n);
                    for (r, &k) in arg.iter().enumerate() {
                        ga.set(r, k, g.data()[r]);
                    }
                    acc(*a, ga);
                }
                &Op::SoftmaxRows(a) => {
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in ga.row_slice_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - dot);
                        }
                    }
                    acc(a, ga);
                }
                &Op::Entmax15Rows(a) => {
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let row = simplex::entmax15_backward(y.row_slice(r), g.row_slice(r));
                        ga.row_slice_mut(r).copy_from_slice(&row);
                    }
                    acc(a, ga);
                }
                &Op::LogSumExpRows(a) => {
                    let va = val(a);
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let l = y.data()[r];
                        if l == f64::NEG_INFINITY {
                            continue;
                        }
                        for (o, x) in ga.row_slice_mut(r).iter_mut().zip(va.row_slice(r)) {
                            *o = g.data()[r] * (x - l).exp();
                        }
                    }
                    acc(a, ga);
                }
                &Op::LogSumExpCols(a) => {
                    let va = val(a);
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        for c in 0..va.cols() {
                            let l = y.data()[c];
                            if l != f64::NEG_INFINITY {
                                ga.set(r, c, g.data()[c] * (va.get(r, c) - l).exp());
                            }
                        }
                    }
                    acc(a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (m, n) = val(p).shape();
                        let mut gp = Tensor::zeros(m, n);
                        for r in 0..m {
                            gp.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[off..off + n]);
                        }
                        off += n;
                        acc(p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (m, n) = val(p).shape();
                        let gp = Tensor::from_vec(m, n, g.data()[off * n..(off + m) * n].to_vec())
                            .expect("sizes checked");
                        off += m;
                        acc(p, gp);
                    }
                }
                &Op::SliceCols(a, start) => {
                    let (m, n) = val(a).shape();
                    let mut ga = Tensor::zeros(m, n);
                    for r in 0..m {
                        ga.row_slice_mut(r)[start..start + g.cols()].copy_from_slice(g.row_slice(r));
                    }
                    acc(a, ga);
                }
                &Op::SliceRows(a, start) => {
                    let (m, n) = val(a).shape();
                    let mut ga = Tensor::zeros(m, n);
                    ga.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    acc(a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (m, n) = val(*a).shape();
                    let mut ga = Tensor::zeros(m, n);
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, x) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                    acc(*a, ga);
                }
                &Op::Reshape(a) => {
                    let (m, n) = val(a).shape();
                    acc(a, g.reshaped(m, n));
                }
                &Op::GumbelSoftmax { weights, tau } => {
                    let w = val(weights);
                    let mut gw = vec![0.0; w.cols()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for k in 0..w.cols() {
                            let wk = w.data()[k];
                            if wk > 0.0 {
                                gw[k] += yr[k] * (gr[k] - dot) / (tau * wk);
                            }
                        }
                    }
                    acc(weights, Tensor::row(&gw));
                }
            }
        }
        Grads(grads)
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
