//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Each primitive appends one record holding its output value and whatever
//! it needs for the backward pass. [`Tape::backward`] walks the records in
//! exact reverse order, accumulating adjoints. Records whose inputs are all
//! constants are marked as not requiring a gradient and skipped.

use super::ops::{self, Axis, GeluKind, LayerNormCache};
use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Transpose(Var),
    Exp(Var),
    Sum(Var),
    Softmax(Var, Axis),
    Lse(Var, Axis),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Gelu(Var, GeluKind),
    L2Normalize {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    NormalizeCols(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], one slot per recorded value.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`; unused values yield an all-zero matrix.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.adjoints[v.0].take() {
            Some(m) => m,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (parameter or probed feature).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Hadamard(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Adds the `1 x cols` row `r` to every row of `m`.
    pub fn add_row(&mut self, m: Var, r: Var) -> Result<Var> {
        let (mv, rv) = (self.value(m), self.value(r));
        check_row(mv, rv, "add_row")?;
        let rs = rv.as_slice();
        let v = Matrix::from_fn(mv.rows(), mv.cols(), |i, j| mv[(i, j)] + rs[j]);
        let rg = self.rg(&[m, r]);
        Ok(self.push(v, Op::AddRow(m, r), rg))
    }

    /// Multiplies every row of `m` elementwise by the `1 x cols` row `r`.
    pub fn mul_row(&mut self, m: Var, r: Var) -> Result<Var> {
        let (mv, rv) = (self.value(m), self.value(r));
        check_row(mv, rv, "mul_row")?;
        let rs = rv.as_slice();
        let v = Matrix::from_fn(mv.rows(), mv.cols(), |i, j| mv[(i, j)] * rs[j]);
        let rg = self.rg(&[m, r]);
        Ok(self.push(v, Op::MulRow(m, r), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let v = ops::softmax(self.value(a), axis);
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a, axis), rg)
    }

    pub fn lse(&mut self, a: Var, axis: Axis) -> Var {
        let v = ops::lse(self.value(a), axis);
        let rg = self.rg(&[a]);
        self.push(v, Op::Lse(a, axis), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, cache) =
            ops::layer_norm_with_cache(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var, kind: GeluKind) -> Var {
        let v = ops::gelu(self.value(a), kind);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a, kind), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (v, norms) = ops::l2_normalize_rows_with_norms(self.value(x), eps);
        let rg = self.rg(&[x]);
        self.push(v, Op::L2Normalize { x, eps, norms }, rg)
    }

    /// Divides each column by its sum (floored at `eps`).
    pub fn normalize_cols(&mut self, a: Var, eps: f64) -> Var {
        let v = ops::normalize_cols(self.value(a), eps);
        let rg = self.rg(&[a]);
        self.push(v, Op::NormalizeCols(a, eps), rg)
    }

    /// Runs the reverse pass from the given `(value, adjoint)` seeds.
    ///
    /// Seeds on the same value accumulate. An empty seed list, or an empty
    /// tape, produces all-zero adjoints.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            let node = self
                .nodes
                .get(v.0)
                .ok_or_else(|| Error::Internal(format!("seed for unknown value {}", v.0)))?;
            if !node.value.same_shape(g) {
                return Err(Error::Internal(format!(
                    "seed shape {:?} does not match recorded {:?}",
                    g.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&mut adj[v.0], g.clone());
        }

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
            adj[idx] = Some(g);
        }

        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, m: Matrix| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut adj[v.0], m);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, ops::matmul_nt(g, val(*b))?);
                }
                if wants(*b) {
                    send(*b, ops::matmul_tn(val(*a), g)?);
                }
            }
            Op::MatMulNT(a, b) => {
                // y = a b^T: da = g b, db = g^T a
                if wants(*a) {
                    send(*a, ops::matmul(g, val(*b))?);
                }
                if wants(*b) {
                    send(*b, ops::matmul_tn(g, val(*a))?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y)?);
                }
                if wants(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::AddRow(m, r) => {
                send(*m, g.clone());
                if wants(*r) {
                    send(*r, g.col_sums());
                }
            }
            Op::MulRow(m, r) => {
                let rv = val(*r).as_slice();
                if wants(*m) {
                    send(*m, Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * rv[j]));
                }
                if wants(*r) {
                    send(*r, g.zip_map(val(*m), |x, y| x * y)?.col_sums());
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Exp(a) => send(*a, g.zip_map(&node.value, |x, y| x * y)?),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::Softmax(a, axis) => send(*a, ops::softmax_backward(&node.value, g, *axis)),
            Op::Lse(a, axis) => send(*a, ops::lse_backward(val(*a), g, *axis)),
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let (dx, dg, db) = ops::layer_norm_backward(cache, val(*gain), g);
                send(*x, dx);
                send(*gain, dg);
                send(*bias, db);
            }
            Op::Gelu(a, kind) => {
                let x = val(*a);
                send(
                    *a,
                    g.zip_map(x, |gv, xv| gv * ops::gelu_derivative(xv, *kind))?,
                );
            }
            Op::L2Normalize { x, eps, norms } => {
                send(
                    *x,
                    ops::l2_normalize_rows_backward(&node.value, norms, g, *eps),
                );
            }
            Op::NormalizeCols(a, eps) => send(*a, ops::normalize_cols_backward(val(*a), g, *eps)),
        }
        Ok(())
    }
}

fn check_row(m: &Matrix, r: &Matrix, op: &'static str) -> Result<()> {
    if r.rows() != 1 || r.cols() != m.cols() {
        return Err(Error::shape(
            op,
            format!("row {:?} against {:?}", r.shape(), m.shape()),
        ));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
