//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are 2-D
//! ([`DenseMatrix`]); scalars are `1 × 1`. [`Tape::backward`] walks the record
//! in reverse and accumulates vector-Jacobian products into every node that
//! requires a gradient.
//!
//! Each op checks its output for NaN/Inf and fails with
//! [`Error::NumericalFault`] instead of recording it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape, Error, Result};
use crate::matrix::DenseMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBroadcast(usize, usize),
    ScalarMul(usize, usize),
    DivScalar(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Abs(usize),
    Dropout(usize, Vec<f64>),
    SumNeighbors(usize, Vec<Vec<usize>>),
    ZeroPadRows(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Trace(usize),
    FrobeniusNorm(usize),
    Sum(usize),
    ColumnScale(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<DenseMatrix>>,
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: DenseMatrix) -> Result<Tensor> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Result<Tensor> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn scalar_constant(&mut self, value: f64) -> Result<Tensor> {
        self.constant(DenseMatrix::filled(1, 1, value))
    }

    pub fn value(&self, t: Tensor) -> &DenseMatrix {
        &self.nodes[t.0].value
    }

    /// Value of a `1 × 1` tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        let v = self.value(t);
        debug_assert_eq!(v.shape(), (1, 1));
        v.as_slice()[0]
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.value(t).shape()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `t`.
    pub fn grad(&self, t: Tensor) -> Option<&DenseMatrix> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool, name: &'static str) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::NumericalFault(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    fn unary(&mut self, a: Tensor, value: DenseMatrix, op: Op, name: &'static str) -> Result<Tensor> {
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg, name)
    }

    fn binary(&mut self, a: Tensor, b: Tensor, value: DenseMatrix, op: Op, name: &'static str) -> Result<Tensor> {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg, name)
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn expect_scalar(&self, op: &'static str, s: Tensor) -> Result<f64> {
        if self.shape(s) != (1, 1) {
            return Err(shape(op, format!("expected a 1x1 scalar, got {:?}", self.shape(s))));
        }
        Ok(self.scalar(s))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let v = self.value(a).try_matmul(self.value(b))?;
        self.binary(a, b, v, Op::MatMul(a.0, b.0), "matmul")
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.value(a).transpose();
        self.unary(a, v, Op::Transpose(a.0), "transpose")
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b));
        self.binary(a, b, v, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b));
        self.binary(a, b, v, Op::Sub(a.0, b.0), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).hadamard(self.value(b));
        self.binary(a, b, v, Op::Mul(a.0, b.0), "mul")
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.shape(a);
        if self.shape(bias) != (1, cols) {
            return Err(shape(
                "add_row_broadcast",
                format!("bias {:?} for {rows}x{cols} input", self.shape(bias)),
            ));
        }
        let mut v = self.value(a).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..rows {
            for (x, bv) in v.row_mut(r).iter_mut().zip(&b) {
                *x += bv;
            }
        }
        self.binary(a, bias, v, Op::AddRowBroadcast(a.0, bias.0), "add_row_broadcast")
    }

    /// `a · s` for a `1 × 1` tensor `s`.
    pub fn scalar_mul(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        let sv = self.expect_scalar("scalar_mul", s)?;
        let v = self.value(a).scale(sv);
        self.binary(a, s, v, Op::ScalarMul(a.0, s.0), "scalar_mul")
    }

    /// `a / s` for a `1 × 1` tensor `s`.
    pub fn div_scalar(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        let sv = self.expect_scalar("div_scalar", s)?;
        let v = self.value(a).map(|x| x / sv);
        self.binary(a, s, v, Op::DivScalar(a.0, s.0), "div_scalar")
    }

    /// `c · a` for a fixed real `c`.
    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let v = self.value(a).scale(c);
        self.unary(a, v, Op::Scale(a.0, c), "scale")
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(a, v, Op::Relu(a.0), "relu")
    }

    pub fn abs(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.value(a).map(libm::fabs);
        self.unary(a, v, Op::Abs(a.0), "abs")
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1/(1 − rate)`. The mask is drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Tensor, rate: f64, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParams(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).as_slice().len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut v = self.value(a).clone();
        for (x, m) in v.as_mut_slice().iter_mut().zip(&mask) {
            *x *= m;
        }
        self.unary(a, v, Op::Dropout(a.0, mask), "dropout")
    }

    /// Row `v` of the output is the sum of rows `u ∈ neighbors[v]` of `h`.
    /// Neighbor lists must be symmetric.
    pub fn sum_neighbors(&mut self, h: Tensor, neighbors: &[Vec<usize>]) -> Result<Tensor> {
        let (rows, cols) = self.shape(h);
        if neighbors.len() != rows || neighbors.iter().flatten().any(|&u| u >= rows) {
            return Err(shape(
                "sum_neighbors",
                format!("{} neighbor lists for {rows} rows", neighbors.len()),
            ));
        }
        let hv = self.value(h);
        let mut v = DenseMatrix::zeros(rows, cols);
        for (node, list) in neighbors.iter().enumerate() {
            for &u in list {
                for (o, x) in v.row_mut(node).iter_mut().zip(hv.row(u)) {
                    *o += x;
                }
            }
        }
        self.unary(h, v, Op::SumNeighbors(h.0, neighbors.to_vec()), "sum_neighbors")
    }

    /// Appends zero rows up to `rows` total.
    pub fn zero_pad_rows(&mut self, a: Tensor, rows: usize) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if rows < r {
            return Err(shape("zero_pad_rows", format!("cannot pad {r} rows down to {rows}")));
        }
        let mut v = DenseMatrix::zeros(rows, c);
        v.as_mut_slice()[..r * c].copy_from_slice(self.value(a).as_slice());
        self.unary(a, v, Op::ZeroPadRows(a.0), "zero_pad_rows")
    }

    pub fn slice_rows(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, _) = self.shape(a);
        if start + len > r {
            return Err(shape("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let v = self.value(a).rows_range(start, len);
        self.unary(a, v, Op::SliceRows(a.0, start), "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (_, c) = self.shape(a);
        if start + len > c {
            return Err(shape("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let v = self.value(a).cols_range(start, len);
        self.unary(a, v, Op::SliceCols(a.0, start), "slice_cols")
    }

    /// Vertical stacking.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let cols = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(shape("concat_rows", "parts must be non-empty with equal widths".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).as_slice());
        }
        let rows = data.len() / cols.max(1);
        let v = DenseMatrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(
            v,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            rg,
            "concat_rows",
        )
    }

    /// Horizontal stacking.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape("concat_cols", "no parts".into()));
        }
        let refs: Vec<&DenseMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = DenseMatrix::hconcat(&refs)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(
            v,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            rg,
            "concat_cols",
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(shape("reshape", format!("{r}x{c} into {rows}x{cols}")));
        }
        let v = self.value(a).reshaped(rows, cols);
        self.unary(a, v, Op::Reshape(a.0), "reshape")
    }

    pub fn trace(&mut self, a: Tensor) -> Result<Tensor> {
        let v = DenseMatrix::filled(1, 1, self.value(a).trace());
        self.unary(a, v, Op::Trace(a.0), "trace")
    }

    pub fn frobenius_norm(&mut self, a: Tensor) -> Result<Tensor> {
        let v = DenseMatrix::filled(1, 1, self.value(a).frobenius_norm());
        self.unary(a, v, Op::FrobeniusNorm(a.0), "frobenius_norm")
    }

    /// Sum of all entries.
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let v = DenseMatrix::filled(1, 1, self.value(a).as_slice().iter().sum());
        self.unary(a, v, Op::Sum(a.0), "sum")
    }

    /// Multiplies column `c` by the fixed `scales[c]`.
    pub fn column_scale(&mut self, a: Tensor, scales: &[f64]) -> Result<Tensor> {
        let (rows, cols) = self.shape(a);
        if scales.len() != cols {
            return Err(shape(
                "column_scale",
                format!("{} scales for {cols} columns", scales.len()),
            ));
        }
        let mut v = self.value(a).clone();
        for r in 0..rows {
            for (x, s) in v.row_mut(r).iter_mut().zip(scales) {
                *x *= s;
            }
        }
        self.unary(a, v, Op::ColumnScale(a.0, scales.to_vec()), "column_scale")
    }

    /// Reverse pass from the `1 × 1` tensor `loss`. Replaces gradients from
    /// any previous call.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(shape(
                "backward",
                format!("loss must be 1x1, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            if !g.is_finite() {
                return Err(Error::NumericalFault("backward"));
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) {
        let nodes = &self.nodes;
        let val = |i: usize| &nodes[i].value;
        let mut acc = |i: usize, d: DenseMatrix| {
            if !nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if nodes[a].requires_grad {
                    acc(a, g.matmul_t(val(b)));
                }
                if nodes[b].requires_grad {
                    acc(b, val(a).t_matmul(g));
                }
            }
            &Op::Transpose(a) => acc(a, g.transpose()),
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                acc(a, g.hadamard(val(b)));
                acc(b, g.hadamard(val(a)));
            }
            &Op::AddRowBroadcast(a, b) => {
                acc(a, g.clone());
                let (rows, cols) = g.shape();
                let mut db = DenseMatrix::zeros(1, cols);
                for r in 0..rows {
                    for (d, x) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(b, db);
            }
            &Op::ScalarMul(a, s) => {
                let sv = val(s).as_slice()[0];
                acc(a, g.scale(sv));
                let ds: f64 = g.as_slice().iter().zip(val(a).as_slice()).map(|(x, y)| x * y).sum();
                acc(s, DenseMatrix::filled(1, 1, ds));
            }
            &Op::DivScalar(a, s) => {
                let sv = val(s).as_slice()[0];
                acc(a, g.scale(1.0 / sv));
                let gx: f64 = g.as_slice().iter().zip(val(a).as_slice()).map(|(x, y)| x * y).sum();
                acc(s, DenseMatrix::filled(1, 1, -gx / (sv * sv)));
            }
            &Op::Scale(a, c) => acc(a, g.scale(c)),
            &Op::Relu(a) => {
                let mut d = g.clone();
                for (x, v) in d.as_mut_slice().iter_mut().zip(val(a).as_slice()) {
                    if *v <= 0.0 {
                        *x = 0.0;
                    }
                }
                acc(a, d);
            }
            &Op::Abs(a) => {
                let mut d = g.clone();
                for (x, v) in d.as_mut_slice().iter_mut().zip(val(a).as_slice()) {
                    *x *= if *v > 0.0 {
                        1.0
                    } else if *v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                acc(a, d);
            }
            Op::Dropout(a, mask) => {
                let mut d = g.clone();
                for (x, m) in d.as_mut_slice().iter_mut().zip(mask) {
                    *x *= m;
                }
                acc(*a, d);
            }
            Op::SumNeighbors(h, neighbors) => {
                let mut d = DenseMatrix::zeros(g.rows(), g.cols());
                for (node, list) in neighbors.iter().enumerate() {
                    for &u in list {
                        for (o, x) in d.row_mut(u).iter_mut().zip(g.row(node)) {
                            *o += x;
                        }
                    }
                }
                acc(*h, d);
            }
            &Op::ZeroPadRows(a) => {
                let (r, _) = val(a).shape();
                acc(a, g.rows_range(0, r));
            }
            &Op::SliceRows(a, start) => {
                let (r, c) = val(a).shape();
                let mut d = DenseMatrix::zeros(r, c);
                d.as_mut_slice()[start * c..start * c + g.as_slice().len()].copy_from_slice(g.as_slice());
                acc(a, d);
            }
            &Op::SliceCols(a, start) => {
                let (r, c) = val(a).shape();
                let mut d = DenseMatrix::zeros(r, c);
                for row in 0..r {
                    d.row_mut(row)[start..start + g.cols()].copy_from_slice(g.row(row));
                }
                acc(a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = val(p).rows();
                    acc(p, g.rows_range(offset, r));
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    acc(p, g.cols_range(offset, c));
                    offset += c;
                }
            }
            &Op::Reshape(a) => {
                let (r, c) = val(a).shape();
                acc(a, g.reshaped(r, c));
            }
            &Op::Trace(a) => {
                let (r, c) = val(a).shape();
                let gv = g.as_slice()[0];
                let mut d = DenseMatrix::zeros(r, c);
                for i in 0..r.min(c) {
                    d[(i, i)] = gv;
                }
                acc(a, d);
            }
            &Op::FrobeniusNorm(a) => {
                let n = nodes[id].value.as_slice()[0];
                let (r, c) = val(a).shape();
                if n > 0.0 {
                    acc(a, val(a).scale(g.as_slice()[0] / n));
                } else {
                    acc(a, DenseMatrix::zeros(r, c));
                }
            }
            &Op::Sum(a) => {
                let (r, c) = val(a).shape();
                acc(a, DenseMatrix::filled(r, c, g.as_slice()[0]));
            }
            Op::ColumnScale(a, scales) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    for (x, s) in d.row_mut(r).iter_mut().zip(scales) {
                        *x *= s;
                    }
                }
                acc(*a, d);
            }
        }
    }
}
