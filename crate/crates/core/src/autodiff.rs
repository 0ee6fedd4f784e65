//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Networks (toy encoders, the inversion MLP, the masked-token head) are
//! written as tape programs. Losses enter the tape as [`Tape::scalar_fn`]
//! nodes: the loss function computes its value together with its analytic
//! gradient and the tape only chains it.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Param,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Transpose(Var),
    RowSoftmax(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ScalarFn { inputs: Vec<Var>, grads: Vec<Matrix> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    cdf + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = libm::exp(*x - max);
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
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

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Param, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        if b.rows() != 1 || b.cols() != self.value(a).cols() {
            return Err(Error::shape(
                "add_row bias",
                format_args!("1x{}", self.value(a).cols()),
                format_args!("{}x{}", b.rows(), b.cols()),
            ));
        }
        let b = b.row(0).to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, y) in value.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale(factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    /// Column means: `n × c` to `1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(Error::Empty("mean_rows input"));
        }
        let mut out = Matrix::zeros(1, m.cols());
        for r in m.iter_rows() {
            for (o, x) in out.row_mut(0).iter_mut().zip(r) {
                *o += x;
            }
        }
        out.scale(1.0 / m.rows() as f64);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.value(a);
        if start > end || end > m.rows() {
            return Err(Error::OutOfRange {
                what: "row slice",
                detail: alloc::format!("{start}..{end} of {}", m.rows()),
            });
        }
        let value =
            Matrix::from_vec(end - start, m.cols(), m.as_slice()[start * m.cols()..end * m.cols()].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    /// Table lookup: output row `k` is `table[indices[k]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let m = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * m.cols());
        for &i in indices {
            if i >= m.rows() {
                return Err(Error::OutOfRange {
                    what: "gather index",
                    detail: alloc::format!("{i} of {}", m.rows()),
                });
            }
            data.extend_from_slice(m.row(i));
        }
        let value = Matrix::from_vec(indices.len(), m.cols(), data)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::GatherRows(table, indices.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::shape("concat_rows", cols, m.cols()));
            }
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Scalar node whose value and local gradients are supplied by `f`.
    ///
    /// `f` receives the input values and returns the scalar together with
    /// `d value / d input` for every input, in order.
    pub fn scalar_fn<F>(&mut self, inputs: &[Var], f: F) -> Result<Var>
    where
        F: FnOnce(&[&Matrix]) -> Result<(f64, Vec<Matrix>)>,
    {
        let values: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
        let (value, grads) = f(&values)?;
        if grads.len() != inputs.len() {
            return Err(Error::shape("scalar_fn gradients", inputs.len(), grads.len()));
        }
        for (g, v) in grads.iter().zip(&values) {
            if g.shape() != v.shape() {
                return Err(Error::shape(
                    "scalar_fn gradient",
                    format_args!("{:?}", v.shape()),
                    format_args!("{:?}", g.shape()),
                ));
            }
        }
        let rg = inputs.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Matrix::filled(1, 1, value),
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        ))
    }

    /// Sum of several `1 × 1` nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = *parts.first().ok_or(Error::Empty("sum_scalars"))?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse pass seeded with `d output / d output = 1`. `output` must be `1 × 1`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::shape("backward output", "1x1", format_args!("{:?}", out.shape())));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Param | Op::Const => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul_transposed(self.value(*b))?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).transposed_matmul(&g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone())?;
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*bias) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in g.iter_rows() {
                            for (o, x) in gb.row_mut(0).iter_mut().zip(r) {
                                *o += x;
                            }
                        }
                        accumulate(&mut grads, *bias, gb)?;
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                }
                Op::Scale(a, f) => {
                    let mut ga = g.clone();
                    ga.scale(*f);
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for (gx, yx) in ga.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *gx *= 1.0 - yx * yx;
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for (gx, xx) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *gx *= gelu_grad(*xx);
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose())?;
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).rows();
                    let mut ga = Matrix::zeros(n, g.cols());
                    let inv = 1.0 / n as f64;
                    for i in 0..n {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o = x * inv;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        ga.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::GatherRows(table, indices) => {
                    let src = self.value(*table);
                    let mut gt = Matrix::zeros(src.rows(), src.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, x) in gt.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *table, gt)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let m = self.value(p);
                        if self.rg(p) {
                            let slice = g.as_slice()[offset * m.cols()..(offset + m.rows()) * m.cols()].to_vec();
                            accumulate(&mut grads, p, Matrix::from_vec(m.rows(), m.cols(), slice)?)?;
                        }
                        offset += m.rows();
                    }
                }
                Op::ScalarFn { inputs, grads: local } => {
                    let upstream = g[(0, 0)];
                    for (&p, lg) in inputs.iter().zip(local) {
                        if self.rg(p) {
                            let mut gp = lg.clone();
                            gp.scale(upstream);
                            accumulate(&mut grads, p, gp)?;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
