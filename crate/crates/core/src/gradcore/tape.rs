//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to apply the chain rule later. Nodes are only ever appended,
//! so tape order is a topological order and [`Tape::backward`] is a single
//! reverse sweep.

use super::tensor::Tensor;
use super::GradError;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Max0(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Erf(usize),
    Softplus(usize),
    Gelu(usize),
    MatMul(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    CumsumRows(usize),
    SumRows(usize),
    Mean(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    Gather(usize, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Max0(_) => "max0",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Erf(_) => "erf",
            Op::Softplus(_) => "softplus",
            Op::Gelu(_) => "gelu",
            Op::MatMul(..) => "matmul",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::CumsumRows(_) => "cumsum",
            Op::SumRows(_) => "sum_rows",
            Op::Mean(_) => "mean",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Gather(..) => "gather",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single-use recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when `var` does not influence the root.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf node; parameters, inputs and constants are all leaves.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, GradError> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, GradError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(va.shape(), vb.shape()).ok_or(GradError::Shape {
            op: name,
            left: va.shape(),
            right: vb.shape(),
        })?;
        let mut data = Vec::with_capacity(shape.0 * shape.1);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                data.push(f(va.bget(r, c), vb.bget(r, c)));
            }
        }
        self.push(Tensor::new(shape.0, shape.1, data), op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, GradError> {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, |x| -x, Op::Neg(a.0))
    }

    /// `factor * a` for a constant factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, GradError> {
        self.unary(a, |x| factor * x, Op::Scale(a.0, factor))
    }

    /// `a + offset` for a constant offset.
    pub fn offset(&mut self, a: Var, offset: f64) -> Result<Var, GradError> {
        self.unary(a, |x| x + offset, Op::Offset(a.0))
    }

    /// `max(a, 0)`; the subgradient at exactly zero is taken as 0.
    pub fn max0(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, |x| x.max(0.0), Op::Max0(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn erf(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, libm::erf, Op::Erf(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, softplus, Op::Softplus(a.0))
    }

    /// Exact erf-based GeLU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, gelu, Op::Gelu(a.0))
    }

    /// `a (n x k) * b (k x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            return Err(GradError::Shape {
                op: "matmul",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let value = va.matmul(vb);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = va.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &x in row {
                let e = (x - max).exp();
                total += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= total;
            }
        }
        self.push(Tensor::new(rows, cols, data), Op::SoftmaxRows(a.0))
    }

    /// Row-wise `log(softmax(a))`, computed without forming the softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = va.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        self.push(Tensor::new(rows, cols, data), Op::LogSoftmaxRows(a.0))
    }

    /// Inclusive cumulative sum along each row.
    pub fn cumsum_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let mut acc = 0.0;
            for &x in va.row_slice(r) {
                acc += x;
                data.push(acc);
            }
        }
        self.push(Tensor::new(rows, cols, data), Op::CumsumRows(a.0))
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let va = &self.nodes[a.0].value;
        let data = (0..va.rows())
            .map(|r| va.row_slice(r).iter().sum())
            .collect();
        self.push(Tensor::column(data), Op::SumRows(a.0))
    }

    /// Mean of all entries as a `1 x 1` scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let va = &self.nodes[a.0].value;
        if va.is_empty() {
            return Err(GradError::Shape {
                op: "mean",
                left: va.shape(),
                right: (1, 1),
            });
        }
        let m = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a.0))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, GradError> {
        let va = &self.nodes[a.0].value;
        if start > end || end > va.cols() {
            return Err(GradError::Shape {
                op: "slice_cols",
                left: va.shape(),
                right: (start, end),
            });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(va.rows() * width);
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row_slice(r)[start..end]);
        }
        self.push(
            Tensor::new(va.rows(), width, data),
            Op::SliceCols(a.0, start),
        )
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let rows = self.nodes[parts[0].0].value.rows();
        let mut cols = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(GradError::Shape {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row_slice(r));
            }
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::new(rows, cols, data), Op::ConcatCols(ids))
    }

    /// Picks column `indices[r]` from row `r`, giving an `n x 1` column.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var, GradError> {
        let va = &self.nodes[a.0].value;
        if indices.len() != va.rows() || indices.iter().any(|&i| i >= va.cols()) {
            return Err(GradError::Shape {
                op: "gather",
                left: va.shape(),
                right: (indices.len(), 1),
            });
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| va.get(r, c))
            .collect();
        self.push(Tensor::column(data), Op::Gather(a.0, indices))
    }

    /// Reverse sweep from a `1 x 1` root seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients, GradError> {
        let shape = self.nodes[root.0].value.shape();
        if shape != (1, 1) {
            return Err(GradError::NonScalarRoot { shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *b, g.map(|x| -x));
                    self.accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = zip_broadcast(&g, vb, |gv, y| gv * y);
                    let gb = zip_broadcast(&g, va, |gv, x| gv * x);
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[*b].value;
                    let ga = zip_broadcast(&g, vb, |gv, y| gv / y);
                    // d(a/b)/db = -out / b
                    let gb = zip3_broadcast(&g, out, vb, |gv, o, y| -gv * o / y);
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Neg(a) => self.accumulate(&mut grads, *a, g.map(|x| -x)),
                Op::Scale(a, f) => self.accumulate(&mut grads, *a, g.map(|x| x * f)),
                Op::Offset(a) => self.accumulate(&mut grads, *a, g.clone()),
                Op::Max0(a) => {
                    let va = &self.nodes[*a].value;
                    let ga = zip_same(&g, va, |gv, x| if x > 0.0 { gv } else { 0.0 });
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = zip_same(&g, out, |gv, o| gv * o);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let va = &self.nodes[*a].value;
                    let ga = zip_same(&g, va, |gv, x| gv / x);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_same(&g, out, |gv, o| gv * (1.0 - o * o));
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Erf(a) => {
                    let va = &self.nodes[*a].value;
                    let k = 2.0 / PI.sqrt();
                    let ga = zip_same(&g, va, |gv, x| gv * k * (-x * x).exp());
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let va = &self.nodes[*a].value;
                    let ga = zip_same(&g, va, |gv, x| gv * sigmoid(x));
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let va = &self.nodes[*a].value;
                    let ga = zip_same(&g, va, |gv, x| gv * gelu_grad(x));
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = g.matmul_transposed(vb);
                    let gb = va.transposed_matmul(&g);
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::SoftmaxRows(a) => {
                    let (rows, cols) = out.shape();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let (s, gr) = (out.row_slice(r), g.row_slice(r));
                        let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                        data.extend(s.iter().zip(gr).map(|(x, y)| x * (y - dot)));
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(rows, cols, data));
                }
                Op::LogSoftmaxRows(a) => {
                    let (rows, cols) = out.shape();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let (l, gr) = (out.row_slice(r), g.row_slice(r));
                        let total: f64 = gr.iter().sum();
                        data.extend(l.iter().zip(gr).map(|(x, y)| y - x.exp() * total));
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(rows, cols, data));
                }
                Op::CumsumRows(a) => {
                    let (rows, cols) = g.shape();
                    let mut data = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for c in (0..cols).rev() {
                            acc += g.get(r, c);
                            data[r * cols + c] = acc;
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(rows, cols, data));
                }
                Op::SumRows(a) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        data.extend(std::iter::repeat_n(g.get(r, 0), cols));
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(rows, cols, data));
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    let each = g.item() / (rows * cols) as f64;
                    self.accumulate(&mut grads, *a, Tensor::filled(rows, cols, each));
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    let width = g.cols();
                    for r in 0..rows {
                        ga.data_mut()[r * cols + start..r * cols + start + width]
                            .copy_from_slice(g.row_slice(r));
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.nodes[p].value.shape();
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        self.accumulate(&mut grads, p, Tensor::new(rows, cols, data));
                    }
                }
                Op::Gather(a, indices) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for (r, &c) in indices.iter().enumerate() {
                        ga.data_mut()[r * cols + c] = g.get(r, 0);
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, g: Tensor) {
        let g = g.reduce_to(self.nodes[target].value.shape());
        match &mut grads[target] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn zip_same(g: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(v.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(g.rows(), g.cols(), data)
}

/// `f(g, v)` over `g`'s shape, with `v` possibly broadcast.
fn zip_broadcast(g: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if g.shape() == v.shape() {
        return zip_same(g, v, f);
    }
    let (rows, cols) = g.shape();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(f(g.get(r, c), v.bget(r, c)));
        }
    }
    Tensor::new(rows, cols, data)
}

fn zip3_broadcast(g: &Tensor, o: &Tensor, v: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let (rows, cols) = g.shape();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(f(g.get(r, c), o.get(r, c), v.bget(r, c)));
        }
    }
    Tensor::new(rows, cols, data)
}
