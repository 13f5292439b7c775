use std::rc::Rc;

use super::{DropoutMask, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Affine,
    AddRow,
    MulRows,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    LogSoftmaxMasked,
    LayerNorm,
    Dropout,
    GatherRows,
    ConcatRows,
    SliceCols,
    Transpose,
    GradReverse,
    Sum,
    Mean,
    L2NormalizeRows,
    Attention,
    CrossEntropy,
    Pick,
}

/// Packed variable-length sequences: sequence `b` occupies rows
/// `offset(b) .. offset(b) + len(b)` of a token matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    lens: Vec<usize>,
    offsets: Vec<usize>,
}

impl SeqLayout {
    pub fn new(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        Self { lens, offsets }
    }

    pub fn num_sequences(&self) -> usize {
        self.lens.len()
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn len_of(&self, b: usize) -> usize {
        self.lens[b]
    }

    pub fn offset(&self, b: usize) -> usize {
        self.offsets[b]
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn max_len(&self) -> usize {
        self.lens.iter().copied().max().unwrap_or(0)
    }

    /// Sequence index of every packed row.
    pub fn row_owner(&self) -> Vec<usize> {
        self.lens
            .iter()
            .enumerate()
            .flat_map(|(b, &l)| std::iter::repeat_n(b, l))
            .collect()
    }

    /// Position within its own sequence of every packed row.
    pub fn row_position(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&l| 0..l).collect()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MulRows(Var, Rc<[f64]>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmaxMasked(Var, Rc<[bool]>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Rc<[f64]>),
    GatherRows(Var, Rc<[usize]>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    GradReverse(Var, f64),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<SeqLayout>,
        probs: Vec<f64>,
        prob_offsets: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
        weights: Rc<[f64]>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    Pick(Var, Rc<[(usize, usize)]>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine(..) => OpKind::Affine,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRows(..) => OpKind::MulRows,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmaxMasked(..) => OpKind::LogSoftmaxMasked,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Dropout(..) => OpKind::Dropout,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::Transpose(..) => OpKind::Transpose,
            Op::GradReverse(..) => OpKind::GradReverse,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::L2NormalizeRows(..) => OpKind::L2NormalizeRows,
            Op::Attention { .. } => OpKind::Attention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Pick(..) => OpKind::Pick,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Affine(x, _)
            | Op::MulRows(x, _)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::LogSoftmaxMasked(x, _)
            | Op::Dropout(x, _)
            | Op::GatherRows(x, _)
            | Op::SliceCols(x, _)
            | Op::Transpose(x)
            | Op::GradReverse(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::L2NormalizeRows(x, _)
            | Op::Pick(x, _) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(xs) => xs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A differentiation tape. Nodes are appended in evaluation order, which is
/// a topological order, and [`Graph::backward`] sweeps them in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `C (+)= op(A) * op(B)` where `A` is logically `m x k` and `B` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the logical dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn op_inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient, or zeros when the node received none.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, rg, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, rg, op)
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Adds the vector `bias` (length = last axis) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(shape_err("add_row", xv, bv));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % c])
            .collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor { shape, data }, rg, Op::AddRow(x, bias)))
    }

    /// Multiplies row `r` of `x` by the constant `factors[r]`.
    pub fn mul_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.rows() {
            return Err(TensorError::Shape {
                op: "mul_rows",
                left: xv.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / c])
            .collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, rg, Op::MulRows(x, factors.into())))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, rg, Op::Softmax(x))
    }

    /// Row-wise log-softmax restricted to entries where `allowed` is true.
    /// Disallowed entries are reported as `0` and receive no gradient.
    pub fn log_softmax_masked(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if allowed.len() != xv.len() {
            return Err(TensorError::Shape {
                op: "log_softmax_masked",
                left: xv.shape().to_vec(),
                right: vec![allowed.len()],
            });
        }
        let c = xv.cols();
        let mut data = vec![0.0; xv.len()];
        for (r, (row, out)) in xv.data().chunks(c).zip(data.chunks_mut(c)).enumerate() {
            let mask = &allowed[r * c..(r + 1) * c];
            if !mask.iter().any(|&a| a) {
                return Err(TensorError::AllMasked { row: r });
            }
            // NaN must survive so divergence surfaces as a non-finite loss
            let m = row
                .iter()
                .zip(mask)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, |acc, v| if v.is_nan() || acc.is_nan() { f64::NAN } else { acc.max(v) });
            let lse = m + row
                .iter()
                .zip(mask)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| (v - m).exp())
                .sum::<f64>()
                .ln();
            for ((o, &v), &a) in out.iter_mut().zip(row).zip(mask) {
                if a {
                    *o = v - lse;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::LogSoftmaxMasked(x, allowed.into()),
        ))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Applies an inverted-dropout mask when `training`; otherwise returns `x`.
    pub fn dropout(&mut self, x: Var, mask: &DropoutMask, training: bool) -> Result<Var> {
        if !training {
            return Ok(x);
        }
        let xv = self.value(x);
        if mask.shape().iter().product::<usize>() != xv.len() {
            return Err(TensorError::Shape {
                op: "dropout",
                left: xv.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let data = xv.data().iter().zip(mask.values()).map(|(a, m)| a * m).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Dropout(x, mask.values().into()),
        ))
    }

    /// Selects rows of `x` (rank-2 view). Backward scatters into the source rows.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        if indices.is_empty() {
            return Err(TensorError::Invalid("gather_rows with no indices".into()));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), c],
                data,
            },
            rg,
            Op::GatherRows(x, indices.into()),
        ))
    }

    /// Embedding lookup: row `index` of `table` as a `[1, d]` tensor.
    pub fn embedding_lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        self.gather_rows(table, &[index])
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let xv = self.value(x);
            if xv.cols() != c {
                return Err(shape_err("concat_rows", self.value(*first), xv));
            }
            rows += xv.rows();
            data.extend_from_slice(xv.data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor {
                shape: vec![rows, c],
                data,
            },
            rg,
            Op::ConcatRows(xs.to_vec()),
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c || len == 0 {
            return Err(TensorError::Invalid(format!(
                "slice_cols {start}..{} of {c} columns",
                start + len
            )));
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![xv.rows(), len],
                data,
            },
            rg,
            Op::SliceCols(x, start),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            rg,
            Op::Transpose(x),
        )
    }

    /// Gradient reversal: identity forward, `-lambda` times the upstream
    /// gradient backward.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.push(value, rg, Op::GradReverse(x, lambda))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::ZeroNorm("l2_normalize_rows"));
            }
            let n = if n.is_finite() { n } else { f64::NAN };
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::L2NormalizeRows(x, norms),
        ))
    }

    /// Scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N, d]` with rows laid out by `layout`. A query only
    /// sees keys of its own sequence, only earlier-or-equal positions when
    /// `causal`, and only keys flagged in `key_valid` when supplied.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &SeqLayout,
        causal: bool,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
            return Err(shape_err("attention", qv, kv));
        }
        let (n, d) = (qv.rows(), qv.cols());
        if layout.total() != n {
            return Err(TensorError::Shape {
                op: "attention layout",
                left: qv.shape().to_vec(),
                right: vec![layout.total()],
            });
        }
        if let Some(kvld) = key_valid {
            if kvld.len() != n {
                return Err(TensorError::Shape {
                    op: "attention key mask",
                    left: vec![n],
                    right: vec![kvld.len()],
                });
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::new();
        let mut prob_offsets = Vec::with_capacity(layout.num_sequences());
        let mut scores = Vec::new();
        for b in 0..layout.num_sequences() {
            let (off, len) = (layout.offset(b), layout.len_of(b));
            prob_offsets.push(probs.len());
            for i in 0..len {
                let qi = &qv.data()[(off + i) * d..(off + i + 1) * d];
                scores.clear();
                let mut m = f64::NEG_INFINITY;
                let mut any = false;
                let upto = if causal { i + 1 } else { len };
                for j in 0..len {
                    let allowed = j < upto && key_valid.is_none_or(|kv| kv[off + j]);
                    let s = if allowed {
                        let kj = &kv.data()[(off + j) * d..(off + j + 1) * d];
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                    any |= allowed;
                    m = if s.is_nan() || m.is_nan() { f64::NAN } else { m.max(s) };
                    scores.push(s);
                }
                if !any {
                    return Err(TensorError::AllMasked { row: off + i });
                }
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = if s.is_finite() { (*s - m).exp() } else { 0.0 };
                    total += *s;
                }
                let oi = &mut out[(off + i) * d..(off + i + 1) * d];
                for (j, s) in scores.iter().enumerate() {
                    let p = s / total;
                    probs.push(p);
                    if p != 0.0 {
                        let vj = &vv.data()[(off + j) * d..(off + j + 1) * d];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor {
                shape: vec![n, d],
                data: out,
            },
            rg,
            Op::Attention {
                q,
                k,
                v,
                layout: Rc::new(layout.clone()),
                probs,
                prob_offsets,
            },
        ))
    }

    /// Weighted mean of per-row softmax cross-entropy. Rows with zero
    /// weight are ignored; if every weight is zero the loss is exactly `0`
    /// and no gradient flows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut probs = vec![0.0; rows * c];
        let mut total = 0.0;
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &lv.data()[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - m).exp() / z;
            }
            let w = weights[r];
            if w != 0.0 {
                let t = targets[r];
                if t >= c {
                    return Err(TensorError::Index {
                        op: "cross_entropy target",
                        index: t,
                        len: c,
                    });
                }
                loss += w * (m + z.ln() - row[t]);
                total += w;
            }
        }
        let value = if total > 0.0 { loss / total } else { 0.0 };
        let rg = self.rg(logits) && total > 0.0;
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                weights: weights.into(),
                probs,
                total_weight: total,
            },
        ))
    }

    /// Collects the listed `(row, col)` entries into a vector.
    pub fn pick(&mut self, x: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(positions.len());
        for &(r, col) in positions {
            if r >= rows || col >= c {
                return Err(TensorError::Index {
                    op: "pick",
                    index: r * c + col,
                    len: rows * c,
                });
            }
            data.push(xv.data()[r * c + col]);
        }
        if data.is_empty() {
            return Err(TensorError::Invalid("pick with no positions".into()));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(data), rg, Op::Pick(x, positions.into())))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over fan-out; earlier gradients on this graph are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        // Accumulation buffer for input `v`, or None if it needs no gradient.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = buf!(*a) {
                    gemm(m, n, k, g, false, bv.data(), true, ga, 1.0);
                }
                if let Some(gb) = buf!(*b) {
                    gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = buf!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = buf!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if a == b {
                    if let Some(ga) = buf!(*a) {
                        for j in 0..g.len() {
                            ga[j] += 2.0 * g[j] * ad[j];
                        }
                    }
                } else {
                    if let Some(ga) = buf!(*a) {
                        for j in 0..g.len() {
                            ga[j] += g[j] * bd[j];
                        }
                    }
                    if let Some(gb) = buf!(*b) {
                        for j in 0..g.len() {
                            gb[j] += g[j] * ad[j];
                        }
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
                }
            }
            Op::AddRow(x, bias) => {
                let c = val(*x).cols();
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = buf!(*bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::MulRows(x, f) => {
                let c = val(*x).cols();
                if let Some(gx) = buf!(*x) {
                    for (j, (a, b)) in gx.iter_mut().zip(g).enumerate() {
                        *a += b * f[j / c];
                    }
                }
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                if let Some(gx) = buf!(*x) {
                    for j in 0..g.len() {
                        if xd[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = buf!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = buf!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = buf!(*x) {
                    for ((yr, gr), out) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxMasked(x, allowed) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = buf!(*x) {
                    for r in 0..node.value.rows() {
                        let span = r * c..(r + 1) * c;
                        let gsum: f64 = g[span.clone()]
                            .iter()
                            .zip(&allowed[span.clone()])
                            .filter(|(_, &a)| a)
                            .map(|(v, _)| v)
                            .sum();
                        for j in span {
                            if allowed[j] {
                                gx[j] += g[j] - y[j].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gd = val(*gain).data();
                if let Some(gg) = buf!(*gain) {
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = buf!(*bias) {
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = buf!(*x) {
                    let mut dxh = vec![0.0; c];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxh[j] = gr[j] * gd[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let out = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] += inv_std[r] * (dxh[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(gx) = buf!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * mask[j];
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let c = val(*x).cols();
                if let Some(gx) = buf!(*x) {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut gx[src * c..(src + 1) * c];
                        dst.iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut start = 0;
                for &x in xs {
                    let len = val(x).len();
                    if let Some(gx) = buf!(x) {
                        gx.iter_mut()
                            .zip(&g[start..start + len])
                            .for_each(|(a, b)| *a += b);
                    }
                    start += len;
                }
            }
            Op::SliceCols(x, start) => {
                let c = val(*x).cols();
                let w = node.value.cols();
                if let Some(gx) = buf!(*x) {
                    for (r, gr) in g.chunks(w).enumerate() {
                        let dst = &mut gx[r * c + start..r * c + start + w];
                        dst.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                if let Some(gx) = buf!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::GradReverse(x, lambda) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += -lambda * b);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::L2NormalizeRows(x, norms) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = buf!(*x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                prob_offsets,
            } => {
                let d = node.value.cols();
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let total = node.value.len();
                let mut dq = vec![0.0; total];
                let mut dk = vec![0.0; total];
                let mut dv = vec![0.0; total];
                let mut dp = Vec::new();
                for b in 0..layout.num_sequences() {
                    let (off, len) = (layout.offset(b), layout.len_of(b));
                    let pb = &probs[prob_offsets[b]..prob_offsets[b] + len * len];
                    for i in 0..len {
                        let gi = &g[(off + i) * d..(off + i + 1) * d];
                        let pi = &pb[i * len..(i + 1) * len];
                        dp.clear();
                        for j in 0..len {
                            let vj = &vd[(off + j) * d..(off + j + 1) * d];
                            dp.push(gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                            if pi[j] != 0.0 {
                                let dvj = &mut dv[(off + j) * d..(off + j + 1) * d];
                                dvj.iter_mut().zip(gi).for_each(|(a, b)| *a += pi[j] * b);
                            }
                        }
                        let dot: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for j in 0..len {
                            let ds = pi[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                dq[(off + i) * d + t] += ds * kd[(off + j) * d + t];
                                dk[(off + j) * d + t] += ds * qd[(off + i) * d + t];
                            }
                        }
                    }
                }
                for (var, src) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(gx) = buf!(var) {
                        gx.iter_mut().zip(&src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                if *total_weight > 0.0 {
                    let c = val(*logits).cols();
                    if let Some(gl) = buf!(*logits) {
                        for r in 0..targets.len() {
                            let w = weights[r];
                            if w == 0.0 {
                                continue;
                            }
                            let s = g[0] * w / total_weight;
                            for j in 0..c {
                                let y = if j == targets[r] { 1.0 } else { 0.0 };
                                gl[r * c + j] += s * (probs[r * c + j] - y);
                            }
                        }
                    }
                }
            }
            Op::Pick(x, pos) => {
                let c = val(*x).cols();
                if let Some(gx) = buf!(*x) {
                    for (t, &(r, col)) in pos.iter().enumerate() {
                        gx[r * c + col] += g[t];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, random_tensor};

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = g.constant(Tensor::identity(2));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[vec![1.0, 2.0]]));
        let b = g.constant(t(&[vec![3.0], vec![4.0]]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Shape { op: "matmul", .. }));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let y = g.softmax(x);
        assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax(x);
        assert!(g.value(y).is_finite());
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![5.0; 4]));
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean() {
        let x = random_tensor(&[5, 7], 3, 4.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gain = g.constant(Tensor::full(&[7], 1.0));
        let bias = g.constant(Tensor::zeros(&[7]));
        let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| v * v).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.5, -2.0, 3.0]));
        let keep_all = DropoutMask::new(1, &[3], 1.0).unwrap();
        let y = g.dropout(x, &keep_all, true).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let half = DropoutMask::from_keep(&[3], &[true, false, true], 0.5).unwrap();
        let y = g.dropout(x, &half, false).unwrap();
        assert_eq!(y, x);
        let y = g.dropout(x, &half, true).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 0.0, 6.0]);

        let wrong = DropoutMask::new(1, &[4], 0.5).unwrap();
        assert!(g.dropout(x, &wrong, true).is_err());
    }

    #[test]
    fn embedding_lookup_reads_and_scatters() {
        let mut g = Graph::new();
        let table = g.param(t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]));
        let r0 = g.embedding_lookup(table, 0).unwrap();
        assert_eq!(g.value(r0).data(), &[1.0, 2.0, 3.0]);
        let r0b = g.embedding_lookup(table, 0).unwrap();
        let s = g.add(r0, r0b).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        let gr = g.grad(table).unwrap();
        assert_eq!(&gr[0..3], &[2.0, 2.0, 2.0]);
        assert!(gr[3..].iter().all(|&v| v == 0.0));
        assert!(matches!(
            g.embedding_lookup(table, 3),
            Err(TensorError::Index { .. })
        ));
    }

    #[test]
    fn grad_reverse_forward_identity_backward_negated() {
        for lambda in [0.0, 0.5, 1.0] {
            let mut g = Graph::new();
            let x = g.param(Tensor::vector(vec![3.5, -2.0]));
            let r = g.grad_reverse(x, lambda);
            assert_eq!(g.value(r).data(), &[3.5, -2.0]);
            let w = g.constant(Tensor::vector(vec![0.7, -1.3]));
            let y = g.mul(r, w).unwrap();
            let l = g.sum(y);
            g.backward(l).unwrap();
            let gx = g.grad(x).unwrap();
            assert_eq!(gx, &[-lambda * 0.7, -lambda * -1.3]);
        }
    }

    #[test]
    fn double_reversal_restores_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let r1 = g.grad_reverse(x, 1.0);
        let r2 = g.grad_reverse(r1, 1.0);
        let y = g.mul(r2, r2).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        assert!(matches!(
            g.backward(sq),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn attention_single_position_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(t(&[vec![0.3, -1.0]]));
        let k = g.constant(t(&[vec![2.0, 0.5]]));
        let v = g.constant(t(&[vec![4.0, -7.0]]));
        let o = g.attention(q, k, v, &SeqLayout::new(vec![1]), true, None).unwrap();
        assert_eq!(g.value(o).data(), &[4.0, -7.0]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.constant(t(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 1.0]]));
        let k = g.constant(t(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]));
        let v = g.constant(t(&[vec![3.0, 0.0], vec![0.0, 3.0], vec![3.0, 3.0]]));
        let o = g.attention(q, k, v, &SeqLayout::new(vec![3]), false, None).unwrap();
        for r in 0..3 {
            let row = g.value(o).row(r);
            assert!((row[0] - 2.0).abs() < 1e-12 && (row[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_two_by_two_reference() {
        // Reference: scores = QK^T / sqrt(2), row softmax, times V.
        let qr = [[1.0, 0.0], [0.0, 1.0]];
        let kr = [[1.0, 1.0], [0.0, 2.0]];
        let vr = [[1.0, 2.0], [3.0, 4.0]];
        let mut expected = [[0.0; 2]; 2];
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (qr[i][0] * kr[j][0] + qr[i][1] * kr[j][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..2 {
                expected[i][c] = (0..2).map(|j| s[j].exp() / z * vr[j][c]).sum();
            }
        }
        let mut g = Graph::new();
        let q = g.constant(t(&[qr[0].to_vec(), qr[1].to_vec()]));
        let k = g.constant(t(&[kr[0].to_vec(), kr[1].to_vec()]));
        let v = g.constant(t(&[vr[0].to_vec(), vr[1].to_vec()]));
        let o = g.attention(q, k, v, &SeqLayout::new(vec![2]), false, None).unwrap();
        for i in 0..2 {
            for c in 0..2 {
                assert!((g.value(o).row(i)[c] - expected[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_all_masked_row_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let err = g
            .attention(x, x, x, &SeqLayout::new(vec![2]), true, Some(&[false, true]))
            .unwrap_err();
        assert_eq!(err, TensorError::AllMasked { row: 0 });
    }

    #[test]
    fn cross_entropy_uniform_and_empty() {
        let mut g = Graph::new();
        let l = g.param(Tensor::zeros(&[3, 2]));
        let ce = g.cross_entropy(l, &[0, 1, 1], &[1.0, 1.0, 1.0]).unwrap();
        assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-15);
        let ce0 = g.cross_entropy(l, &[0, 1, 1], &[0.0; 3]).unwrap();
        assert_eq!(g.value(ce0).item(), 0.0);
        g.backward(ce0).unwrap();
        assert!(g.grad(l).is_none());
    }

    #[test]
    fn gradcheck_every_op() {
        for seed in 0..20u64 {
            let a = random_tensor(&[3, 4], seed, 1.0);
            let b = random_tensor(&[4, 2], seed + 100, 1.0);
            let c = random_tensor(&[3, 4], seed + 200, 1.0);
            let bias = random_tensor(&[4], seed + 300, 1.0);
            let gain = random_tensor(&[4], seed + 400, 1.0);
            let tol = 1e-4;

            let r = check_gradients(&[a.clone(), b.clone()], 1e-5, |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let w = g.constant(random_tensor(&[3, 2], 9, 1.0));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(r.max_rel_error() <= tol, "matmul {r:?}");

            let r = check_gradients(&[a.clone(), c.clone()], 1e-5, |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(s, v[1])?;
                let m = g.mul(d, v[1])?;
                let m = g.affine(m, 0.7, 0.2);
                let t = g.tanh(m);
                let s = g.sigmoid(t);
                let w = g.constant(random_tensor(&[3, 4], 11, 1.0));
                let y = g.mul(s, w)?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(r.max_rel_error() <= tol, "elementwise {r:?}");

            let r = check_gradients(&[a.clone(), bias.clone()], 1e-5, |g, v| {
                let y = g.add_row(v[0], v[1])?;
                let y = g.mul_rows(y, &[0.5, -1.0, 2.0])?;
                let y = g.relu(y);
                let w = g.constant(random_tensor(&[3, 4], 12, 1.0));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(r.max_rel_error() <= tol, "add_row/relu {r:?}");

            let r = check_gradients(&[a.clone()], 1e-5, |g, v| {
                let y = g.softmax(v[0]);
                let w = g.constant(random_tensor(&[3, 4], 13, 1.0));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(r.max_rel_error() <= tol, "softmax {r:?}");

            let r = check_gradients(&[a.clone(), gain.clone(), bias.clone()], 1e-5, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let w = g.constant(random_tensor(&[3, 4], 14, 1.0));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(r.max_rel_error() <= tol, "layer_norm {r:?}");

            let mask = DropoutMask::new(seed, &[3, 4], 0.7).unwrap();
            let r = check_gradients(&[a.clone()], 1e-5, |g, v| {
                let y = g.dropout(v[0], &mask, true)?;
                let y = g.gather_rows(y, &[2, 0, 2])?;
                let y = g.slice_cols(y, 1, 2)?;
                let t = g.transpose(y);
                let cat = g.concat_rows(&[t, t])?;
                let p = g.pick(cat, &[(0, 0), (1, 2), (3, 1)])?;
                let p = g.mul(p, p)?;
                Ok(g.mean(p))
            })
            .unwrap();
            assert!(r.max_rel_error() <= tol, "indexing {r:?}");

            let r = check_gradients(&[a.clone()], 1e-5, |g, v| {
                let y = g.l2_normalize_rows(v[0])?;
                let r = g.grad_reverse(y, 0.5);
                let w = g.constant(random_tensor(&[3, 4], 15, 1.0));
                let y = g.mul(r, w)?;
                Ok(g.sum(y))
            })
            .unwrap();
            // grad_reverse makes the analytic gradient -0.5x the plain one, so
            // compare against the forward function with the same sign flip.
            assert!(r.max_rel_error_scaled(-0.5) <= tol, "l2/grl {r:?}");

            let mask: Vec<bool> = (0..16).map(|i| i % 5 != 0).collect();
            let sq = random_tensor(&[4, 4], seed + 500, 2.0);
            let r = check_gradients(&[sq], 1e-5, |g, v| {
                let y = g.log_softmax_masked(v[0], &mask)?;
                let p = g.pick(y, &[(0, 1), (1, 2), (3, 3)])?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(r.max_rel_error() <= tol, "log_softmax_masked {r:?}");

            let logits = random_tensor(&[4, 2], seed + 600, 2.0);
            let r = check_gradients(&[logits], 1e-5, |g, v| {
                g.cross_entropy(v[0], &[0, 1, 1, 0], &[1.0, 0.0, 2.0, 1.0])
            })
            .unwrap();
            assert!(r.max_rel_error() <= tol, "cross_entropy {r:?}");

            let q = random_tensor(&[5, 3], seed + 700, 1.0);
            let k = random_tensor(&[5, 3], seed + 800, 1.0);
            let vv = random_tensor(&[5, 3], seed + 900, 1.0);
            for causal in [false, true] {
                let r = check_gradients(&[q.clone(), k.clone(), vv.clone()], 1e-5, |g, v| {
                    let o = g.attention(v[0], v[1], v[2], &SeqLayout::new(vec![2, 3]), causal, None)?;
                    let w = g.constant(random_tensor(&[5, 3], 16, 1.0));
                    let y = g.mul(o, w)?;
                    Ok(g.sum(y))
                })
                .unwrap();
                assert!(r.max_rel_error() <= tol, "attention {r:?}");
            }
        }
    }
}
