//! Dense `f64` tensors and a tape for reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in the order it is executed, so the
//! node list is already topologically sorted. [`Tape::backward`] walks it in
//! reverse, accumulating vector-Jacobian products; gradients from several
//! consumers of one value add up.
//!
//! ```
//! use lmpcast::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![3.0, 4.0]));
//! let norm = tape.l2_norm(x).unwrap();
//! let grads = tape.backward(norm).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[0.6, 0.8]);
//! ```

mod check;
mod gemm;
mod sparse;

use std::fmt;
use std::sync::Arc;

pub use check::{gradient_check, GradCheckReport};
pub use sparse::{ChebOperators, Csr};

use gemm::{gemm, View};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// Row-major dense array. `shape == []` is a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err("reshape", &[&self.shape, shape]));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Permuted copy: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self, TensorError> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("axes {axes:?} are not a permutation of {nd} dims"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = vec![0.0; self.data.len()];
        let mut idx = vec![0usize; nd];
        let mut src = 0usize;
        for v in data.iter_mut() {
            *v = self.data[src];
            // odometer increment over the output index
            for d in (0..nd).rev() {
                idx[d] += 1;
                src += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                src -= src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `b` broadcasts over the leading axes of `a`.
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    RowSoftmax { a: Var },
    Conv1dTime { x: Var, w: Var },
    ChebConv { x: Var, theta: Var, ops: Arc<ChebOperators>, expanded: Vec<f64> },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    SumAxis { a: Var, axis: usize },
    SumAll { a: Var },
    L1Norm { a: Var },
    L2Norm { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    #[cfg(debug_assertions)]
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::RowSoftmax { .. } => "row_softmax",
            Op::Conv1dTime { .. } => "conv1d_time",
            Op::ChebConv { .. } => "cheb_conv",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll { .. } => "sum",
            Op::L1Norm { .. } => "l1_norm",
            Op::L2Norm { .. } => "l2_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation graph under construction. Single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
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

fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            let inputs_finite = match &op {
                Op::Leaf => false,
                _ => self.inputs(&op).iter().all(|v| self.nodes[v.0].value.is_finite()),
            };
            assert!(!inputs_finite, "{} produced non-finite output from finite inputs", op.name());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[cfg(debug_assertions)]
    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => {
                vec![a, b]
            }
            Op::Conv1dTime { x, w } => vec![x, w],
            Op::ChebConv { x, theta, .. } => vec![x, theta],
            Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Sigmoid { a }
            | Op::Relu { a }
            | Op::RowSoftmax { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::SumAxis { a, .. }
            | Op::SumAll { a }
            | Op::L1Norm { a }
            | Op::L2Norm { a } => vec![a],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Records an input value (parameter or data).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `op(a) op(b)` for 2-D operands, `op` transposing when requested.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let av = View::of(sa[0], sa[1], ta);
        let bv = View::of(sb[0], sb[1], tb);
        if av.cols != bv.rows {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let mut out = vec![0.0; av.rows * bv.cols];
        gemm(
            1.0,
            &self.value(a).data,
            av,
            &self.value(b).data,
            bv,
            0.0,
            &mut out,
            View::row_major(av.rows, bv.cols),
        );
        let value = Tensor {
            shape: vec![av.rows, bv.cols],
            data: out,
        };
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]` operands.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", &[sa, sb]));
        }
        let batch = sa[0];
        let av = View::of(sa[1], sa[2], ta);
        let bv = View::of(sb[1], sb[2], tb);
        if av.cols != bv.rows {
            return Err(shape_err("batch_matmul", &[sa, sb]));
        }
        let (asz, bsz, csz) = (sa[1] * sa[2], sb[1] * sb[2], av.rows * bv.cols);
        let mut out = vec![0.0; batch * csz];
        let (ad, bd) = (&self.value(a).data, &self.value(b).data);
        for i in 0..batch {
            gemm(
                1.0,
                ad,
                av.at(i * asz),
                bd,
                bv.at(i * bsz),
                0.0,
                &mut out,
                View::row_major(av.rows, bv.cols).at(i * csz),
            );
        }
        let value = Tensor {
            shape: vec![batch, av.rows, bv.cols],
            data: out,
        };
        Ok(self.push(value, Op::BatchMatMul { a, b, ta, tb }))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !is_suffix(&va.shape, &vb.shape) {
            return Err(shape_err(name, &[&va.shape, &vb.shape]));
        }
        let inner = vb.data.len().max(1);
        let data = va
            .data
            .chunks(inner)
            .flat_map(|chunk| chunk.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)))
            .collect();
        Ok(Tensor {
            shape: va.shape.clone(),
            data,
        })
    }

    /// Elementwise sum; `b`'s shape must be a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    /// Elementwise product; `b`'s shape must be a suffix of `a`'s.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid { a })
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a })
    }

    /// Softmax over the last axis with max-shift.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let width = *va.shape.last().ok_or_else(|| shape_err("row_softmax", &[&va.shape]))?;
        if width == 0 {
            return Err(shape_err("row_softmax", &[&va.shape]));
        }
        let mut data = va.data.clone();
        for row in data.chunks_mut(width) {
            softmax_in_place(row);
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::RowSoftmax { a }))
    }

    /// Temporal convolution with zero "same" padding.
    ///
    /// `x` is `[P, T, C_in]`, `w` is `[K_t, C_in, C_out]` with odd `K_t`;
    /// `y[p, t] = sum_o x[p, t + o - K_t/2] w[o]`, output `[P, T, C_out]`.
    pub fn conv1d_time(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || sw[0] % 2 == 0 {
            return Err(shape_err("conv1d_time", &[sx, sw]));
        }
        let (p, t, cin, kt, cout) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
        let half = kt / 2;
        let rows = p * t;
        let (xd, wd) = (&self.value(x).data, &self.value(w).data);
        let mut out = vec![0.0; rows * cout];
        let mut scratch = vec![0.0; rows * cout];
        for o in 0..kt {
            let shift = o as isize - half as isize;
            if shift.unsigned_abs() >= t {
                continue;
            }
            let wv = View::row_major(cin, cout).at(o * cin * cout);
            if shift == 0 {
                gemm(1.0, xd, View::row_major(rows, cin), wd, wv, 1.0, &mut out, View::row_major(rows, cout));
                continue;
            }
            gemm(1.0, xd, View::row_major(rows, cin), wd, wv, 0.0, &mut scratch, View::row_major(rows, cout));
            // out[p, s] += scratch[p, s + shift] when s + shift stays in the window
            for pi in 0..p {
                for s in 0..t {
                    let src = s as isize + shift;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let dst = (pi * t + s) * cout;
                    let from = (pi * t + src as usize) * cout;
                    for c in 0..cout {
                        out[dst + c] += scratch[from + c];
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![p, t, cout],
            data: out,
        };
        Ok(self.push(value, Op::Conv1dTime { x, w }))
    }

    /// Chebyshev graph convolution `y = sum_k T_k(L~) x theta_k`.
    ///
    /// `x` is `[N, M, C_in]` (nodes first; `M` folds batch and time), `theta`
    /// is `[K, C_in, C_out]`; output `[N, M, C_out]`.
    pub fn cheb_conv(
        &mut self,
        x: Var,
        theta: Var,
        ops: &Arc<ChebOperators>,
    ) -> Result<Var, TensorError> {
        let (sx, st) = (self.shape(x), self.shape(theta));
        let k = ops.order();
        if sx.len() != 3 || st.len() != 3 || st[0] != k || sx[2] != st[1] || sx[0] != ops.node_count() {
            return Err(shape_err("cheb_conv", &[sx, st, &[ops.node_count(), k]]));
        }
        let (n, m, cin, cout) = (sx[0], sx[1], sx[2], st[2]);
        let width = m * cin;
        let xd = &self.value(x).data;
        // expanded[i, j, k*cin + c] = (T_k x)[i, j, c]
        let mut expanded = vec![0.0; n * m * k * cin];
        let mut tkx = vec![0.0; n * width];
        for (kk, op) in ops.polys.iter().enumerate() {
            let src: &[f64] = if op.is_identity() {
                xd
            } else {
                tkx.iter_mut().for_each(|v| *v = 0.0);
                op.mul_add(xd, width, &mut tkx);
                &tkx
            };
            for row in 0..n * m {
                let dst = row * k * cin + kk * cin;
                expanded[dst..dst + cin].copy_from_slice(&src[row * cin..(row + 1) * cin]);
            }
        }
        let mut out = vec![0.0; n * m * cout];
        gemm(
            1.0,
            &expanded,
            View::row_major(n * m, k * cin),
            &self.value(theta).data,
            View::row_major(k * cin, cout),
            0.0,
            &mut out,
            View::row_major(n * m, cout),
        );
        let value = Tensor {
            shape: vec![n, m, cout],
            data: out,
        };
        Ok(self.push(
            value,
            Op::ChebConv {
                x,
                theta,
                ops: Arc::clone(ops),
                expanded,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).permute(axes)?;
        Ok(self.push(value, Op::Permute { a, axes: axes.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(shape_err("transpose", &[self.shape(a)]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    /// Sums out one axis.
    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let va = self.value(a);
        if axis >= va.shape.len() {
            return Err(shape_err("reduce_sum", &[&va.shape]));
        }
        let outer: usize = va.shape[..axis].iter().product();
        let len = va.shape[axis];
        let inner: usize = va.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &va.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = va.shape.clone();
        shape.remove(axis);
        Ok(self.push(Tensor { shape, data }, Op::SumAxis { a, axis }))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn norm_last(&self, a: Var, op: &'static str, f: impl Fn(&[f64]) -> f64) -> Result<Tensor, TensorError> {
        let va = self.value(a);
        let width = *va.shape.last().ok_or_else(|| shape_err(op, &[&va.shape]))?;
        let data = if width == 0 {
            vec![0.0; va.shape[..va.shape.len() - 1].iter().product()]
        } else {
            va.data.chunks(width).map(f).collect()
        };
        Ok(Tensor {
            shape: va.shape[..va.shape.len() - 1].to_vec(),
            data,
        })
    }

    /// 1-norm over the last axis.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.norm_last(a, "l1_norm", |r| r.iter().map(|v| v.abs()).sum())?;
        Ok(self.push(value, Op::L1Norm { a }))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.norm_last(a, "l2_norm", |r| r.iter().map(|v| v * v).sum::<f64>().sqrt())?;
        Ok(self.push(value, Op::L2Norm { a }))
    }

    /// Mean softmax cross-entropy of `[R, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(logits);
        if v.shape.len() != 2 || v.shape[0] != labels.len() || v.shape[0] == 0 {
            return Err(shape_err("cross_entropy", &[&v.shape, &[labels.len()]]));
        }
        let c = v.shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} outside {c} classes"),
            });
        }
        let mut probs = v.data.clone();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.vjp(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (val(a).shape.clone(), val(b).shape.clone());
                let av = View::of(sa[0], sa[1], ta);
                let bv = View::of(sb[0], sb[1], tb);
                let gv = View::row_major(av.rows, bv.cols);
                // d op(A) = G op(B)' written through op's view of dA
                let da = acc(grads, a, val(a).numel());
                gemm(1.0, g, gv, &val(b).data, bv.t(), 1.0, da, View::of(sa[0], sa[1], ta));
                let db = acc(grads, b, val(b).numel());
                gemm(1.0, &val(a).data, av.t(), g, gv, 1.0, db, View::of(sb[0], sb[1], tb));
            }
            &Op::BatchMatMul { a, b, ta, tb } => {
                let (sa, sb) = (val(a).shape.clone(), val(b).shape.clone());
                let av = View::of(sa[1], sa[2], ta);
                let bv = View::of(sb[1], sb[2], tb);
                let (asz, bsz, gsz) = (sa[1] * sa[2], sb[1] * sb[2], av.rows * bv.cols);
                let gv = View::row_major(av.rows, bv.cols);
                for i in 0..sa[0] {
                    let da = acc(grads, a, val(a).numel());
                    gemm(1.0, g, gv.at(i * gsz), &val(b).data, bv.t().at(i * bsz), 1.0, da,
                        View::of(sa[1], sa[2], ta).at(i * asz));
                    let db = acc(grads, b, val(b).numel());
                    gemm(1.0, &val(a).data, av.t().at(i * asz), g, gv.at(i * gsz), 1.0, db,
                        View::of(sb[1], sb[2], tb).at(i * bsz));
                }
            }
            &Op::Add { a, b } => {
                let da = acc(grads, a, g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                let nb = val(b).numel();
                let db = acc(grads, b, nb);
                for chunk in g.chunks(nb.max(1)) {
                    db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (&val(a).data, &val(b).data);
                let nb = vb.len().max(1);
                let da = acc(grads, a, va.len());
                for (j, (d, x)) in da.iter_mut().zip(g).enumerate() {
                    *d += x * vb[j % nb];
                }
                let db = acc(grads, b, vb.len());
                for (j, x) in g.iter().enumerate() {
                    db[j % nb] += x * va[j];
                }
            }
            &Op::Scale { a, c } => {
                let da = acc(grads, a, g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => {
                let da = acc(grads, a, g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            &Op::Sigmoid { a } => {
                let y = &node.value.data;
                let da = acc(grads, a, g.len());
                for ((d, x), s) in da.iter_mut().zip(g).zip(y) {
                    *d += x * s * (1.0 - s);
                }
            }
            &Op::Relu { a } => {
                let xa = &val(a).data;
                let da = acc(grads, a, g.len());
                for ((d, x), v) in da.iter_mut().zip(g).zip(xa) {
                    if *v > 0.0 {
                        *d += x;
                    }
                }
            }
            &Op::RowSoftmax { a } => {
                let y = &node.value.data;
                let width = *node.value.shape.last().unwrap();
                let da = acc(grads, a, g.len());
                for ((drow, grow), yrow) in da.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            &Op::Conv1dTime { x, w } => {
                let (sx, sw) = (val(x).shape.clone(), val(w).shape.clone());
                let (p, t, cin, kt, cout) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
                let half = kt / 2;
                let rows = p * t;
                let mut shifted = vec![0.0; rows * cout];
                for o in 0..kt {
                    let shift = o as isize - half as isize;
                    if shift.unsigned_abs() >= t {
                        continue;
                    }
                    // dZ_o[p, r] = G[p, r - shift] for in-window r
                    let gz: &[f64] = if shift == 0 {
                        g
                    } else {
                        shifted.iter_mut().for_each(|v| *v = 0.0);
                        for pi in 0..p {
                            for s in 0..t {
                                let src = s as isize + shift;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let from = (pi * t + s) * cout;
                                let dst = (pi * t + src as usize) * cout;
                                shifted[dst..dst + cout].copy_from_slice(&g[from..from + cout]);
                            }
                        }
                        &shifted
                    };
                    let wv = View::row_major(cin, cout).at(o * cin * cout);
                    let dx = acc(grads, x, rows * cin);
                    gemm(1.0, gz, View::row_major(rows, cout), &val(w).data, wv.t(), 1.0, dx,
                        View::row_major(rows, cin));
                    let dw = acc(grads, w, kt * cin * cout);
                    gemm(1.0, &val(x).data, View::transposed(rows, cin), gz, View::row_major(rows, cout),
                        1.0, dw, wv);
                }
            }
            Op::ChebConv { x, theta, ops, expanded } => {
                let (x, theta) = (*x, *theta);
                let sx = val(x).shape.clone();
                let st = val(theta).shape.clone();
                let (n, m, cin, k, cout) = (sx[0], sx[1], sx[2], st[0], st[2]);
                let rows = n * m;
                let dth = acc(grads, theta, k * cin * cout);
                gemm(1.0, expanded, View::transposed(rows, k * cin), g, View::row_major(rows, cout), 1.0,
                    dth, View::row_major(k * cin, cout));
                let mut dexp = vec![0.0; rows * k * cin];
                gemm(1.0, g, View::row_major(rows, cout), &val(theta).data,
                    View::transposed(k * cin, cout), 0.0, &mut dexp, View::row_major(rows, k * cin));
                let mut part = vec![0.0; rows * cin];
                let dx = acc(grads, x, rows * cin);
                for (kk, op) in ops.transposed.iter().enumerate() {
                    for row in 0..rows {
                        let src = row * k * cin + kk * cin;
                        part[row * cin..(row + 1) * cin].copy_from_slice(&dexp[src..src + cin]);
                    }
                    if op.is_identity() {
                        dx.iter_mut().zip(&part).for_each(|(d, v)| *d += v);
                    } else {
                        op.mul_add(&part, m * cin, dx);
                    }
                }
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let gt = Tensor {
                    shape: node.value.shape.clone(),
                    data: g.to_vec(),
                }
                .permute(&inverse)
                .expect("inverse permutation");
                let da = acc(grads, *a, gt.data.len());
                da.iter_mut().zip(&gt.data).for_each(|(d, x)| *d += x);
            }
            &Op::SumAxis { a, axis } => {
                let sa = &val(a).shape;
                let outer: usize = sa[..axis].iter().product();
                let len = sa[axis];
                let inner: usize = sa[axis + 1..].iter().product();
                let da = acc(grads, a, outer * len * inner);
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::SumAll { a } => {
                let da = acc(grads, a, val(a).numel());
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::L1Norm { a } => {
                let xa = &val(a).data;
                let width = *val(a).shape.last().unwrap();
                let da = acc(grads, a, xa.len());
                for (j, (d, x)) in da.iter_mut().zip(xa).enumerate() {
                    let s = if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 };
                    *d += g[j / width] * s;
                }
            }
            &Op::L2Norm { a } => {
                let xa = &val(a).data;
                let width = *val(a).shape.last().unwrap();
                let y = &node.value.data;
                let da = acc(grads, a, xa.len());
                for (j, (d, x)) in da.iter_mut().zip(xa).enumerate() {
                    let r = j / width;
                    if y[r] > 0.0 {
                        *d += g[r] * x / y[r];
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = val(*logits).shape[1];
                let scale = g[0] / labels.len() as f64;
                let da = acc(grads, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == label { 1.0 } else { 0.0 };
                        da[r * c + j] += scale * (probs[r * c + j] - target);
                    }
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementary_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(vec![0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let r = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
        let sm = tape.row_softmax(r).unwrap();
        assert_eq!(tape.value(sm).data(), &[0.5, 0.5]);
        let single = tape.leaf(t(&[1, 1], &[7.0]));
        let one = tape.row_softmax(single).unwrap();
        assert_eq!(tape.value(one).data(), &[1.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(t(&[3, 1, 1], &[0.0, 1.0, 0.0]));
        let y = tape.conv1d_time(x, w).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        // shift kernel: y[t] = x[t-1]
        let w2 = tape.leaf(t(&[3, 1, 1], &[1.0, 0.0, 0.0]));
        let y2 = tape.conv1d_time(x, w2).unwrap();
        assert_eq!(tape.value(y2).data(), &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn sum_and_norm_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));
        let y = tape.leaf(Tensor::from_vec(vec![3.0, 4.0]));
        let n = tape.l2_norm(y).unwrap();
        assert_eq!(tape.value(n).item(), 5.0);
        let g = tape.backward(n).unwrap();
        assert_eq!(g.wrt(y).data(), &[0.6, 0.8]);
        // x is unreachable from n
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] = x[i, j, k]
        assert_eq!(p.data()[6 + 3 + 2], x.data()[12 + 2 * 4 + 1]);
        assert_eq!(p.permute(&[1, 2, 0]).unwrap(), x);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[5.0]);
    }
}
