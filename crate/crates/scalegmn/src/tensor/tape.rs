//! Operation tape and reverse-mode gradient accumulation.

use std::rc::Rc;

use super::{matmul_raw, ordered_sum, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

/// Primitive operations. Each records its parents by id; the reverse sweep
/// dispatches on this enum.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(VarId, VarId),
    /// `[n,d] + [d]`, the row-broadcast used for bias terms.
    AddRow(VarId, VarId),
    Sub(VarId, VarId),
    /// Hadamard product.
    Mul(VarId, VarId),
    /// Multiply by a compile-time constant.
    Scale(VarId, f64),
    /// Multiply by a scalar variable (gradient flows into both).
    MulScalar(VarId, VarId),
    /// `[m,k] @ [k,n]`.
    Matmul(VarId, VarId),
    /// `[m,k] @ [n,k]^T`.
    MatmulNT(VarId, VarId),
    Concat(Vec<VarId>, usize),
    SliceRows(VarId, usize, usize),
    SliceCols(VarId, usize, usize),
    GatherCols(VarId, Rc<Vec<usize>>),
    GatherRows(VarId, Rc<Vec<usize>>),
    /// Rows summed into `n` segments; accumulation order is fixed by value
    /// magnitude so the result does not depend on row order.
    SegmentSum(VarId, Rc<Vec<usize>>, usize),
    Reshape(VarId),
    Sum(VarId),
    Mean(VarId),
    /// Sum over axis 0 of a rank-2 tensor, magnitude-ordered accumulation.
    SumRows(VarId),
    Abs(VarId),
    Sign(VarId),
    /// `x / (x^2 + eps)`.
    RecipEps(VarId, f64),
    /// `x / max(|x|, eps)`: sign normalization with 0 fixed at 0.
    CanonPos(VarId, f64),
    Tanh(VarId),
    Relu(VarId),
    Silu(VarId),
    Log(VarId),
    /// Row-wise softmax of `[n, c]`.
    Softmax(VarId),
    /// Mean negative log-likelihood of `[n, c]` logits against class indices.
    CrossEntropy(VarId, Rc<Vec<usize>>),
    /// Sum of absolute values; subgradient at 0 is 0.
    L1Norm(VarId),
    Conv2d { x: VarId, k: VarId, stride: usize, pad: usize },
    /// `[b,c,h,w] + [c]` broadcast.
    ChannelBias(VarId, VarId),
    /// Global average pool `[b,c,h,w] -> [b,c]`.
    Gap(VarId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert tape: records primitives during the forward pass, replays them in
/// reverse for gradients. Not Sync; use one tape per thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: VarId) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    /// Record an input. `requires_grad` marks it as a differentiation leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<VarId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Record a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, requires_grad });
        VarId(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, parents: &[VarId], name: &'static str) -> Result<VarId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, a: VarId, b: VarId, name: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    // ---- arithmetic -----------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::Add(a, b), &[a, b], "add")
    }

    /// `[n,d] + [d]` row broadcast.
    pub fn add_row(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                detail: format!("{:?} + {:?}", sa, sb),
            });
        }
        let d = sa[1];
        let bv = self.value(bias).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % d])
            .collect();
        let t = Tensor { shape: sa, data };
        self.record(t, Op::AddRow(a, bias), &[a, bias], "add_row")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::Sub(a, b), &[a, b], "sub")
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::Scale(a, c), &[a], "scale")
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId> {
        self.scale(a, -1.0)
    }

    /// Multiply a tensor by a scalar variable.
    pub fn mul_scalar(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        if self.value(s).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_scalar",
                detail: format!("scalar operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.value(s).item();
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * sv).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::MulScalar(a, s), &[a, s], "mul_scalar")
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} @ {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor { shape: vec![m, n], data: out };
        self.record(t, Op::Matmul(a, b), &[a, b], "matmul")
    }

    /// `a @ b^T` without materializing a transposed variable.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{:?} @ {:?}^T", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let bt = self.value(b).transposed();
        let mut out = vec![0.0; m * n];
        matmul_raw(self.value(a).data(), bt.data(), m, k, n, &mut out);
        let t = Tensor { shape: vec![m, n], data: out };
        self.record(t, Op::MatmulNT(a, b), &[a, b], "matmul_nt")
    }

    // ---- structure ------------------------------------------------------

    /// Concatenate rank-2 tensors along `dim` (0 = rows, 1 = cols).
    pub fn concat(&mut self, parts: &[VarId], dim: usize) -> Result<VarId> {
        if parts.is_empty() || dim > 1 {
            return Err(TensorError::InvalidArg { op: "concat", detail: "empty parts or bad dim".into() });
        }
        for &p in parts {
            if self.shape(p).len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("rank {} part", self.shape(p).len()),
                });
            }
        }
        let fixed = 1 - dim;
        let base = self.shape(parts[0])[fixed];
        for &p in parts {
            if self.shape(p)[fixed] != base {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("axis {} extents differ", fixed),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[dim]).sum();
        let t = if dim == 0 {
            let mut data = Vec::with_capacity(total * base);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor { shape: vec![total, base], data }
        } else {
            let rows = base;
            let mut data = vec![0.0; rows * total];
            let mut off = 0;
            for &p in parts {
                let c = self.shape(p)[1];
                let src = self.value(p).data();
                for i in 0..rows {
                    data[i * total + off..i * total + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
                }
                off += c;
            }
            Tensor { shape: vec![rows, total], data }
        };
        self.record(t, Op::Concat(parts.to_vec(), dim), parts, "concat")
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(TensorError::InvalidArg {
                op: "slice_rows",
                detail: format!("{}..{} of {:?}", start, start + len, s),
            });
        }
        let c = s[1];
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor { shape: vec![len, c], data };
        self.record(t, Op::SliceRows(a, start, len), &[a], "slice_rows")
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::InvalidArg {
                op: "slice_cols",
                detail: format!("{}..{} of {:?}", start, start + len, s),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor { shape: vec![r, len], data };
        self.record(t, Op::SliceCols(a, start, len), &[a], "slice_cols")
    }

    /// Select columns by index (duplicates allowed).
    pub fn gather_cols(&mut self, a: VarId, idx: &[usize]) -> Result<VarId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || idx.iter().any(|&j| j >= s[1]) {
            return Err(TensorError::InvalidArg { op: "gather_cols", detail: format!("indices out of {:?}", s) });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            for &j in idx {
                data.push(src[i * c + j]);
            }
        }
        let t = Tensor { shape: vec![r, idx.len()], data };
        self.record(t, Op::GatherCols(a, Rc::new(idx.to_vec())), &[a], "gather_cols")
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: VarId, idx: Rc<Vec<usize>>) -> Result<VarId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) {
            return Err(TensorError::InvalidArg { op: "gather_rows", detail: format!("indices out of {:?}", s) });
        }
        let c = s[1];
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor { shape: vec![idx.len(), c], data };
        self.record(t, Op::GatherRows(a, idx), &[a], "gather_rows")
    }

    /// Sum row `i` of `a` into output row `segments[i]`. Accumulation per
    /// output cell is magnitude-ordered, so permuting input rows (with their
    /// segment ids) leaves the result bit-identical.
    pub fn segment_sum(&mut self, a: VarId, segments: Rc<Vec<usize>>, n_segments: usize) -> Result<VarId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || segments.len() != s[0] || segments.iter().any(|&g| g >= n_segments) {
            return Err(TensorError::InvalidArg {
                op: "segment_sum",
                detail: format!("{} rows, {} ids, {} segments", s[0], segments.len(), n_segments),
            });
        }
        let c = s[1];
        let src = self.value(a).data();
        let mut by_seg: Vec<Vec<usize>> = vec![Vec::new(); n_segments];
        for (row, &g) in segments.iter().enumerate() {
            by_seg[g].push(row);
        }
        let mut data = vec![0.0; n_segments * c];
        let mut lane = Vec::new();
        for (g, rows) in by_seg.iter().enumerate() {
            for j in 0..c {
                lane.clear();
                lane.extend(rows.iter().map(|&r| src[r * c + j]));
                data[g * c + j] = ordered_sum(&mut lane);
            }
        }
        let t = Tensor { shape: vec![n_segments, c], data };
        self.record(t, Op::SegmentSum(a, segments, n_segments), &[a], "segment_sum")
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{} values as {:?}", self.value(a).len(), shape),
            });
        }
        let t = Tensor { shape, data: self.value(a).data().to_vec() };
        self.record(t, Op::Reshape(a), &[a], "reshape")
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let v: f64 = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(v), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::InvalidArg { op: "mean", detail: "empty tensor".into() });
        }
        let v: f64 = self.value(a).data().iter().sum::<f64>() / n as f64;
        self.record(Tensor::scalar(v), Op::Mean(a), &[a], "mean")
    }

    /// Sum over axis 0: `[n,d] -> [d]`, magnitude-ordered accumulation.
    pub fn sum_rows(&mut self, a: VarId) -> Result<VarId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "sum_rows", detail: format!("rank {}", s.len()) });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; c];
        let mut lane = Vec::with_capacity(r);
        for j in 0..c {
            lane.clear();
            lane.extend((0..r).map(|i| src[i * c + j]));
            data[j] = ordered_sum(&mut lane);
        }
        let t = Tensor { shape: vec![c], data };
        self.record(t, Op::SumRows(a), &[a], "sum_rows")
    }

    // ---- elementwise ----------------------------------------------------

    pub fn abs(&mut self, a: VarId) -> Result<VarId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.abs()).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::Abs(a), &[a], "abs")
    }

    /// Elementwise sign with sign(0) = 0. Gradient is zero everywhere.
    pub fn sign(&mut self, a: VarId) -> Result<VarId> {
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
            .collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::Sign(a), &[a], "sign")
    }

    /// Stabilized reciprocal `x / (x^2 + eps)`; finite for every finite input
    /// when `eps > 0`, exactly odd in `x`.
    pub fn recip_eps(&mut self, a: VarId, eps: f64) -> Result<VarId> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArg { op: "recip_eps", detail: "eps must be positive".into() });
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x / (x * x + eps)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::RecipEps(a, eps), &[a], "recip_eps")
    }

    /// Scale normalization `x / max(|x|, eps)`: maps to `sign(x)` off the
    /// epsilon ball and exactly fixes 0.
    pub fn canon_pos(&mut self, a: VarId, eps: f64) -> Result<VarId> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArg { op: "canon_pos", detail: "eps must be positive".into() });
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x / x.abs().max(eps)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::CanonPos(a, eps), &[a], "canon_pos")
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::Tanh(a), &[a], "tanh")
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::Relu(a), &[a], "relu")
    }

    /// SiLU: `x * sigmoid(x)`.
    pub fn silu(&mut self, a: VarId) -> Result<VarId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * sigmoid(x)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::Silu(a), &[a], "silu")
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.ln()).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.record(t, Op::Log(a), &[a], "log")
    }

    /// Row-wise softmax of `[n, c]`.
    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "softmax", detail: format!("rank {}", s.len()) });
        }
        let (n, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[i * c + j] = e;
                z += e;
            }
            for v in &mut data[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        let t = Tensor { shape: s, data };
        self.record(t, Op::Softmax(a), &[a], "softmax")
    }

    /// Mean negative log-likelihood of logits `[n, c]` against labels.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {:?}, {} labels", s, labels.len()),
            });
        }
        let (n, c) = (s[0], s[1]);
        if c < 2 {
            return Err(TensorError::InvalidArg { op: "cross_entropy", detail: "need >= 2 classes".into() });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::InvalidArg {
                op: "cross_entropy",
                detail: format!("label {} out of range for {} classes", bad, c),
            });
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let t = Tensor::scalar(total / n as f64);
        self.record(t, Op::CrossEntropy(logits, Rc::new(labels.to_vec())), &[logits], "cross_entropy")
    }

    /// Sum of absolute values of all entries.
    pub fn l1_norm(&mut self, a: VarId) -> Result<VarId> {
        let v: f64 = self.value(a).data().iter().map(|x| x.abs()).sum();
        self.record(Tensor::scalar(v), Op::L1Norm(a), &[a], "l1_norm")
    }

    // ---- conv -----------------------------------------------------------

    /// 2-D cross-correlation of `x [b,ci,h,w]` with kernels `k [co,ci,kh,kw]`.
    pub fn conv2d(&mut self, x: VarId, k: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {:?}, k {:?}", sx, sk),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArg { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        let (b, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = conv_out(h, w, kh, kw, stride, pad).ok_or(TensorError::InvalidArg {
            op: "conv2d",
            detail: "non-positive output extent".into(),
        })?;
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let mut out = vec![0.0; b * co * oh * ow];
        for bi in 0..b {
            for o in 0..co {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (xo * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xv[((bi * ci + c) * h + iy as usize) * w + ix as usize]
                                        * kv[((o * ci + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * co + o) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        let t = Tensor { shape: vec![b, co, oh, ow], data: out };
        self.record(t, Op::Conv2d { x, k, stride, pad }, &[x, k], "conv2d")
    }

    /// Per-channel bias for `[b,c,h,w]`.
    pub fn channel_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_bias",
                detail: format!("x {:?}, bias {:?}", sx, sb),
            });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let bv = self.value(bias).data().to_vec();
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                for i in 0..h * w {
                    data[base + i] = xv[base + i] + bv[ch];
                }
            }
        }
        let t = Tensor { shape: sx, data };
        self.record(t, Op::ChannelBias(x, bias), &[x, bias], "channel_bias")
    }

    /// Global average pool over spatial dims.
    pub fn gap(&mut self, x: VarId) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(TensorError::ShapeMismatch { op: "gap", detail: format!("rank {}", sx.len()) });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = (h * w) as f64;
        let xv = self.value(x).data();
        let mut data = vec![0.0; b * c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                data[bi * c + ch] = xv[base..base + h * w].iter().sum::<f64>() / hw;
            }
        }
        let t = Tensor { shape: vec![b, c], data };
        self.record(t, Op::Gap(x), &[x], "gap")
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Accumulate gradients of a scalar `loss` into every `requires_grad`
    /// ancestor. Deterministic: identical tapes give bit-identical gradients.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::InvalidArg {
                op: "backward",
                detail: format!("loss has shape {:?}, expected scalar", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: self.shape(loss).to_vec(),
            data: vec![1.0],
        });
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], v: VarId, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(delta.data.iter()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                self.add_grad(grads, *a, g.clone());
                let d = self.value(*bias).len();
                let mut db = vec![0.0; d];
                for (i, gv) in g.data.iter().enumerate() {
                    db[i % d] += gv;
                }
                self.add_grad(grads, *bias, Tensor { shape: vec![d], data: db });
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                let neg: Vec<f64> = g.data.iter().map(|x| -x).collect();
                self.add_grad(grads, *b, Tensor { shape: g.shape.clone(), data: neg });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<f64> = g.data.iter().zip(bv).map(|(gv, x)| gv * x).collect();
                let db: Vec<f64> = g.data.iter().zip(av).map(|(gv, x)| gv * x).collect();
                self.add_grad(grads, *a, Tensor { shape: g.shape.clone(), data: da });
                self.add_grad(grads, *b, Tensor { shape: g.shape.clone(), data: db });
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.data.iter().map(|gv| gv * c).collect();
                self.add_grad(grads, *a, Tensor { shape: g.shape.clone(), data: da });
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                let da: Vec<f64> = g.data.iter().map(|gv| gv * sv).collect();
                self.add_grad(grads, *a, Tensor { shape: g.shape.clone(), data: da });
                let ds: f64 = g.data.iter().zip(self.value(*a).data()).map(|(gv, x)| gv * x).sum();
                self.add_grad(grads, *s, Tensor { shape: self.shape(*s).to_vec(), data: vec![ds] });
            }
            Op::Matmul(a, b) => {
                // y = a@b: da = g @ b^T, db = a^T @ g
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let bt = self.value(*b).transposed();
                let mut da = vec![0.0; m * k];
                matmul_raw(g.data(), bt.data(), m, n, k, &mut da);
                let at = self.value(*a).transposed();
                let mut db = vec![0.0; k * n];
                matmul_raw(at.data(), g.data(), k, m, n, &mut db);
                self.add_grad(grads, *a, Tensor { shape: vec![m, k], data: da });
                self.add_grad(grads, *b, Tensor { shape: vec![k, n], data: db });
            }
            Op::MatmulNT(a, b) => {
                // y = a@b^T: da = g @ b, db = g^T @ a
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let mut da = vec![0.0; m * k];
                matmul_raw(g.data(), self.value(*b).data(), m, n, k, &mut da);
                let gt = g.transposed();
                let mut db = vec![0.0; n * k];
                matmul_raw(gt.data(), self.value(*a).data(), n, m, k, &mut db);
                self.add_grad(grads, *a, Tensor { shape: vec![m, k], data: da });
                self.add_grad(grads, *b, Tensor { shape: vec![n, k], data: db });
            }
            Op::Concat(parts, dim) => {
                if *dim == 0 {
                    let mut row = 0;
                    for &p in parts {
                        let (r, c) = (self.shape(p)[0], self.shape(p)[1]);
                        let dp = g.data[row * c..(row + r) * c].to_vec();
                        self.add_grad(grads, p, Tensor { shape: vec![r, c], data: dp });
                        row += r;
                    }
                } else {
                    let rows = self.shape(parts[0])[0];
                    let total = g.shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let c = self.shape(p)[1];
                        let mut dp = vec![0.0; rows * c];
                        for i in 0..rows {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&g.data[i * total + off..i * total + off + c]);
                        }
                        self.add_grad(grads, p, Tensor { shape: vec![rows, c], data: dp });
                        off += c;
                    }
                }
            }
            Op::SliceRows(a, start, len) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; r * c];
                da[start * c..(start + len) * c].copy_from_slice(&g.data);
                self.add_grad(grads, *a, Tensor { shape: vec![r, c], data: da });
            }
            Op::SliceCols(a, start, len) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + len].copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                self.add_grad(grads, *a, Tensor { shape: vec![r, c], data: da });
            }
            Op::GatherCols(a, idx) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for (jj, &j) in idx.iter().enumerate() {
                        da[i * c + j] += g.data[i * idx.len() + jj];
                    }
                }
                self.add_grad(grads, *a, Tensor { shape: vec![r, c], data: da });
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; r * c];
                for (out_i, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g.data[out_i * c + j];
                    }
                }
                self.add_grad(grads, *a, Tensor { shape: vec![r, c], data: da });
            }
            Op::SegmentSum(a, segments, _) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; r * c];
                for (row, &seg) in segments.iter().enumerate() {
                    da[row * c..(row + 1) * c].copy_from_slice(&g.data[seg * c..(seg + 1) * c]);
                }
                self.add_grad(grads, *a, Tensor { shape: vec![r, c], data: da });
            }
            Op::Reshape(a) => {
                self.add_grad(grads, *a, Tensor { shape: self.shape(*a).to_vec(), data: g.data.clone() });
            }
            Op::Sum(a) => {
                let gv = g.data[0];
                let n = self.value(*a).len();
                self.add_grad(grads, *a, Tensor { shape: self.shape(*a).to_vec(), data: vec![gv; n] });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let gv = g.data[0] / n as f64;
                self.add_grad(grads, *a, Tensor { shape: self.shape(*a).to_vec(), data: vec![gv; n] });
            }
            Op::SumRows(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c..(i + 1) * c].copy_from_slice(&g.data);
                }
                self.add_grad(grads, *a, Tensor { shape: vec![r, c], data: da });
            }
            Op::Abs(a) => {
                let da: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&x, gv)| if x > 0.0 { *gv } else if x < 0.0 { -gv } else { 0.0 })
                    .collect();
                self.add_grad(grads, *a, Tensor { shape: g.shape.clone(), data: da });
            }
            Op::Sign(a) => {
                let n = self.value(*a).len();
                self.add_grad(grads, *a, Tensor { shape: self.shape(*a).to_vec(), data: vec![0.0; n] });
            }
            Op::CanonPos(a, eps) => {
                // flat (zero grad) outside the eps ball, linear 1/eps inside
                let da: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&x, gv)| if x.abs() >= *eps { 0.0 } else { gv / eps })
                    .collect();
                self.add_grad(grads, *a, Tensor { shape: g.shape.clone(), data: da });
            }
            Op::RecipEps(a, eps) => {
                let da: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&x, gv)| {
                        let d = x * x + eps;
                        gv * (eps - x * x) / (d * d)
                    })
                    .collect();
                self.add_grad(grads, *a, Tensor { shape: g.shape.clone(), data: da });
            }
            Op::Tanh(a) => {
                let yv = node.value.data();
                let da: Vec<f64> = yv.iter().zip(g.data.iter()).map(|(&y, gv)| gv * (1.0 - y * y)).collect();
                self.add_grad(grads, *a, Tensor { shape: g.shape.clone(), data: da });
            }
            Op::Relu(a) => {
                let da: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&x, gv)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_grad(grads, *a, Tensor { shape: g.shape.clone(), data: da });
            }
            Op::Silu(a) => {
                let da: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&x, gv)| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.add_grad(grads, *a, Tensor { shape: g.shape.clone(), data: da });
            }
            Op::Log(a) => {
                let da: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&x, gv)| gv / x)
                    .collect();
                self.add_grad(grads, *a, Tensor { shape: g.shape.clone(), data: da });
            }
            Op::Softmax(a) => {
                let (n, c) = (g.shape[0], g.shape[1]);
                let y = node.value.data();
                let mut da = vec![0.0; n * c];
                for i in 0..n {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(grads, *a, Tensor { shape: vec![n, c], data: da });
            }
            Op::CrossEntropy(logits, labels) => {
                let (n, c) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let src = self.value(*logits).data();
                let gv = g.data[0] / n as f64;
                let mut da = vec![0.0; n * c];
                for (i, &y) in labels.iter().enumerate() {
                    let row = &src[i * c..(i + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - m).exp() / z;
                        da[i * c + j] = gv * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.add_grad(grads, *logits, Tensor { shape: vec![n, c], data: da });
            }
            Op::L1Norm(a) => {
                let gv = g.data[0];
                let da: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .map(|&x| if x > 0.0 { gv } else if x < 0.0 { -gv } else { 0.0 })
                    .collect();
                self.add_grad(grads, *a, Tensor { shape: self.shape(*a).to_vec(), data: da });
            }
            Op::Conv2d { x, k, stride, pad } => {
                let sx = self.shape(*x).to_vec();
                let sk = self.shape(*k).to_vec();
                let (b, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sk[0], sk[2], sk[3]);
                let (oh, ow) = (g.shape[2], g.shape[3]);
                let xv = self.value(*x).data();
                let kv = self.value(*k).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                for bi in 0..b {
                    for o in 0..co {
                        for y in 0..oh {
                            for xo in 0..ow {
                                let gv = g.data[((bi * co + o) * oh + y) * ow + xo];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (y * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (xo * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = ((bi * ci + c) * h + iy as usize) * w + ix as usize;
                                            let kidx = ((o * ci + c) * kh + ky) * kw + kx;
                                            dx[xi] += gv * kv[kidx];
                                            dk[kidx] += gv * xv[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(grads, *x, Tensor { shape: sx, data: dx });
                self.add_grad(grads, *k, Tensor { shape: sk, data: dk });
            }
            Op::ChannelBias(x, bias) => {
                self.add_grad(grads, *x, g.clone());
                let sx = self.shape(*x);
                let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let mut db = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * h * w;
                        db[ch] += g.data[base..base + h * w].iter().sum::<f64>();
                    }
                }
                self.add_grad(grads, *bias, Tensor { shape: vec![c], data: db });
            }
            Op::Gap(x) => {
                let sx = self.shape(*x).to_vec();
                let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let hw = (h * w) as f64;
                let mut dx = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for ch in 0..c {
                        let gv = g.data[bi * c + ch] / hw;
                        let base = (bi * c + ch) * h * w;
                        for v in &mut dx[base..base + h * w] {
                            *v = gv;
                        }
                    }
                }
                self.add_grad(grads, *x, Tensor { shape: sx, data: dx });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output extents of a 2-D convolution, `None` when non-positive.
pub fn conv_out(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let oh = (h + 2 * pad).checked_sub(kh)? / stride + 1;
    let ow = (w + 2 * pad).checked_sub(kw)? / stride + 1;
    if oh == 0 || ow == 0 {
        None
    } else {
        Some((oh, ow))
    }
}
