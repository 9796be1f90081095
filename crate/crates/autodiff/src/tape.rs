//! Wengert-style tape: ops are recorded in execution order during the forward
//! pass and replayed in reverse by [`Tape::backward`].
//!
//! Node indices are assigned monotonically, so every op's inputs precede it and
//! a single reverse sweep visits each recorded op exactly once.

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, b: Var, inner: usize },
    Scale(Var, f64),
    AddScalar(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, n: usize, cout: usize },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    /// `out[i] = x[src[i]]`; covers max pooling, upsampling, permutes and gathers.
    Select { x: Var, src: Vec<usize> },
    ReduceSum { x: Var, len: usize, inner: usize, scale: f64 },
    SumAll(Var, f64),
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Reshape(Var),
    SegmentSum { x: Var, seg: Vec<usize> },
    L2NormalizeRows { x: Var, row: usize, norms: Vec<f64>, eps: f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    numels: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if the loss does not reach `v`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.numels[v.0]])
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element of `v`; intended for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are validated on entry")
    }

    /// Copies `t` onto the tape; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_unchecked(t.shape().to_vec(), t.into_data(), false, Op::Leaf))
    }

    /// Differentiable input that is not backed by a stored tensor.
    pub fn variable(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_unchecked(t.shape().to_vec(), t.into_data(), true, Op::Leaf))
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(shape, value, requires_grad, op))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, rg, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        self.push("add", self.shape(a).to_vec(), out, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        self.push("sub", self.shape(a).to_vec(), out, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        self.push("mul", self.shape(a).to_vec(), out, rg, Op::Mul(a, b))
    }

    /// Adds `b[C]` along axis 1 of `x[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch { op: "add_bias", lhs: sx.to_vec(), rhs: sb.to_vec() });
        }
        let (c, inner) = (sx[1], numel(&sx[2..]));
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(&[x, b]);
        self.push("add_bias", sx.to_vec(), out, rg, Op::AddBias { x, b, inner })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push("scale", self.shape(x).to_vec(), out, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let rg = self.rg(&[x]);
        self.push("add_scalar", self.shape(x).to_vec(), out, rg, Op::AddScalar(x))
    }

    // ---- convolution and pooling ---------------------------------------

    /// Direct 2-D convolution, `x[N,Cin,H,W] * w[Cout,Cin,kh,kw] -> [N,Cout,oh,ow]`.
    /// `pad` zero-pads every border.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(AutodiffError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(AutodiffError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        let geom = ConvGeom { cin: sx[1], h: sx[2], w: sx[3], kh: sw[2], kw: sw[3], stride, pad };
        let (n, cout) = (sx[0], sw[0]);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (rows, ncol) = (geom.col_rows(), oh * ow);
        let mut cols = vec![0.0; rows * ncol];
        let mut out = vec![0.0; n * cout * ncol];
        let img_len = geom.cin * geom.h * geom.w;
        {
            let (xv, wv) = (self.value(x), self.value(w));
            for i in 0..n {
                kernels::im2col(&geom, &xv[i * img_len..(i + 1) * img_len], &mut cols);
                kernels::gemm_nn(cout, rows, ncol, wv, &cols, &mut out[i * cout * ncol..(i + 1) * cout * ncol]);
            }
        }
        let rg = self.rg(&[x, w]);
        self.push("conv2d", vec![n, cout, oh, ow], out, rg, Op::Conv2d { x, w, geom, n, cout })
    }

    /// Non-overlapping `k x k` max pooling over the last two axes; ties keep the first element.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(AutodiffError::InvalidArgument { op: "max_pool2d", msg: format!("cannot pool {s:?} by {k}") });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x);
        let mut src = Vec::with_capacity(nc * oh * ow);
        for p in 0..nc {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    src.push(best);
                }
            }
        }
        self.select("max_pool2d", x, vec![s[0], s[1], oh, ow], src)
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(AutodiffError::InvalidArgument { op: "upsample2x", msg: format!("expected 4-D input, got {s:?}") });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut src = Vec::with_capacity(nc * 4 * h * w);
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    src.push(p * h * w + (y / 2) * w + xx / 2);
                }
            }
        }
        self.select("upsample2x", x, vec![s[0], s[1], 2 * h, 2 * w], src)
    }

    fn select(&mut self, name: &'static str, x: Var, shape: Vec<usize>, src: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let out = src.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        self.push(name, shape, out, rg, Op::Select { x, src })
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(name, self.shape(x).to_vec(), out, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary("leaky_relu", x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p(), Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    /// Square root. The derivative at exactly zero is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    // ---- reductions -----------------------------------------------------

    fn reduce(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(AutodiffError::InvalidArgument { op: name, msg: format!("axis {axis} out of range for {s:?}") });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                kernels::axpy(1.0, src, &mut out[o * inner..(o + 1) * inner]);
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        self.push(name, shape, out, rg, Op::ReduceSum { x, len, inner, scale })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("mean_axis", x, axis, true)
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(AutodiffError::InvalidArgument { op: "max_axis", msg: format!("axis {axis} out of range for {s:?}") });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x);
        let mut src = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                src.push(best);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.select("max_axis", x, shape, src)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", vec![1], vec![total], rg, Op::SumAll(x, 1.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let total: f64 = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push("mean", vec![1], vec![total / n], rg, Op::SumAll(x, 1.0 / n))
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch { op: "softmax_cross_entropy", lhs: s, rhs: vec![labels.len()] });
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: format!("label {bad} out of range for {k} classes"),
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[i]];
        }
        let rg = self.rg(&[logits]);
        self.push(
            "softmax_cross_entropy",
            vec![1],
            vec![loss / n as f64],
            rg,
            Op::SoftmaxXent { logits, labels: labels.to_vec(), probs },
        )
    }

    // ---- shape and indexing ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("reshape", shape, out, rg, Op::Reshape(x))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(AutodiffError::InvalidArgument { op: "permute", msg: format!("{perm:?} is not a permutation of {s:?}") });
        }
        let mut in_strides = vec![1usize; s.len()];
        for i in (0..s.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * s[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let total = numel(&s);
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; s.len()];
        for _ in 0..total {
            src.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.select("permute", x, out_shape, src)
    }

    /// Gathers rows (first-axis slices) of `x` in the order given by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if idx.is_empty() {
            return Err(AutodiffError::InvalidArgument { op: "gather_rows", msg: "empty index list".into() });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(AutodiffError::InvalidArgument { op: "gather_rows", msg: format!("row {bad} out of range for {s:?}") });
        }
        let row = numel(&s[1..]);
        let src = idx.iter().flat_map(|&r| r * row..(r + 1) * row).collect();
        let mut shape = s;
        shape[0] = idx.len();
        self.select("gather_rows", x, shape, src)
    }

    /// `out[s] = sum of x[i] where seg[i] == s`, for a flat `x`.
    pub fn segment_sum(&mut self, x: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let n = self.value(x).len();
        if seg.len() != n {
            return Err(AutodiffError::ShapeMismatch { op: "segment_sum", lhs: self.shape(x).to_vec(), rhs: vec![seg.len()] });
        }
        if segments == 0 || seg.iter().any(|&s| s >= segments) {
            return Err(AutodiffError::InvalidArgument { op: "segment_sum", msg: format!("segment id out of range 0..{segments}") });
        }
        let mut out = vec![0.0; segments];
        for (&s, &v) in seg.iter().zip(self.value(x)) {
            out[s] += v;
        }
        let rg = self.rg(&[x]);
        self.push("segment_sum", vec![segments], out, rg, Op::SegmentSum { x, seg: seg.to_vec() })
    }

    /// Scales every slice along the last axis to unit L2 norm.
    /// Rows with norm below `eps` are divided by `eps` instead.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let row = *s.last().expect("tensors have at least one axis");
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.len() / row);
        let mut out = Vec::with_capacity(xv.len());
        for chunk in xv.chunks(row) {
            let nrm = kernels::dot(chunk, chunk).sqrt();
            let d = nrm.max(eps);
            out.extend(chunk.iter().map(|v| v / d));
            norms.push(nrm);
        }
        let rg = self.rg(&[x]);
        self.push("l2_normalize_rows", s, out, rg, Op::L2NormalizeRows { x, row, norms, eps })
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let nodes = self.nodes;
        let numels: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, numels });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, numels })
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn elementwise(nodes: &[Node], grads: &mut [Option<Vec<f64>>], x: Var, g: &[f64], f: impl Fn(usize) -> f64) {
    if let Some(dx) = acc(nodes, grads, x) {
        for (i, (d, gv)) in dx.iter_mut().zip(g).enumerate() {
            *d += gv * f(i);
        }
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if let Some(da) = acc(nodes, grads, *a) {
                kernels::gemm_nt(m, n, k, g, val(*b), da);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                kernels::gemm_tn(k, m, n, val(*a), g, db);
            }
        }
        Op::Add(a, b) => {
            elementwise(nodes, grads, *a, g, |_| 1.0);
            elementwise(nodes, grads, *b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            elementwise(nodes, grads, *a, g, |_| 1.0);
            elementwise(nodes, grads, *b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            elementwise(nodes, grads, *a, g, |i| bv[i]);
            elementwise(nodes, grads, *b, g, |i| av[i]);
        }
        Op::AddBias { x, b, inner } => {
            elementwise(nodes, grads, *x, g, |_| 1.0);
            let c = nodes[b.0].value.len();
            if let Some(db) = acc(nodes, grads, *b) {
                for (i, chunk) in g.chunks(*inner).enumerate() {
                    db[i % c] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::Scale(x, c) => elementwise(nodes, grads, *x, g, |_| *c),
        Op::AddScalar(x) => elementwise(nodes, grads, *x, g, |_| 1.0),
        Op::Conv2d { x, w, geom, n, cout } => {
            let (rows, ncol) = (geom.col_rows(), geom.out_h() * geom.out_w());
            let img_len = geom.cin * geom.h * geom.w;
            let xv = val(*x);
            let wv = val(*w);
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            let mut cols = vec![0.0; rows * ncol];
            let mut dw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
            let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
            for i in 0..*n {
                let gi = &g[i * cout * ncol..(i + 1) * cout * ncol];
                if need_w {
                    kernels::im2col(geom, &xv[i * img_len..(i + 1) * img_len], &mut cols);
                    kernels::gemm_nt(*cout, ncol, rows, gi, &cols, &mut dw);
                }
                if need_x {
                    cols.iter_mut().for_each(|v| *v = 0.0);
                    kernels::gemm_tn(rows, *cout, ncol, wv, gi, &mut cols);
                    kernels::col2im(geom, &cols, &mut dx[i * img_len..(i + 1) * img_len]);
                }
            }
            if let Some(d) = acc(nodes, grads, *w) {
                kernels::axpy(1.0, &dw, d);
            }
            if let Some(d) = acc(nodes, grads, *x) {
                kernels::axpy(1.0, &dx, d);
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            elementwise(nodes, grads, *x, g, |i| if xv[i] > 0.0 { 1.0 } else { 0.0 });
        }
        Op::LeakyRelu(x, slope) => {
            let xv = val(*x);
            elementwise(nodes, grads, *x, g, |i| if xv[i] > 0.0 { 1.0 } else { *slope });
        }
        Op::Tanh(x) => {
            let y = &node.value;
            elementwise(nodes, grads, *x, g, |i| 1.0 - y[i] * y[i]);
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            elementwise(nodes, grads, *x, g, |i| y[i] * (1.0 - y[i]));
        }
        Op::Softplus(x) => {
            let xv = &nodes[x.0].value;
            elementwise(nodes, grads, *x, g, |i| 1.0 / (1.0 + (-xv[i]).exp()));
        }
        Op::Exp(x) => {
            let y = &node.value;
            elementwise(nodes, grads, *x, g, |i| y[i]);
        }
        Op::Sqrt(x) => {
            let y = &node.value;
            elementwise(nodes, grads, *x, g, |i| if y[i] > 0.0 { 0.5 / y[i] } else { 0.0 });
        }
        Op::Abs(x) => {
            let xv = val(*x);
            elementwise(nodes, grads, *x, g, |i| {
                if xv[i] > 0.0 {
                    1.0
                } else if xv[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
        }
        Op::Square(x) => {
            let xv = val(*x);
            elementwise(nodes, grads, *x, g, |i| 2.0 * xv[i]);
        }
        Op::Select { x, src } => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for (&s, gv) in src.iter().zip(g) {
                    dx[s] += gv;
                }
            }
        }
        Op::ReduceSum { x, len, inner, scale } => {
            if let Some(dx) = acc(nodes, grads, *x) {
                let outer = dx.len() / (len * inner);
                for o in 0..outer {
                    let gslice = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        kernels::axpy(*scale, gslice, &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner]);
                    }
                }
            }
        }
        Op::SumAll(x, scale) => {
            let s = g[0] * scale;
            if let Some(dx) = acc(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::SoftmaxXent { logits, labels, probs } => {
            let n = labels.len();
            let k = probs.len() / n;
            let s = g[0] / n as f64;
            if let Some(dl) = acc(nodes, grads, *logits) {
                for i in 0..n {
                    for j in 0..k {
                        let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                        dl[i * k + j] += s * (probs[i * k + j] - onehot);
                    }
                }
            }
        }
        Op::Reshape(x) => elementwise(nodes, grads, *x, g, |_| 1.0),
        Op::SegmentSum { x, seg } => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for (d, &s) in dx.iter_mut().zip(seg) {
                    *d += g[s];
                }
            }
        }
        Op::L2NormalizeRows { x, row, norms, eps } => {
            let y = &node.value;
            if let Some(dx) = acc(nodes, grads, *x) {
                for (r, &nrm) in norms.iter().enumerate() {
                    let span = r * row..(r + 1) * row;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let dxr = &mut dx[span];
                    if nrm > *eps {
                        let yg = kernels::dot(yr, gr);
                        for j in 0..*row {
                            dxr[j] += (gr[j] - yr[j] * yg) / nrm;
                        }
                    } else {
                        for j in 0..*row {
                            dxr[j] += gr[j] / eps;
                        }
                    }
                }
            }
        }
    }
}
