use super::kernels::{self, NORM_EPS};
use super::{Float, Tensor};
use crate::error::{Error, Result};
use crate::losses::kernels as lk;
use crate::ssm::kernel as sk;

pub use crate::losses::kernels::RegressionKind;
pub use crate::ssm::kernel::{Discretization, ScanOptions};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Silu,
    Softplus,
    Sigmoid,
    Relu,
    Exp,
    Ln,
    Neg,
    Square,
}

/// Statistics used by [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub enum BatchNormMode<T> {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, bias: Var },
    MulBias { x: Var, gain: Var },
    Sum(Var),
    Mean(Var),
    Unary { x: Var, kind: Unary },
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<T> },
    BatchNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, var: Vec<T>, rstd: Vec<T>, batch: bool },
    Conv1d { x: Var, kernel: Var, len: usize, d: usize, k: usize, reverse: bool },
    Conv2d { x: Var, weight: Var, dims: [usize; 6], cols: Vec<T> },
    Scan { x: Var, delta: Var, b: Var, c: Var, a_log: Var, dims: sk::ScanDims, opts: ScanOptions, saved: sk::ScanSaved<T> },
    Reverse { x: Var, outer: usize, len: usize, inner: usize },
    Concat { a: Var, b: Var, outer: usize, a_inner: usize, b_inner: usize },
    Slice { x: Var, outer: usize, full: usize, start: usize, inner: usize },
    Reshape(Var),
    DecodeBoxes { offset: Var, size: Var, cells: Vec<usize>, s: usize },
    Focal { pred: Var, gt: Vec<T>, num_pos: usize },
    Giou { pred: Var, gt: Vec<T> },
    Iou { pred: Var, gt: Vec<T> },
    L1 { pred: Var, gt: Vec<T> },
    Regression { u: Var, omega: Vec<T>, kind: RegressionKind },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in creation order, which is a valid topological
/// order; [`Tape::backward`] walks them in exact reverse. A tape supports
/// one backward pass until [`Tape::reset`] is called.
#[derive(Debug)]
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor created outside any op. It has no provenance.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.node(v).op, Op::Leaf)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last backward pass, or `None` when `v` was not
    /// reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.node(v).shape.clone(), g.clone()).expect("grad shape"))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Clears gradients so that another backward pass is allowed.
    pub fn reset(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Batch mean and biased variance recorded by a batch-statistics
    /// [`Tape::batch_norm`] node, plus the number of rows they cover.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[T], &[T], usize)> {
        match &self.node(v).op {
            Op::BatchNorm { mean, var, batch: true, x, .. } => {
                let c = mean.len();
                Some((mean, var, self.node(*x).value.len() / c))
            }
            _ => None,
        }
    }

    // ---- operations -------------------------------------------------

    /// Matrix product. Leading axes of `a` are flattened into rows, so
    /// `a: [.., k]`, `b: [k, n]` gives `[.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: need rank>=2 x rank 2")));
        }
        let k = *sa.last().unwrap();
        if sb[0] != k {
            return Err(Error::shape("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let m = if k == 0 { numel(&sa[..sa.len() - 1]) } else { m };
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, mk, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale(a, s), rg)
    }

    fn suffix_check(&self, op: &'static str, x: Var, p: Var) -> Result<usize> {
        let (sx, sp) = (self.shape(x), self.shape(p));
        if sp.is_empty() || sp.len() > sx.len() || sx[sx.len() - sp.len()..] != *sp {
            return Err(Error::shape(op, format!("{sp:?} is not a trailing shape of {sx:?}")));
        }
        Ok(numel(sp))
    }

    /// `x + bias`, where `bias` has the shape of trailing axes of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let p = self.suffix_check("add_bias", x, bias)?;
        let b = self.value(bias);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v + b[i % p]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, Op::AddBias { x, bias }, rg))
    }

    /// `x * gain`, where `gain` has the shape of trailing axes of `x`.
    pub fn mul_bias(&mut self, x: Var, gain: Var) -> Result<Var> {
        let p = self.suffix_check("mul_bias", x, gain)?;
        let g = self.value(gain);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v * g[i % p]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain]);
        Ok(self.push(shape, out, Op::MulBias { x, gain }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len().max(1)).unwrap();
        let s = self.value(x).iter().copied().sum::<T>() / n;
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Mean(x), rg)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Silu => kernels::silu,
            Unary::Softplus => kernels::softplus,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Relu => |v: T| v.max(T::zero()),
            Unary::Exp => |v: T| v.exp(),
            Unary::Ln => |v: T| v.ln(),
            Unary::Neg => |v: T| -v,
            Unary::Square => |v: T| v * v,
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Unary { x, kind }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Normalizes the last axis to zero mean and unit variance
    /// (`eps = 1e-5`), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let e = *sx.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if e == 0 {
            return Err(Error::shape("layer_norm", "last axis has length 0"));
        }
        if self.shape(gain) != [e] || self.shape(bias) != [e] {
            return Err(Error::shape("layer_norm", format!("affine params must be [{e}]")));
        }
        let (out, rstd) = kernels::layer_norm_forward(self.value(x), self.value(gain), self.value(bias), e);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(sx, out, Op::LayerNorm { x, gain, bias, rstd }, rg))
    }

    /// Per-channel normalization of a channel-last tensor over all other
    /// axes, followed by a per-channel affine map.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var, mode: BatchNormMode<T>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::shape("batch_norm", "scalar input"))?;
        if c == 0 || self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape("batch_norm", format!("affine params must be [{c}]")));
        }
        let (mean, var, batch) = match mode {
            BatchNormMode::Batch => {
                let (m, v) = kernels::channel_stats(self.value(x), c);
                (m, v, true)
            }
            BatchNormMode::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (mean, var, false)
            }
        };
        let eps = T::lit(NORM_EPS);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gain), self.value(bias));
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % c;
                (v - mean[j]) * rstd[j] * g[j] + b[j]
            })
            .collect();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(sx, out, Op::BatchNorm { x, gain, bias, mean, var, rstd, batch }, rg))
    }

    /// Causal depthwise 1-D convolution over axis `-2` of a channel-last
    /// `[.., L, D]` tensor with kernel `[D, k]` (left zero padding of
    /// `k - 1`). With `reverse` the filter runs right-to-left, which equals
    /// flipping the sequence, convolving and flipping back.
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var, reverse: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() < 2 {
            return Err(Error::shape("conv1d_depthwise", format!("input {sx:?} needs [.., L, D]")));
        }
        let (len, d) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        if sk.len() != 2 || sk[0] != d {
            return Err(Error::shape("conv1d_depthwise", format!("kernel {sk:?} must be [{d}, k]")));
        }
        let k = sk[1];
        if k == 0 {
            return Err(Error::invalid("conv1d_depthwise", "kernel width must be at least 1"));
        }
        let out = kernels::conv1d_depthwise_forward(self.value(x), self.value(kernel), len, d, k, reverse);
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(sx, out, Op::Conv1d { x, kernel, len, d, k, reverse }, rg))
    }

    /// Same-padded 2-D convolution. `x: [B, H, W, Cin]`, `weight:
    /// [k*k*Cin, Cout]` with rows ordered `(ky, kx, cin)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, ksize: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {sx:?} must be [B, H, W, C]")));
        }
        if ksize.is_multiple_of(2) {
            return Err(Error::invalid("conv2d", "kernel size must be odd"));
        }
        let (bt, h, w, cin) = (sx[0], sx[1], sx[2], sx[3]);
        if sw.len() != 2 || sw[0] != ksize * ksize * cin {
            return Err(Error::shape("conv2d", format!("weight {sw:?} must be [{}, Cout]", ksize * ksize * cin)));
        }
        let cout = sw[1];
        let cols = kernels::im2col(self.value(x), bt, h, w, cin, ksize);
        let rows = bt * h * w;
        let mut out = vec![T::zero(); rows * cout];
        kernels::gemm(rows, sw[0], cout, &cols, false, self.value(weight), false, &mut out, false);
        let rg = self.rg(&[x, weight]);
        let dims = [bt, h, w, cin, cout, ksize];
        Ok(self.push(vec![bt, h, w, cout], out, Op::Conv2d { x, weight, dims, cols }, rg))
    }

    /// Selective scan over `x: [B, L, D]` with input-dependent `delta: [B,
    /// L, D]`, `b, c: [B, L, N]` and `A = -exp(a_log)`, `a_log: [D, N]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, b: Var, c: Var, a_log: Var, opts: ScanOptions) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::shape("selective_scan", format!("x {sx:?} must be [B, L, D]")));
        }
        let sa = self.shape(a_log).to_vec();
        if sa.len() != 2 || sa[0] != sx[2] {
            return Err(Error::shape("selective_scan", format!("a_log {sa:?} must be [{}, N]", sx[2])));
        }
        let dims = sk::ScanDims { batch: sx[0], len: sx[1], d: sx[2], n: sa[1] };
        if self.shape(delta) != sx.as_slice() {
            return Err(Error::shape("selective_scan", format!("delta {:?} must equal x {sx:?}", self.shape(delta))));
        }
        let sbn = [dims.batch, dims.len, dims.n];
        if self.shape(b) != sbn || self.shape(c) != sbn {
            return Err(Error::shape("selective_scan", format!("B and C must be {sbn:?}")));
        }
        let (y, saved) = sk::scan_forward(
            self.value(x),
            self.value(delta),
            self.value(b),
            self.value(c),
            self.value(a_log),
            dims,
            opts,
        )?;
        let rg = self.rg(&[x, delta, b, c, a_log]);
        Ok(self.push(sx, y, Op::Scan { x, delta, b, c, a_log, dims, opts, saved }, rg))
    }

    /// Reverses the order of elements along `axis`.
    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::shape("reverse", format!("axis {axis} out of range for {sx:?}")));
        }
        let (outer, len, inner) = axis_split(&sx, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..len {
                let src = (o * len + (len - 1 - i)) * inner;
                let dst = (o * len + i) * inner;
                out[dst..dst + inner].copy_from_slice(&xv[src..src + inner]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(sx, out, Op::Reverse { x, outer, len, inner }, rg))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (p, q))| i == axis || p == q);
        if !compatible {
            return Err(Error::shape("concat", format!("{sa:?} and {sb:?} along axis {axis}")));
        }
        let (outer, la, inner) = axis_split(&sa, axis);
        let lb = sb[axis];
        let (a_inner, b_inner) = (la * inner, lb * inner);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&bv[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa;
        shape[axis] = la + lb;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Concat { a, b, outer, a_inner, b_inner }, rg))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(Error::shape("slice", format!("{start}..{} on axis {axis} of {sx:?}", start + len)));
        }
        let (outer, full, inner) = axis_split(&sx, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Slice { x, outer, full, start, inner }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    /// Reads offset and size at one cell per batch item and assembles
    /// normalized `(cx, cy, w, h)` boxes: `cx = (j + off_x) / S`,
    /// `cy = (i + off_y) / S`. `offset, size: [B, S, S, 2]`, `cells[b] = i*S + j`.
    pub fn decode_boxes(&mut self, offset: Var, size: Var, cells: &[usize]) -> Result<Var> {
        let so = self.shape(offset).to_vec();
        if so.len() != 4 || so[1] != so[2] || so[3] != 2 || self.shape(size) != so.as_slice() {
            return Err(Error::shape("decode_boxes", format!("offset/size must be [B, S, S, 2], got {so:?}")));
        }
        let (bt, s) = (so[0], so[1]);
        if cells.len() != bt || cells.iter().any(|&c| c >= s * s) {
            return Err(Error::invalid("decode_boxes", "one in-range cell per batch item required"));
        }
        let (ov, sv) = (self.value(offset), self.value(size));
        let st = T::from_usize(s).unwrap();
        let mut out = Vec::with_capacity(bt * 4);
        for (b, &cell) in cells.iter().enumerate() {
            let (i, j) = (cell / s, cell % s);
            let base = (b * s * s + cell) * 2;
            out.push((T::from_usize(j).unwrap() + ov[base]) / st);
            out.push((T::from_usize(i).unwrap() + ov[base + 1]) / st);
            out.push(sv[base]);
            out.push(sv[base + 1]);
        }
        let rg = self.rg(&[offset, size]);
        Ok(self.push(vec![bt, 4], out, Op::DecodeBoxes { offset, size, cells: cells.to_vec(), s }, rg))
    }

    /// Weighted (penalty-reduced) focal loss against a Gaussian target map.
    pub fn focal_loss(&mut self, pred: Var, gt: &[T]) -> Result<Var> {
        if self.value(pred).len() != gt.len() {
            return Err(Error::shape("focal_loss", "prediction and target sizes differ"));
        }
        let (value, num_pos) = lk::focal_forward(self.value(pred), gt)?;
        let rg = self.rg(&[pred]);
        Ok(self.push(vec![], vec![value], Op::Focal { pred, gt: gt.to_vec(), num_pos }, rg))
    }

    fn box_check(&self, op: &'static str, pred: Var, gt: &[T]) -> Result<usize> {
        let sp = self.shape(pred);
        if sp.len() != 2 || sp[1] != 4 || gt.len() != sp[0] * 4 {
            return Err(Error::shape(op, format!("boxes must be [n, 4], got {sp:?} and {} targets", gt.len())));
        }
        Ok(sp[0])
    }

    /// Mean `1 - GIoU` over `[n, 4]` `(cx, cy, w, h)` boxes.
    pub fn giou_loss(&mut self, pred: Var, gt: &[T]) -> Result<Var> {
        let n = self.box_check("giou_loss", pred, gt)?;
        if n == 0 {
            return Err(Error::invalid("giou_loss", "empty batch"));
        }
        let pv = self.value(pred);
        let total: T = (0..n).map(|i| lk::giou_loss_grad(&pv[i * 4..i * 4 + 4], &gt[i * 4..i * 4 + 4]).0).sum();
        let rg = self.rg(&[pred]);
        let value = total / T::from_usize(n).unwrap();
        Ok(self.push(vec![], vec![value], Op::Giou { pred, gt: gt.to_vec() }, rg))
    }

    /// Per-box IoU, `[n, 4] -> [n]`.
    pub fn iou(&mut self, pred: Var, gt: &[T]) -> Result<Var> {
        let n = self.box_check("iou", pred, gt)?;
        let pv = self.value(pred);
        let out = (0..n).map(|i| lk::iou_grad(&pv[i * 4..i * 4 + 4], &gt[i * 4..i * 4 + 4]).0).collect();
        let rg = self.rg(&[pred]);
        Ok(self.push(vec![n], out, Op::Iou { pred, gt: gt.to_vec() }, rg))
    }

    /// Mean absolute difference over all coordinates.
    pub fn l1_loss(&mut self, pred: Var, gt: &[T]) -> Result<Var> {
        let n = self.box_check("l1_loss", pred, gt)?;
        if n == 0 {
            return Err(Error::invalid("l1_loss", "empty batch"));
        }
        let pv = self.value(pred);
        let total: T = pv.iter().zip(gt).map(|(&p, &g)| (p - g).abs()).sum();
        let value = total / T::from_usize(n * 4).unwrap();
        let rg = self.rg(&[pred]);
        Ok(self.push(vec![], vec![value], Op::L1 { pred, gt: gt.to_vec() }, rg))
    }

    /// Mean per-sample IoU-driven balance loss (ADB by default).
    pub fn regression_balance(&mut self, u: Var, omega: &[T], kind: RegressionKind) -> Result<Var> {
        let su = self.shape(u);
        if su.len() != 1 || su[0] != omega.len() {
            return Err(Error::shape("regression_balance", format!("U {su:?} vs {} weights", omega.len())));
        }
        if omega.is_empty() {
            return Err(Error::invalid("regression_balance", "empty batch"));
        }
        let uv = self.value(u);
        let total: T = uv.iter().zip(omega).map(|(&x, &w)| lk::regression_term(x, w, kind).0).sum();
        let value = total / T::from_usize(omega.len()).unwrap();
        let rg = self.rg(&[u]);
        Ok(self.push(vec![], vec![value], Op::Regression { u, omega: omega.to_vec(), kind }, rg))
    }

    // ---- backward ---------------------------------------------------

    /// Propagates d(loss)/d(node) to every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape("backward already ran on this tape; call reset() first".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Tape(format!("loss must be scalar, got shape {:?}", self.node(loss).shape)));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop_node(nodes, node, g, before)?;
        }
        Ok(())
    }
}

/// Gradient buffer of `v` if it takes gradients, zero-initialized on first use.
fn slot<'a, T: Float>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]).as_mut_slice())
}

fn backprop_node<T: Float>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::gemm(*m, *n, *k, g, false, val(*b), true, ga, true);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::gemm(*k, *m, *n, val(*a), true, g, false, gb, true);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + sign * d);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).zip(val(*b)).for_each(|((s, &d), &y)| *s = *s + d * y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).zip(val(*a)).for_each(|((s, &d), &x)| *s = *s + d * x);
            }
        }
        Op::Scale(a, k) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d * *k);
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                let p = gb.len();
                for row in g.chunks_exact(p) {
                    gb.iter_mut().zip(row).for_each(|(s, &d)| *s = *s + d);
                }
            }
        }
        Op::MulBias { x, gain } => {
            let (xv, gv) = (val(*x), val(*gain));
            let p = gv.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (row, gr) in gx.chunks_exact_mut(p).zip(g.chunks_exact(p)) {
                    row.iter_mut().zip(gr).zip(gv).for_each(|((s, &d), &w)| *s = *s + d * w);
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (gr, xr) in g.chunks_exact(p).zip(xv.chunks_exact(p)) {
                    gg.iter_mut().zip(gr).zip(xr).for_each(|((s, &d), &x)| *s = *s + d * x);
                }
            }
        }
        Op::Sum(x) | Op::Mean(x) => {
            let mut d = g[0];
            if matches!(node.op, Op::Mean(_)) {
                d = d / T::from_usize(val(*x).len().max(1)).unwrap();
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|s| *s = *s + d);
            }
        }
        Op::Unary { x, kind } => {
            let (xv, yv) = (val(*x), node.value.as_slice());
            if let Some(gx) = slot(nodes, grads, *x) {
                unary_backward(*kind, xv, yv, g, gx);
            }
        }
        Op::LayerNorm { x, gain, bias, rstd } => {
            let e = val(*gain).len();
            let (xv, gv) = (val(*x), val(*gain));
            // Three disjoint slots: take them one by one through raw buffers.
            let mut gx = take_slot(nodes, grads, *x);
            let mut gg = take_slot(nodes, grads, *gain);
            let mut gb = take_slot(nodes, grads, *bias);
            kernels::layer_norm_backward(xv, gv, rstd, g, e, gx.as_deref_mut(), gg.as_deref_mut(), gb.as_deref_mut());
            put_slot(grads, *x, gx);
            put_slot(grads, *gain, gg);
            put_slot(grads, *bias, gb);
        }
        Op::BatchNorm { x, gain, bias, mean, rstd, batch, .. } => {
            let (xv, gv) = (val(*x), val(*gain));
            let c = gv.len();
            let rows = xv.len() / c;
            let xhat = |i: usize| (xv[i] - mean[i % c]) * rstd[i % c];
            if let Some(gg) = slot(nodes, grads, *gain) {
                for i in 0..xv.len() {
                    gg[i % c] = gg[i % c] + g[i] * xhat(i);
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for i in 0..xv.len() {
                    gb[i % c] = gb[i % c] + g[i];
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                if *batch {
                    let inv = T::one() / T::from_usize(rows).unwrap();
                    let mut mean_d = vec![T::zero(); c];
                    let mut mean_dx = vec![T::zero(); c];
                    for i in 0..xv.len() {
                        let d = g[i] * gv[i % c];
                        mean_d[i % c] = mean_d[i % c] + d;
                        mean_dx[i % c] = mean_dx[i % c] + d * xhat(i);
                    }
                    for i in 0..xv.len() {
                        let j = i % c;
                        let d = g[i] * gv[j];
                        gx[i] = gx[i] + rstd[j] * (d - mean_d[j] * inv - xhat(i) * mean_dx[j] * inv);
                    }
                } else {
                    for i in 0..xv.len() {
                        let j = i % c;
                        gx[i] = gx[i] + g[i] * gv[j] * rstd[j];
                    }
                }
            }
        }
        Op::Conv1d { x, kernel, len, d, k, reverse } => {
            let mut gx = take_slot(nodes, grads, *x);
            let mut gk = take_slot(nodes, grads, *kernel);
            kernels::conv1d_depthwise_backward(
                val(*x),
                val(*kernel),
                g,
                *len,
                *d,
                *k,
                *reverse,
                gx.as_deref_mut(),
                gk.as_deref_mut(),
            );
            put_slot(grads, *x, gx);
            put_slot(grads, *kernel, gk);
        }
        Op::Conv2d { x, weight, dims, cols } => {
            let [bt, h, w, cin, cout, ksize] = *dims;
            let rows = bt * h * w;
            let kk = ksize * ksize * cin;
            if let Some(gw) = slot(nodes, grads, *weight) {
                kernels::gemm(kk, rows, cout, cols, true, g, false, gw, true);
            }
            if nodes[x.0].requires_grad {
                let mut gcols = vec![T::zero(); rows * kk];
                kernels::gemm(rows, cout, kk, g, false, val(*weight), true, &mut gcols, false);
                let gx = slot(nodes, grads, *x).expect("requires grad");
                kernels::col2im_add(&gcols, gx, bt, h, w, cin, ksize);
            }
        }
        Op::Scan { x, delta, b, c, a_log, dims, opts, saved } => {
            let mut out = sk::ScanGrads {
                x: take_slot(nodes, grads, *x),
                delta: take_slot(nodes, grads, *delta),
                b: take_slot(nodes, grads, *b),
                c: take_slot(nodes, grads, *c),
                a_log: take_slot(nodes, grads, *a_log),
            };
            sk::scan_backward(val(*x), val(*delta), val(*b), val(*c), val(*a_log), *dims, *opts, saved, g, &mut out);
            put_slot(grads, *x, out.x);
            put_slot(grads, *delta, out.delta);
            put_slot(grads, *b, out.b);
            put_slot(grads, *c, out.c);
            put_slot(grads, *a_log, out.a_log);
        }
        Op::Reverse { x, outer, len, inner } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..*outer {
                    for i in 0..*len {
                        let src = (o * len + (len - 1 - i)) * inner;
                        let dst = (o * len + i) * inner;
                        for r in 0..*inner {
                            gx[src + r] = gx[src + r] + g[dst + r];
                        }
                    }
                }
            }
        }
        Op::Concat { a, b, outer, a_inner, b_inner } => {
            let stride = a_inner + b_inner;
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..*outer {
                    for r in 0..*a_inner {
                        ga[o * a_inner + r] = ga[o * a_inner + r] + g[o * stride + r];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for o in 0..*outer {
                    for r in 0..*b_inner {
                        gb[o * b_inner + r] = gb[o * b_inner + r] + g[o * stride + a_inner + r];
                    }
                }
            }
        }
        Op::Slice { x, outer, full, start, inner } => {
            let len = node.shape_axis_len(*outer, *inner);
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..*outer {
                    let src = o * len * inner;
                    let dst = (o * full + start) * inner;
                    for r in 0..len * inner {
                        gx[dst + r] = gx[dst + r] + g[src + r];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
            }
        }
        Op::DecodeBoxes { offset, size, cells, s } => {
            let st = T::from_usize(*s).unwrap();
            if let Some(go) = slot(nodes, grads, *offset) {
                for (b, &cell) in cells.iter().enumerate() {
                    let base = (b * s * s + cell) * 2;
                    go[base] = go[base] + g[b * 4] / st;
                    go[base + 1] = go[base + 1] + g[b * 4 + 1] / st;
                }
            }
            if let Some(gs) = slot(nodes, grads, *size) {
                for (b, &cell) in cells.iter().enumerate() {
                    let base = (b * s * s + cell) * 2;
                    gs[base] = gs[base] + g[b * 4 + 2];
                    gs[base + 1] = gs[base + 1] + g[b * 4 + 3];
                }
            }
        }
        Op::Focal { pred, gt, num_pos } => {
            if let Some(gp) = slot(nodes, grads, *pred) {
                lk::focal_backward(val(*pred), gt, *num_pos, g[0], gp);
            }
        }
        Op::Giou { pred, gt } => {
            let n = gt.len() / 4;
            let pv = val(*pred);
            if let Some(gp) = slot(nodes, grads, *pred) {
                let w = g[0] / T::from_usize(n).unwrap();
                for i in 0..n {
                    let (_, d) = lk::giou_loss_grad(&pv[i * 4..i * 4 + 4], &gt[i * 4..i * 4 + 4]);
                    for j in 0..4 {
                        gp[i * 4 + j] = gp[i * 4 + j] + w * d[j];
                    }
                }
            }
        }
        Op::Iou { pred, gt } => {
            let n = gt.len() / 4;
            let pv = val(*pred);
            if let Some(gp) = slot(nodes, grads, *pred) {
                for i in 0..n {
                    let (_, d) = lk::iou_grad(&pv[i * 4..i * 4 + 4], &gt[i * 4..i * 4 + 4]);
                    for j in 0..4 {
                        gp[i * 4 + j] = gp[i * 4 + j] + g[i] * d[j];
                    }
                }
            }
        }
        Op::L1 { pred, gt } => {
            let pv = val(*pred);
            if let Some(gp) = slot(nodes, grads, *pred) {
                let w = g[0] / T::from_usize(gt.len()).unwrap();
                for i in 0..gt.len() {
                    let diff = pv[i] - gt[i];
                    let s = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    gp[i] = gp[i] + w * s;
                }
            }
        }
        Op::Regression { u, omega, kind } => {
            let uv = val(*u);
            if let Some(gu) = slot(nodes, grads, *u) {
                let w = g[0] / T::from_usize(omega.len()).unwrap();
                for i in 0..omega.len() {
                    gu[i] = gu[i] + w * lk::regression_term(uv[i], omega[i], *kind).1;
                }
            }
        }
    }
    Ok(())
}

fn unary_backward<T: Float>(kind: Unary, xv: &[T], yv: &[T], g: &[T], gx: &mut [T]) {
    let n = gx.len();
    let (xv, yv, g) = (&xv[..n], &yv[..n], &g[..n]);
    #[inline(always)]
    fn apply<T: Float>(gx: &mut [T], g: &[T], f: impl Fn(usize) -> T) {
        for i in 0..gx.len() {
            gx[i] = gx[i] + g[i] * f(i);
        }
    }
    match kind {
        Unary::Silu => apply(gx, g, |i| kernels::silu_grad(xv[i])),
        Unary::Softplus => apply(gx, g, |i| kernels::sigmoid(xv[i])),
        Unary::Sigmoid => apply(gx, g, |i| yv[i] * (T::one() - yv[i])),
        Unary::Relu => apply(gx, g, |i| if xv[i] > T::zero() { T::one() } else { T::zero() }),
        Unary::Exp => apply(gx, g, |i| yv[i]),
        Unary::Ln => apply(gx, g, |i| T::one() / xv[i]),
        Unary::Neg => apply(gx, g, |_| -T::one()),
        Unary::Square => apply(gx, g, |i| T::lit(2.0) * xv[i]),
    }
}

/// Moves a gradient buffer out so several inputs can be written at once.
fn take_slot<T: Float>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]))
}

fn put_slot<T: Float>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        match &mut grads[v.0] {
            // Same input used twice by one op: the second take saw None.
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(s, &d)| *s = *s + d),
            slot => *slot = Some(g),
        }
    }
}

impl<T> Node<T> {
    fn shape_axis_len(&self, outer: usize, inner: usize) -> usize {
        self.value.len() / (outer * inner).max(1)
    }
}
