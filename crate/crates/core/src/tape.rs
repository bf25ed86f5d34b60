//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every op appends one node holding its output and whatever it needs for the
//! backward pass. [`Tape::backward`] walks the nodes in exact reverse order and
//! accumulates gradients additively.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Relu,
    Exp,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    Depthwise { x: Var, w: Var, b: Var },
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    GlobalAvgPool { x: Var },
    FullyConnected { x: Var, w: Var, b: Var },
    Unary { x: Var, kind: Unary },
    SoftmaxChannels { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Sum { a: Var },
    Mean { a: Var },
    ChannelGram { a: Var, b: Var },
    ChannelMix { m: Var, x: Var, transpose: bool },
    Reshape { a: Var },
    BatchMean { a: Var },
    AvgPool2 { x: Var },
    Upsample { x: Var, factor: usize },
    /// Scalar output with precomputed local gradients per input.
    ScalarFn { inputs: Vec<(Var, Vec<T>)> },
    /// Escape hatch for ops defined outside this module.
    Custom { inputs: Vec<Var>, backward: Box<CustomBackward<T>> },
}

/// Maps the output gradient to one gradient per input of a custom op.
pub type CustomBackward<T> = dyn Fn(&[T]) -> Vec<Vec<T>>;

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation. Single-threaded; build one per step.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node that needed them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) to `target`'s accumulator.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = self.get(v) {
            target.accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Offset ranges for a 3×3 tap with displacement `d` over an extent `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n.saturating_sub(d as usize) } else { n };
    (lo, hi.max(lo))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    // ---- convolution -----------------------------------------------------

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, ci, h, wd] = self.value(x).shape().nchw()?;
        let wdims = self.value(w).dims();
        if wdims.len() != 4 || wdims[2] != 3 || wdims[3] != 3 {
            return Err(shape_err!("conv2d weight must be O×I×3×3, got {:?}", wdims));
        }
        let (co, wi) = (wdims[0], wdims[1]);
        if wi != ci {
            return Err(shape_err!("conv2d: input has {ci} channels, weight expects {wi}"));
        }
        if self.value(b).dims() != [co] {
            return Err(shape_err!("conv2d bias must have {co} entries"));
        }
        let hw = h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); n * co * hw];
        for bn in 0..n {
            for o in 0..co {
                let plane = &mut out[(bn * co + o) * hw..(bn * co + o + 1) * hw];
                plane.iter_mut().for_each(|v| *v = bv[o]);
                for i in 0..ci {
                    let src = &xv[(bn * ci + i) * hw..(bn * ci + i + 1) * hw];
                    let k = &wv[(o * ci + i) * 9..(o * ci + i + 1) * 9];
                    conv_plane_acc(plane, src, k, h, wd);
                }
            }
        }
        let shape = Shape::new(&[n, co, h, wd])?;
        self.push("conv2d", Tensor::from_parts(shape, out), Op::Conv2d { x, w, b }, &[x, w, b])
    }

    /// Per-channel 3×3 convolution; weight is `C×1×3×3`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).shape().nchw()?;
        if self.value(w).dims() != [c, 1, 3, 3] {
            return Err(shape_err!(
                "depthwise weight must be {c}×1×3×3, got {:?}",
                self.value(w).dims()
            ));
        }
        if self.value(b).dims() != [c] {
            return Err(shape_err!("depthwise bias must have {c} entries"));
        }
        let hw = h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); n * c * hw];
        for bn in 0..n {
            for ch in 0..c {
                let off = (bn * c + ch) * hw;
                let plane = &mut out[off..off + hw];
                plane.iter_mut().for_each(|v| *v = bv[ch]);
                conv_plane_acc(plane, &xv[off..off + hw], &wv[ch * 9..ch * 9 + 9], h, wd);
            }
        }
        let shape = Shape::new(&[n, c, h, wd])?;
        self.push("depthwise_conv2d", Tensor::from_parts(shape, out), Op::Depthwise { x, w, b }, &[x, w, b])
    }

    // ---- dense -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [r, k] = self.value(a).shape().matrix()?;
        let [k2, s] = self.value(b).shape().matrix()?;
        if k != k2 {
            return Err(shape_err!("matmul: {r}×{k} times {k2}×{s}"));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), r, k, s);
        let shape = Shape::new(&[r, s])?;
        self.push("matmul", Tensor::from_parts(shape, out), Op::Matmul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.value(a).shape().matrix()?;
        let out = transpose_raw(self.value(a).data(), r, c);
        let shape = Shape::new(&[c, r])?;
        self.push("transpose", Tensor::from_parts(shape, out), Op::Transpose { a }, &[a])
    }

    /// `x·w + b` for `x: N×D`, `w: D×E`, `b: E`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, d] = self.value(x).shape().matrix()?;
        let [d2, e] = self.value(w).shape().matrix()?;
        if d != d2 {
            return Err(shape_err!("fully_connected: input width {d}, weight expects {d2}"));
        }
        if self.value(b).dims() != [e] {
            return Err(shape_err!("fully_connected bias must have {e} entries"));
        }
        let mut out = matmul_raw(self.value(x).data(), self.value(w).data(), n, d, e);
        let bv = self.value(b).data();
        for row in out.chunks_mut(e) {
            add_into(row, bv);
        }
        let shape = Shape::new(&[n, e])?;
        self.push("fully_connected", Tensor::from_parts(shape, out), Op::FullyConnected { x, w, b }, &[x, w, b])
    }

    // ---- pooling / resampling ------------------------------------------------

    /// Mean over the spatial dims: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape().nchw()?;
        if h == 0 || w == 0 {
            return Err(shape_err!("global_avg_pool over empty spatial dims"));
        }
        let inv = T::one() / T::from_usize(h * w);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let shape = Shape::new(&[n, c])?;
        self.push("global_avg_pool", Tensor::from_parts(shape, out), Op::GlobalAvgPool { x }, &[x])
    }

    /// 2×2 average pooling with stride 2; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape().nchw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs even spatial dims, got {h}×{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * wo + xx] = s * quarter;
                }
            }
        }
        let shape = Shape::new(&[n, c, ho, wo])?;
        self.push("avg_pool2", Tensor::from_parts(shape, out), Op::AvgPool2 { x }, &[x])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape().nchw()?;
        if factor == 0 {
            return Err(shape_err!("upsample factor must be positive"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                let row = &src[(y / factor) * w..(y / factor + 1) * w];
                for (xx, d) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                    *d = row[xx / factor];
                }
            }
        }
        let shape = Shape::new(&[n, c, ho, wo])?;
        self.push("upsample", Tensor::from_parts(shape, out), Op::Upsample { x, factor }, &[x])
    }

    // ---- elementwise ---------------------------------------------------------

    fn unary(&mut self, x: Var, kind: Unary, name: &'static str) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<T> = t
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Sigmoid => sigmoid(v),
                Unary::Relu => v.max(T::zero()),
                Unary::Exp => v.exp(),
            })
            .collect();
        let shape = t.shape();
        self.push(name, Tensor::from_parts(shape, out), Op::Unary { x, kind }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid, "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu, "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp, "exp")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<Shape> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err!("{op}: {:?} vs {:?}", sa, sb));
        }
        Ok(sa)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        self.same_shape(a, b, name)?;
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape();
        self.push("add", Tensor::from_parts(shape, out), Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.value(a).shape();
        self.push("sub", Tensor::from_parts(shape, out), Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape();
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale { a, c }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::from_parts(Shape::scalar(), vec![s]), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel());
        self.push("mean", Tensor::from_parts(Shape::scalar(), vec![s]), Op::Mean { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(dims)?;
        self.push("reshape", t, Op::Reshape { a }, &[a])
    }

    /// Mean over the leading dimension: `N×rest → rest`.
    pub fn batch_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let dims = t.dims();
        if dims.is_empty() || dims[0] == 0 {
            return Err(shape_err!("batch_mean needs a non-empty leading dim"));
        }
        let n = dims[0];
        let shape = Shape::new(&dims[1..])?;
        let m = shape.numel();
        let mut out = vec![T::zero(); m];
        for chunk in t.data().chunks(m) {
            add_into(&mut out, chunk);
        }
        let inv = T::one() / T::from_usize(n);
        out.iter_mut().for_each(|v| *v *= inv);
        self.push("batch_mean", Tensor::from_parts(shape, out), Op::BatchMean { a }, &[a])
    }

    /// Softmax over the channel dim of an `N×C×H×W` map.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape().nchw()?;
        let out = softmax_channels_raw(t.data(), n, c, h * w);
        let shape = t.shape();
        self.push("softmax_channels", Tensor::from_parts(shape, out), Op::SoftmaxChannels { x }, &[x])
    }

    // ---- cross-task ops ------------------------------------------------------

    /// Pairwise map products: for `a: N×Ca×H×W`, `b: N×Cb×H×W` returns
    /// `(N·Ca)×Cb×H×H` with entry `[(n,i), j, p, q] = Σ_w a[n,i,p,w]·b[n,j,q,w]`,
    /// i.e. channel `i` of `a` times the transpose of channel `j` of `b`.
    pub fn channel_gram(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).shape().nchw()?;
        let [nb, cb, hb, wb] = self.value(b).shape().nchw()?;
        if n != nb || h != hb || w != wb {
            return Err(shape_err!(
                "channel_gram: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let hw = h * w;
        let hh = h * h;
        let mut out = vec![T::zero(); n * ca * cb * hh];
        for bn in 0..n {
            for i in 0..ca {
                let amap = &av[(bn * ca + i) * hw..(bn * ca + i + 1) * hw];
                for j in 0..cb {
                    let bmap = &bv[(bn * cb + j) * hw..(bn * cb + j + 1) * hw];
                    let dst = &mut out[((bn * ca + i) * cb + j) * hh..((bn * ca + i) * cb + j + 1) * hh];
                    for p in 0..h {
                        let arow = &amap[p * w..(p + 1) * w];
                        for q in 0..h {
                            let brow = &bmap[q * w..(q + 1) * w];
                            dst[p * h + q] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                }
            }
        }
        let shape = Shape::new(&[n * ca, cb, h, h])?;
        self.push("channel_gram", Tensor::from_parts(shape, out), Op::ChannelGram { a, b }, &[a, b])
    }

    /// Channel-space linear map: `out[n,i] = Σ_j m[i,j]·x[n,j]`, or with
    /// `transpose` set, `out[n,j] = Σ_i m[i,j]·x[n,i]`.
    pub fn channel_mix(&mut self, m: Var, x: Var, transpose: bool) -> Result<Var> {
        let [c1, c2] = self.value(m).shape().matrix()?;
        let [n, c, h, w] = self.value(x).shape().nchw()?;
        if c1 != c || c2 != c {
            return Err(shape_err!("channel_mix: {c1}×{c2} matrix for {c} channels"));
        }
        let mv = self.value(m).data();
        let xv = self.value(x).data();
        let hw = h * w;
        let mut out = vec![T::zero(); n * c * hw];
        for bn in 0..n {
            for i in 0..c {
                let dst = &mut out[(bn * c + i) * hw..(bn * c + i + 1) * hw];
                for j in 0..c {
                    let coef = if transpose { mv[j * c + i] } else { mv[i * c + j] };
                    let src = &xv[(bn * c + j) * hw..(bn * c + j + 1) * hw];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += coef * s;
                    }
                }
            }
        }
        let shape = self.value(x).shape();
        self.push("channel_mix", Tensor::from_parts(shape, out), Op::ChannelMix { m, x, transpose }, &[m, x])
    }

    // ---- losses --------------------------------------------------------------

    /// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
    ///
    /// `labels` is `N×H×W` flattened. Returns 0 when every pixel is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore_index: u8) -> Result<Var> {
        let t = self.value(logits);
        let [n, c, h, w] = t.shape().nchw()?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(shape_err!("cross_entropy: {} labels for {n}×{h}×{w} logits", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore_index && l as usize >= c) {
            return Err(Error::Input(alloc::format!("label {bad} outside [0,{c}) and not ignore")));
        }
        let probs = softmax_channels_raw(t.data(), n, c, hw);
        let count = labels.iter().filter(|&&l| l != ignore_index).count();
        let mut grad = vec![T::zero(); probs.len()];
        let mut loss = T::zero();
        if count > 0 {
            let inv = T::one() / T::from_usize(count);
            let data = t.data();
            for bn in 0..n {
                for p in 0..hw {
                    let l = labels[bn * hw + p];
                    if l == ignore_index {
                        continue;
                    }
                    // log-softmax via the max-shifted log-sum-exp
                    let mut mx = T::neg_infinity();
                    for ch in 0..c {
                        mx = mx.max(data[(bn * c + ch) * hw + p]);
                    }
                    let lse = (0..c)
                        .map(|ch| (data[(bn * c + ch) * hw + p] - mx).exp())
                        .sum::<T>()
                        .ln()
                        + mx;
                    loss += (lse - data[(bn * c + l as usize) * hw + p]) * inv;
                    for ch in 0..c {
                        let idx = (bn * c + ch) * hw + p;
                        let onehot = if ch == l as usize { T::one() } else { T::zero() };
                        grad[idx] = (probs[idx] - onehot) * inv;
                    }
                }
            }
        }
        self.scalar_fn("cross_entropy", loss, vec![(logits, grad)])
    }

    /// Mean absolute difference of logarithms, `mean |ln pred − ln target|`.
    pub fn log_l1(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let t = self.value(pred);
        if t.numel() != target.len() || t.numel() == 0 {
            return Err(shape_err!("log_l1: {} predictions, {} targets", t.numel(), target.len()));
        }
        if t.data().iter().chain(target).any(|&v| v <= T::zero()) {
            return Err(Error::Input("log_l1 needs positive values".into()));
        }
        let inv = T::one() / T::from_usize(target.len());
        let mut loss = T::zero();
        let mut grad = vec![T::zero(); target.len()];
        for ((g, &p), &q) in grad.iter_mut().zip(t.data()).zip(target) {
            let d = p.ln() - q.ln();
            loss += d.abs() * inv;
            let sign = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            *g = sign * inv / p;
        }
        self.scalar_fn("log_l1", loss, vec![(pred, grad)])
    }

    /// Records a scalar whose local gradient with respect to each input has
    /// already been computed.
    pub fn scalar_fn(&mut self, name: &'static str, value: T, inputs: Vec<(Var, Vec<T>)>) -> Result<Var> {
        for (v, g) in &inputs {
            if g.len() != self.value(*v).numel() {
                return Err(shape_err!("{name}: local gradient length mismatch"));
            }
        }
        let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        let out = Tensor::from_parts(Shape::scalar(), vec![value]);
        self.push(name, out, Op::ScalarFn { inputs }, &vars)
    }

    /// Records an op with a caller-supplied backward function.
    pub fn custom(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: Vec<Var>,
        backward: Box<CustomBackward<T>>,
    ) -> Result<Var> {
        let vars = inputs.clone();
        self.push(name, value, Op::Custom { inputs, backward }, &vars)
    }

    // ---- backward -------------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let [n, ci, h, wd] = self.value(*x).shape().nchw()?;
                let co = self.value(*w).dims()[0];
                let hw = h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.acc(grads, *x, |dx| {
                    for bn in 0..n {
                        for o in 0..co {
                            let gp = &g[(bn * co + o) * hw..(bn * co + o + 1) * hw];
                            for i in 0..ci {
                                let k = &wv[(o * ci + i) * 9..(o * ci + i + 1) * 9];
                                conv_plane_backward_input(
                                    &mut dx[(bn * ci + i) * hw..(bn * ci + i + 1) * hw],
                                    gp,
                                    k,
                                    h,
                                    wd,
                                );
                            }
                        }
                    }
                });
                self.acc(grads, *w, |dw| {
                    for bn in 0..n {
                        for o in 0..co {
                            let gp = &g[(bn * co + o) * hw..(bn * co + o + 1) * hw];
                            for i in 0..ci {
                                let src = &xv[(bn * ci + i) * hw..(bn * ci + i + 1) * hw];
                                conv_plane_backward_weight(&mut dw[(o * ci + i) * 9..(o * ci + i + 1) * 9], gp, src, h, wd);
                            }
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for bn in 0..n {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += g[(bn * co + o) * hw..(bn * co + o + 1) * hw].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::Depthwise { x, w, b } => {
                let [n, c, h, wd] = self.value(*x).shape().nchw()?;
                let hw = h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.acc(grads, *x, |dx| {
                    for bn in 0..n {
                        for ch in 0..c {
                            let off = (bn * c + ch) * hw;
                            conv_plane_backward_input(&mut dx[off..off + hw], &g[off..off + hw], &wv[ch * 9..ch * 9 + 9], h, wd);
                        }
                    }
                });
                self.acc(grads, *w, |dw| {
                    for bn in 0..n {
                        for ch in 0..c {
                            let off = (bn * c + ch) * hw;
                            conv_plane_backward_weight(&mut dw[ch * 9..ch * 9 + 9], &g[off..off + hw], &xv[off..off + hw], h, wd);
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for bn in 0..n {
                        for (ch, d) in db.iter_mut().enumerate() {
                            let off = (bn * c + ch) * hw;
                            *d += g[off..off + hw].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::Matmul { a, b } => {
                let [r, k] = self.value(*a).shape().matrix()?;
                let [_, s] = self.value(*b).shape().matrix()?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |da| {
                    let bt = transpose_raw(bv, k, s);
                    add_into(da, &matmul_raw(g, &bt, r, s, k));
                });
                self.acc(grads, *b, |db| {
                    let at = transpose_raw(av, r, k);
                    add_into(db, &matmul_raw(&at, g, k, r, s));
                });
            }
            Op::Transpose { a } => {
                let [r, c] = self.value(*a).shape().matrix()?;
                self.acc(grads, *a, |da| add_into(da, &transpose_raw(g, c, r)));
            }
            Op::FullyConnected { x, w, b } => {
                let [n, d] = self.value(*x).shape().matrix()?;
                let [_, e] = self.value(*w).shape().matrix()?;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.acc(grads, *x, |dx| {
                    let wt = transpose_raw(wv, d, e);
                    add_into(dx, &matmul_raw(g, &wt, n, e, d));
                });
                self.acc(grads, *w, |dw| {
                    let xt = transpose_raw(xv, n, d);
                    add_into(dw, &matmul_raw(&xt, g, d, n, e));
                });
                self.acc(grads, *b, |db| {
                    for row in g.chunks(e) {
                        add_into(db, row);
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = self.value(*x).shape().nchw()?;
                let inv = T::one() / T::from_usize(h * w);
                self.acc(grads, *x, |dx| {
                    for (plane, &gv) in dx.chunks_mut(h * w).zip(g) {
                        plane.iter_mut().for_each(|d| *d += gv * inv);
                    }
                });
            }
            Op::AvgPool2 { x } => {
                let [_, _, h, w] = self.value(*x).shape().nchw()?;
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                self.acc(grads, *x, |dx| {
                    for (p, plane) in dx.chunks_mut(h * w).enumerate() {
                        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                        for y in 0..h {
                            for xx in 0..w {
                                plane[y * w + xx] += gp[(y / 2) * wo + xx / 2] * quarter;
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let [_, _, h, w] = self.value(*x).shape().nchw()?;
                let f = *factor;
                let (ho, wo) = (h * f, w * f);
                self.acc(grads, *x, |dx| {
                    for (p, plane) in dx.chunks_mut(h * w).enumerate() {
                        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                        for y in 0..ho {
                            for xx in 0..wo {
                                plane[(y / f) * w + xx / f] += gp[y * wo + xx];
                            }
                        }
                    }
                });
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let kind = *kind;
                self.acc(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        let local = match kind {
                            Unary::Sigmoid => yv[i] * (T::one() - yv[i]),
                            Unary::Relu => {
                                if xv[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Exp => yv[i],
                        };
                        dx[i] += g[i] * local;
                    }
                });
            }
            Op::SoftmaxChannels { x } => {
                let [n, c, h, w] = self.value(*x).shape().nchw()?;
                let hw = h * w;
                let yv = node.value.data();
                self.acc(grads, *x, |dx| {
                    for bn in 0..n {
                        for p in 0..hw {
                            let dot: T = (0..c).map(|ch| g[(bn * c + ch) * hw + p] * yv[(bn * c + ch) * hw + p]).sum();
                            for ch in 0..c {
                                let idx = (bn * c + ch) * hw + p;
                                dx[idx] += yv[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, |da| add_into(da, g));
                self.acc(grads, *b, |db| add_into(db, g));
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, |da| add_into(da, g));
                self.acc(grads, *b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.acc(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
            Op::Sum { a } => {
                let gv = g[0];
                self.acc(grads, *a, |da| da.iter_mut().for_each(|d| *d += gv));
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                let gv = g[0] / T::from_usize(n);
                self.acc(grads, *a, |da| da.iter_mut().for_each(|d| *d += gv));
            }
            Op::Reshape { a } => {
                self.acc(grads, *a, |da| add_into(da, g));
            }
            Op::BatchMean { a } => {
                let n = self.value(*a).dims()[0];
                let inv = T::one() / T::from_usize(n);
                self.acc(grads, *a, |da| {
                    for chunk in da.chunks_mut(g.len()) {
                        for (d, &gv) in chunk.iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    }
                });
            }
            Op::ChannelGram { a, b } => {
                let [n, ca, h, w] = self.value(*a).shape().nchw()?;
                let cb = self.value(*b).dims()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (hw, hh) = (h * w, h * h);
                self.acc(grads, *a, |da| {
                    for bn in 0..n {
                        for i in 0..ca {
                            let dmap = &mut da[(bn * ca + i) * hw..(bn * ca + i + 1) * hw];
                            for j in 0..cb {
                                let bmap = &bv[(bn * cb + j) * hw..(bn * cb + j + 1) * hw];
                                let gp = &g[((bn * ca + i) * cb + j) * hh..((bn * ca + i) * cb + j + 1) * hh];
                                for p in 0..h {
                                    let drow = &mut dmap[p * w..(p + 1) * w];
                                    for q in 0..h {
                                        let gv = gp[p * h + q];
                                        for (d, &bvv) in drow.iter_mut().zip(&bmap[q * w..(q + 1) * w]) {
                                            *d += gv * bvv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for bn in 0..n {
                        for j in 0..cb {
                            let dmap = &mut db[(bn * cb + j) * hw..(bn * cb + j + 1) * hw];
                            for i in 0..ca {
                                let amap = &av[(bn * ca + i) * hw..(bn * ca + i + 1) * hw];
                                let gp = &g[((bn * ca + i) * cb + j) * hh..((bn * ca + i) * cb + j + 1) * hh];
                                for q in 0..h {
                                    let drow = &mut dmap[q * w..(q + 1) * w];
                                    for p in 0..h {
                                        let gv = gp[p * h + q];
                                        for (d, &avv) in drow.iter_mut().zip(&amap[p * w..(p + 1) * w]) {
                                            *d += gv * avv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ChannelMix { m, x, transpose } => {
                let [n, c, h, w] = self.value(*x).shape().nchw()?;
                let hw = h * w;
                let mv = self.value(*m).data();
                let xv = self.value(*x).data();
                let tr = *transpose;
                // forward: out[n,i] = Σ_j coef(i,j)·x[n,j]
                let coef_idx = |i: usize, j: usize| if tr { j * c + i } else { i * c + j };
                self.acc(grads, *x, |dx| {
                    for bn in 0..n {
                        for i in 0..c {
                            let gp = &g[(bn * c + i) * hw..(bn * c + i + 1) * hw];
                            for j in 0..c {
                                let coef = mv[coef_idx(i, j)];
                                let dst = &mut dx[(bn * c + j) * hw..(bn * c + j + 1) * hw];
                                for (d, &gv) in dst.iter_mut().zip(gp) {
                                    *d += coef * gv;
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *m, |dm| {
                    for bn in 0..n {
                        for i in 0..c {
                            let gp = &g[(bn * c + i) * hw..(bn * c + i + 1) * hw];
                            for j in 0..c {
                                let src = &xv[(bn * c + j) * hw..(bn * c + j + 1) * hw];
                                dm[coef_idx(i, j)] += gp.iter().zip(src).map(|(&a, &b)| a * b).sum::<T>();
                            }
                        }
                    }
                });
            }
            Op::ScalarFn { inputs } => {
                let gv = g[0];
                for (v, local) in inputs {
                    self.acc(grads, *v, |d| {
                        for (dd, &l) in d.iter_mut().zip(local) {
                            *dd += gv * l;
                        }
                    });
                }
            }
            Op::Custom { inputs, backward } => {
                let parts = backward(g);
                if parts.len() != inputs.len() {
                    return Err(shape_err!("custom op returned {} gradients for {} inputs", parts.len(), inputs.len()));
                }
                for (v, part) in inputs.iter().zip(parts) {
                    if part.len() != self.value(*v).numel() {
                        return Err(shape_err!("custom op gradient length mismatch"));
                    }
                    self.acc(grads, *v, |d| add_into(d, &part));
                }
            }
        }
        Ok(())
    }
}

// ---- raw kernels ---------------------------------------------------------------

fn conv_plane_acc<T: Real>(out: &mut [T], src: &[T], k: &[T], h: usize, w: usize) {
    for ky in 0..3 {
        let dy = ky as isize - 1;
        let (y0, y1) = tap_range(dy, h);
        for kx in 0..3 {
            let dx = kx as isize - 1;
            let (x0, x1) = tap_range(dx, w);
            let kv = k[ky * 3 + kx];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let orow = &mut out[y * w + x0..y * w + x1];
                let sx0 = (x0 as isize + dx) as usize;
                let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                for (o, &s) in orow.iter_mut().zip(srow) {
                    *o += kv * s;
                }
            }
        }
    }
}

fn conv_plane_backward_input<T: Real>(dx: &mut [T], g: &[T], k: &[T], h: usize, w: usize) {
    for ky in 0..3 {
        let dy = ky as isize - 1;
        let (y0, y1) = tap_range(dy, h);
        for kx in 0..3 {
            let ddx = kx as isize - 1;
            let (x0, x1) = tap_range(ddx, w);
            let kv = k[ky * 3 + kx];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + ddx) as usize;
                let drow = &mut dx[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                let grow = &g[y * w + x0..y * w + x1];
                for (d, &gv) in drow.iter_mut().zip(grow) {
                    *d += kv * gv;
                }
            }
        }
    }
}

fn conv_plane_backward_weight<T: Real>(dk: &mut [T], g: &[T], src: &[T], h: usize, w: usize) {
    for ky in 0..3 {
        let dy = ky as isize - 1;
        let (y0, y1) = tap_range(dy, h);
        for kx in 0..3 {
            let dx = kx as isize - 1;
            let (x0, x1) = tap_range(dx, w);
            let mut acc = T::zero();
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                let grow = &g[y * w + x0..y * w + x1];
                let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                acc += grow.iter().zip(srow).map(|(&a, &b)| a * b).sum::<T>();
            }
            dk[ky * 3 + kx] += acc;
        }
    }
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], r: usize, k: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * s];
    for i in 0..r {
        let orow = &mut out[i * s..(i + 1) * s];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * s..(kk + 1) * s]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_channels_raw<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bn in 0..n {
        for p in 0..hw {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(x[(bn * c + ch) * hw + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (x[(bn * c + ch) * hw + p] - mx).exp();
                out[(bn * c + ch) * hw + p] = e;
                s += e;
            }
            for ch in 0..c {
                out[(bn * c + ch) * hw + p] /= s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
