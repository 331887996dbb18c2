use std::cell::{Ref, RefCell};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvShape};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::wavelet::{self, DwtMap};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Swish,
    Sigmoid,
    Exp,
    Log,
    Square,
    Neg,
}

impl UnaryOp {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryOp::Swish => x * sigmoid(x),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Square => x * x,
            UnaryOp::Neg => -x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            UnaryOp::Swish => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            UnaryOp::Sigmoid => y * (one - y),
            UnaryOp::Exp => y,
            UnaryOp::Log => one / x,
            UnaryOp::Square => x + x,
            UnaryOp::Neg => -one,
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn same(stride: usize) -> Self {
        Self { stride, padding: Padding::Same }
    }

    pub fn valid(stride: usize) -> Self {
        Self { stride, padding: Padding::Valid }
    }

    fn resolve(&self, batch: usize, in_h: usize, in_w: usize, cin: usize, kh: usize, kw: usize) -> Result<ConvShape> {
        let s = self.stride;
        if !(1..=4).contains(&kh) || !(1..=4).contains(&kw) || ![1, 2, 4].contains(&s) {
            return Err(Error::Shape(format!("unsupported conv kernel {kh}×{kw} stride {s}")));
        }
        let (out_h, out_w, pad_top, pad_left) = match self.padding {
            Padding::Same => {
                let (oh, ow) = (in_h.div_ceil(s), in_w.div_ceil(s));
                let ph = ((oh - 1) * s + kh).saturating_sub(in_h);
                let pw = ((ow - 1) * s + kw).saturating_sub(in_w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if in_h < kh || in_w < kw {
                    return Err(Error::Shape(format!("{in_h}×{in_w} input smaller than {kh}×{kw} kernel")));
                }
                ((in_h - kh) / s + 1, (in_w - kw) / s + 1, 0, 0)
            }
        };
        Ok(ConvShape { batch, in_h, in_w, cin, kh, kw, stride: s, out_h, out_w, pad_top, pad_left })
    }

    /// Spatial size of a transposed conv's output for a given input size.
    fn transpose_out(&self, small: usize, k: usize) -> usize {
        match self.padding {
            Padding::Same => small * self.stride,
            Padding::Valid => (small - 1) * self.stride + k,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Var, UnaryOp),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, k: Var, b: Option<Var>, shape: ConvShape },
    ConvTranspose { x: Var, k: Var, b: Option<Var>, shape: ConvShape },
    Normalize { x: Var, scale: Var, bias: Option<Var>, inv_std: Vec<T> },
    Softmax(Var),
    AttnScores(Var, Var),
    AttnApply(Var, Var),
    AvgPool(Var, usize),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    Dwt { x: Var, map: DwtMap, geom: [usize; 4], levels: usize },
    Dropout(Var, Vec<T>),
    Gather { table: Var, ids: Vec<usize> },
    SliceLast { x: Var, start: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of recorded operations.
///
/// Nodes are appended in execution order, which is a valid topological order;
/// [`Graph::backward`] walks it in reverse and sums gradients across fan-out.
pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaf nodes produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<S: Into<String>>(msg: S) -> Error {
    Error::Shape(msg.into())
}

fn nhwc(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(shape_err(format!("{what} expects [B, H, W, C], got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    /// An inference graph: dropout is the identity.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// A graph whose dropout masks are drawn from a stream seeded by `seed`.
    pub fn with_mode(training: bool, seed: u64) -> Self {
        Self { nodes: RefCell::new(Vec::new()), training, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    /// A leaf that gradients flow to.
    pub fn param(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let out = kernels::broadcast_shape(x.shape(), y.shape())
                .ok_or_else(|| shape_err(format!("cannot broadcast {:?} with {:?}", x.shape(), y.shape())))?;
            let data = kernels::broadcast_binary(x.data(), x.shape(), y.data(), y.shape(), &out, f);
            Tensor::from_vec(&out, data)?
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn unary(&self, x: Var, op: UnaryOp) -> Var {
        let value = self.value(x).map(|v| op.apply(v));
        self.push(value, Op::Unary(x, op), &[x])
    }

    pub fn swish(&self, x: Var) -> Var {
        self.unary(x, UnaryOp::Swish)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, UnaryOp::Sigmoid)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, UnaryOp::Exp)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, UnaryOp::Log)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, UnaryOp::Square)
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// `x * (1 + scale) + shift` with broadcasting.
    pub fn scale_shift(&self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let s1 = self.add_scalar(scale, T::one());
        let h = self.mul(x, s1)?;
        self.add(h, shift)
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Affine map over the last axis: `x[..., cin] @ w[cin, cout] + b[cout]`.
    pub fn dense(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let (cin, cout) = match *wv.shape() {
                [i, o] => (i, o),
                ref s => return Err(shape_err(format!("dense weight must be 2-D, got {s:?}"))),
            };
            if xv.last_dim() != cin || xv.rank() == 0 {
                return Err(shape_err(format!("dense input {:?} vs weight {:?}", xv.shape(), wv.shape())));
            }
            let rows = xv.len() / cin;
            let mut out = vec![T::zero(); rows * cout];
            kernels::matmul(xv.data(), wv.data(), &mut out, rows, cin, cout, false, false, T::zero());
            if let Some(b) = b {
                let bv = &nodes[b.0].value;
                if bv.shape() != [cout] {
                    return Err(shape_err(format!("dense bias {:?} for {cout} outputs", bv.shape())));
                }
                kernels::add_bias(&mut out, bv.data());
            }
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().unwrap() = cout;
            Tensor::from_vec(&shape, out)?
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Dense { x, w, b }, &inputs))
    }

    /// Cross-correlation of `x[B,H,W,Cin]` with `k[kh,kw,Cin,Cout]`.
    pub fn conv2d(&self, x: Var, k: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (xv, kv) = (&nodes[x.0].value, &nodes[k.0].value);
            let (bn, h, w, cin) = nhwc(xv.shape(), "conv2d")?;
            let (kh, kw, kc, cout) = match *kv.shape() {
                [a, b, c, d] => (a, b, c, d),
                ref s => return Err(shape_err(format!("conv kernel must be 4-D, got {s:?}"))),
            };
            if kc != cin {
                return Err(shape_err(format!("conv kernel expects {kc} channels, input has {cin}")));
            }
            let shape = geom.resolve(bn, h, w, cin, kh, kw)?;
            let cols = kernels::im2col(xv.data(), &shape);
            let mut out = vec![T::zero(); shape.rows() * cout];
            kernels::matmul(&cols, kv.data(), &mut out, shape.rows(), shape.patch(), cout, false, false, T::zero());
            if let Some(b) = b {
                let bv = &nodes[b.0].value;
                if bv.shape() != [cout] {
                    return Err(shape_err(format!("conv bias {:?} for {cout} outputs", bv.shape())));
                }
                kernels::add_bias(&mut out, bv.data());
            }
            (Tensor::from_vec(&[bn, shape.out_h, shape.out_w, cout], out)?, shape)
        };
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv { x, k, b, shape }, &inputs))
    }

    /// Adjoint of [`Graph::conv2d`] with the same kernel `k[kh,kw,Cout,Cin]`:
    /// maps `[B,h,w,Cin]` to `[B,H,W,Cout]` where `conv2d` maps `H×W` to `h×w`.
    pub fn conv2d_transpose(&self, x: Var, k: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (xv, kv) = (&nodes[x.0].value, &nodes[k.0].value);
            let (bn, h, w, cin) = nhwc(xv.shape(), "conv2d_transpose")?;
            let (kh, kw, cout, kc) = match *kv.shape() {
                [a, b, c, d] => (a, b, c, d),
                ref s => return Err(shape_err(format!("conv kernel must be 4-D, got {s:?}"))),
            };
            if kc != cin {
                return Err(shape_err(format!("transposed conv kernel expects {kc} channels, input has {cin}")));
            }
            let (big_h, big_w) = (geom.transpose_out(h, kh), geom.transpose_out(w, kw));
            let shape = geom.resolve(bn, big_h, big_w, cout, kh, kw)?;
            if shape.out_h != h || shape.out_w != w {
                return Err(shape_err("transposed conv geometry mismatch"));
            }
            let mut cols = vec![T::zero(); shape.rows() * shape.patch()];
            kernels::matmul(xv.data(), kv.data(), &mut cols, shape.rows(), cin, shape.patch(), false, true, T::zero());
            let mut out = vec![T::zero(); bn * big_h * big_w * cout];
            kernels::col2im(&cols, &shape, &mut out);
            if let Some(b) = b {
                let bv = &nodes[b.0].value;
                if bv.shape() != [cout] {
                    return Err(shape_err(format!("conv bias {:?} for {cout} outputs", bv.shape())));
                }
                kernels::add_bias(&mut out, bv.data());
            }
            (Tensor::from_vec(&[bn, big_h, big_w, cout], out)?, shape)
        };
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvTranspose { x, k, b, shape }, &inputs))
    }

    /// Normalizes over the last axis (`eps = 1e-5`), then applies a learned
    /// per-channel scale and optional bias.
    pub fn normalize(&self, x: Var, scale: Var, bias: Option<Var>) -> Result<Var> {
        let eps = T::of(1e-5);
        let (value, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let c = xv.last_dim();
            let sv = &nodes[scale.0].value;
            if sv.shape() != [c] {
                return Err(shape_err(format!("normalize scale {:?} for {c} channels", sv.shape())));
            }
            let bv = match bias {
                Some(b) => {
                    let bv = &nodes[b.0].value;
                    if bv.shape() != [c] {
                        return Err(shape_err(format!("normalize bias {:?} for {c} channels", bv.shape())));
                    }
                    Some(bv.data())
                }
                None => None,
            };
            let n = T::of(c as f64);
            let mut out = vec![T::zero(); xv.len()];
            let mut inv_std = Vec::with_capacity(xv.len() / c.max(1));
            for (row, o) in xv.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let inv = T::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for j in 0..c {
                    let mut y = (row[j] - mean) * inv * sv.data()[j];
                    if let Some(bd) = bv {
                        y = y + bd[j];
                    }
                    o[j] = y;
                }
            }
            (Tensor::from_vec(xv.shape(), out)?, inv_std)
        };
        let mut inputs = vec![x, scale];
        inputs.extend(bias);
        Ok(self.push(value, Op::Normalize { x, scale, bias, inv_std }, &inputs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let value = {
            let xv = self.value(x);
            let c = xv.last_dim();
            let mut out = xv.data().to_vec();
            for row in out.chunks_exact_mut(c) {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s = s + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            Tensor::from_vec(xv.shape(), out).expect("same shape")
        };
        self.push(value, Op::Softmax(x), &[x])
    }

    /// `einsum("bqhd,bkhd->bhqk", q, k)`.
    pub fn attn_scores(&self, q: Var, k: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (qv, kv) = (&nodes[q.0].value, &nodes[k.0].value);
            let (b, nq, h, d) = nhwc(qv.shape(), "attention query")?;
            let (b2, nk, h2, d2) = nhwc(kv.shape(), "attention key")?;
            if (b, h, d) != (b2, h2, d2) {
                return Err(shape_err(format!("query {:?} vs key {:?}", qv.shape(), kv.shape())));
            }
            let mut out = vec![T::zero(); b * h * nq * nk];
            let hd = (h * d) as isize;
            for bi in 0..b {
                for hi in 0..h {
                    let qo = (bi * nq * h + hi) * d;
                    let ko = (bi * nk * h + hi) * d;
                    let oo = (bi * h + hi) * nq * nk;
                    // SAFETY: offsets and strides stay inside the three buffers.
                    unsafe {
                        T::gemm(nq, d, nk, T::one(), qv.data()[qo..].as_ptr(), hd, 1, kv.data()[ko..].as_ptr(), 1, hd,
                            T::zero(), out[oo..].as_mut_ptr(), nk as isize, 1);
                    }
                }
            }
            Tensor::from_vec(&[b, h, nq, nk], out)?
        };
        Ok(self.push(value, Op::AttnScores(q, k), &[q, k]))
    }

    /// `einsum("bhqk,bkhd->bqhd", weights, v)`.
    pub fn attn_apply(&self, weights: Var, v: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (wv, vv) = (&nodes[weights.0].value, &nodes[v.0].value);
            let (b, h, nq, nk) = nhwc(wv.shape(), "attention weights")?;
            let (b2, nk2, h2, d) = nhwc(vv.shape(), "attention values")?;
            if (b, h, nk) != (b2, h2, nk2) {
                return Err(shape_err(format!("weights {:?} vs values {:?}", wv.shape(), vv.shape())));
            }
            let mut out = vec![T::zero(); b * nq * h * d];
            let hd = (h * d) as isize;
            for bi in 0..b {
                for hi in 0..h {
                    let wo = (bi * h + hi) * nq * nk;
                    let vo = (bi * nk * h + hi) * d;
                    let oo = (bi * nq * h + hi) * d;
                    // SAFETY: offsets and strides stay inside the three buffers.
                    unsafe {
                        T::gemm(nq, nk, d, T::one(), wv.data()[wo..].as_ptr(), nk as isize, 1, vv.data()[vo..].as_ptr(), hd, 1,
                            T::zero(), out[oo..].as_mut_ptr(), hd, 1);
                    }
                }
            }
            Tensor::from_vec(&[b, nq, h, d], out)?
        };
        Ok(self.push(value, Op::AttnApply(weights, v), &[weights, v]))
    }

    /// Mean over non-overlapping `s×s` windows of an NHWC tensor.
    pub fn avg_pool2d(&self, x: Var, s: usize) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            let (b, h, w, c) = nhwc(xv.shape(), "avg_pool2d")?;
            avg_pool_raw(xv.data(), b, h, w, c, s)
                .and_then(|d| Tensor::from_vec(&[b, h / s, w / s, c], d))?
        };
        Ok(self.push(value, Op::AvgPool(x, s), &[x]))
    }

    /// Area downsampling by an integer factor (average pooling).
    pub fn resize_down_area(&self, x: Var, factor: usize) -> Result<Var> {
        self.avg_pool2d(x, factor)
    }

    pub fn space_to_depth(&self, x: Var, p: usize) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            let (b, h, w, c) = nhwc(xv.shape(), "space_to_depth")?;
            if p == 0 || h % p != 0 || w % p != 0 {
                return Err(Error::Divisibility(format!("{h}×{w} not divisible by {p}")));
            }
            let per = h * w * c;
            let data: Vec<T> =
                (0..b).flat_map(|i| wavelet::s2d_raw(&xv.data()[i * per..(i + 1) * per], h, w, c, p)).collect();
            Tensor::from_vec(&[b, h / p, w / p, c * p * p], data)?
        };
        Ok(self.push(value, Op::SpaceToDepth(x, p), &[x]))
    }

    pub fn depth_to_space(&self, x: Var, p: usize) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            let (b, h, w, c) = nhwc(xv.shape(), "depth_to_space")?;
            if p == 0 || c % (p * p) != 0 {
                return Err(Error::Divisibility(format!("{c} channels not divisible by {p}²")));
            }
            let c0 = c / (p * p);
            let per = h * w * c;
            let data: Vec<T> = (0..b)
                .flat_map(|i| wavelet::d2s_raw(&xv.data()[i * per..(i + 1) * per], h * p, w * p, c0, p))
                .collect();
            Tensor::from_vec(&[b, h * p, w * p, c0], data)?
        };
        Ok(self.push(value, Op::DepthToSpace(x, p), &[x]))
    }

    /// Packed multi-level 5/3 DWT of an NHWC batch.
    pub fn dwt53(&self, x: Var, levels: usize) -> Result<Var> {
        let (b, h, w, c) = nhwc(&self.shape(x), "dwt53")?;
        let f = 1usize << levels;
        if levels == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Divisibility(format!("{h}×{w} not divisible by 2^{levels}")));
        }
        let data = wavelet::dwt_batch(self.value(x).data(), b, h, w, c, levels, DwtMap::Forward);
        let value = Tensor::from_vec(&[b, h / f, w / f, c * f * f], data)?;
        Ok(self.push(value, Op::Dwt { x, map: DwtMap::Forward, geom: [b, h, w, c], levels }, &[x]))
    }

    /// Inverse of [`Graph::dwt53`].
    pub fn inverse_dwt53(&self, x: Var, levels: usize) -> Result<Var> {
        let (b, ph, pw, pc) = nhwc(&self.shape(x), "inverse_dwt53")?;
        let f = 1usize << levels;
        if levels == 0 || pc % (f * f) != 0 {
            return Err(Error::Divisibility(format!("{pc} channels not divisible by 4^{levels}")));
        }
        let (h, w, c) = (ph * f, pw * f, pc / (f * f));
        let data = wavelet::dwt_batch(self.value(x).data(), b, h, w, c, levels, DwtMap::Inverse);
        let value = Tensor::from_vec(&[b, h, w, c], data)?;
        Ok(self.push(value, Op::Dwt { x, map: DwtMap::Inverse, geom: [b, h, w, c], levels }, &[x]))
    }

    /// Inverted dropout. The identity outside training mode or when `rate == 0`.
    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let (value, mask) = {
            let xv = self.value(x);
            let mut rng = self.rng.borrow_mut();
            let scale = T::of(1.0 / keep);
            let mask: Vec<T> =
                (0..xv.len()).map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() }).collect();
            let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            (Tensor::from_vec(xv.shape(), data)?, mask)
        };
        Ok(self.push(value, Op::Dropout(x, mask), &[x]))
    }

    /// Row lookup: `table[rows, E]` indexed by `ids` gives `[ids.len(), E]`.
    pub fn gather(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = {
            let tv = self.value(table);
            let (rows, e) = match *tv.shape() {
                [r, e] => (r, e),
                ref s => return Err(shape_err(format!("embedding table must be 2-D, got {s:?}"))),
            };
            let mut out = Vec::with_capacity(ids.len() * e);
            for &i in ids {
                if i >= rows {
                    return Err(shape_err(format!("row {i} out of {rows}")));
                }
                out.extend_from_slice(&tv.data()[i * e..(i + 1) * e]);
            }
            Tensor::from_vec(&[ids.len(), e], out)?
        };
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            let c = xv.last_dim();
            if start + len > c {
                return Err(shape_err(format!("slice {start}+{len} of {c} channels")));
            }
            let data: Vec<T> = xv.data().chunks_exact(c).flat_map(|r| r[start..start + len].iter().copied()).collect();
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::from_vec(&shape, data)?
        };
        Ok(self.push(value, Op::SliceLast { x, start }, &[x]))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one(); nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|d| Tensor::from_vec(n.value.shape(), d).expect("gradient shape")))
            .collect();
        Gradients { grads }
    }
}

pub(crate) fn avg_pool_raw<T: Scalar>(x: &[T], b: usize, h: usize, w: usize, c: usize, s: usize) -> Result<Vec<T>> {
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Divisibility(format!("{h}×{w} not divisible by {s}")));
    }
    let (oh, ow) = (h / s, w / s);
    let inv = T::of(1.0 / (s * s) as f64);
    let mut out = vec![T::zero(); b * oh * ow * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let src = ((bi * h + y) * w + xx) * c;
                let dst = ((bi * oh + y / s) * ow + xx / s) * c;
                for ch in 0..c {
                    out[dst + ch] = out[dst + ch] + x[src + ch];
                }
            }
        }
    }
    for v in &mut out {
        *v = *v * inv;
    }
    Ok(out)
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let out_shape = node.value.shape();
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if needs(*a) {
                accumulate(nodes, grads, *a, kernels::reduce_to(g, out_shape, val(*a).shape()));
            }
            if needs(*b) {
                let mut gb = kernels::reduce_to(g, out_shape, val(*b).shape());
                if sign < T::zero() {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let other = kernels::broadcast_to(bv.data(), bv.shape(), out_shape);
                let prod: Vec<T> = g.iter().zip(&other).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *a, kernels::reduce_to(&prod, out_shape, av.shape()));
            }
            if needs(*b) {
                let other = kernels::broadcast_to(av.data(), av.shape(), out_shape);
                let prod: Vec<T> = g.iter().zip(&other).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *b, kernels::reduce_to(&prod, out_shape, bv.shape()));
            }
        }
        Op::Unary(x, op) => {
            let xv = val(*x).data();
            let yv = node.value.data();
            let d = g.iter().zip(xv.iter().zip(yv)).map(|(&gi, (&xi, &yi))| gi * op.derivative(xi, yi)).collect();
            accumulate(nodes, grads, *x, d);
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g.iter().map(|&v| v * *c).collect()),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Sum(x) => accumulate(nodes, grads, *x, vec![g[0]; val(*x).len()]),
        Op::Mean(x) => {
            let n = val(*x).len();
            accumulate(nodes, grads, *x, vec![g[0] / T::of(n as f64); n]);
        }
        Op::Dense { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.len() / cin;
            if needs(*x) {
                let mut gx = vec![T::zero(); rows * cin];
                kernels::matmul(g, wv.data(), &mut gx, rows, cout, cin, false, true, T::zero());
                accumulate(nodes, grads, *x, gx);
            }
            if needs(*w) {
                let mut gw = vec![T::zero(); cin * cout];
                kernels::matmul(xv.data(), g, &mut gw, cin, rows, cout, true, false, T::zero());
                accumulate(nodes, grads, *w, gw);
            }
            if let Some(b) = b {
                accumulate(nodes, grads, *b, kernels::column_sums(g, cout));
            }
        }
        Op::Conv { x, k, b, shape } => {
            let (xv, kv) = (val(*x), val(*k));
            let cout = kv.shape()[3];
            let (rows, patch) = (shape.rows(), shape.patch());
            if needs(*k) {
                let cols = kernels::im2col(xv.data(), shape);
                let mut gk = vec![T::zero(); patch * cout];
                kernels::matmul(&cols, g, &mut gk, patch, rows, cout, true, false, T::zero());
                accumulate(nodes, grads, *k, gk);
            }
            if needs(*x) {
                let mut gcols = vec![T::zero(); rows * patch];
                kernels::matmul(g, kv.data(), &mut gcols, rows, cout, patch, false, true, T::zero());
                let mut gx = vec![T::zero(); xv.len()];
                kernels::col2im(&gcols, shape, &mut gx);
                accumulate(nodes, grads, *x, gx);
            }
            if let Some(b) = b {
                accumulate(nodes, grads, *b, kernels::column_sums(g, cout));
            }
        }
        Op::ConvTranspose { x, k, b, shape } => {
            let (xv, kv) = (val(*x), val(*k));
            let cin = xv.last_dim();
            let (rows, patch) = (shape.rows(), shape.patch());
            let gcols = kernels::im2col(g, shape);
            if needs(*x) {
                let mut gx = vec![T::zero(); rows * cin];
                kernels::matmul(&gcols, kv.data(), &mut gx, rows, patch, cin, false, false, T::zero());
                accumulate(nodes, grads, *x, gx);
            }
            if needs(*k) {
                let mut gk = vec![T::zero(); patch * cin];
                kernels::matmul(&gcols, xv.data(), &mut gk, patch, rows, cin, true, false, T::zero());
                accumulate(nodes, grads, *k, gk);
            }
            if let Some(b) = b {
                accumulate(nodes, grads, *b, kernels::column_sums(g, shape.cin));
            }
        }
        Op::Normalize { x, scale, bias, inv_std } => {
            let xv = val(*x);
            let sv = val(*scale).data();
            let c = xv.last_dim();
            let n = T::of(c as f64);
            let mut gx = vec![T::zero(); xv.len()];
            let mut gs = vec![T::zero(); c];
            let mut xhat = vec![T::zero(); c];
            let mut dxhat = vec![T::zero(); c];
            for (r, ((row, gr), gxr)) in xv.data().chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)).enumerate() {
                let inv = inv_std[r];
                let mean = row.iter().copied().sum::<T>() / n;
                let (mut m1, mut m2) = (T::zero(), T::zero());
                for j in 0..c {
                    xhat[j] = (row[j] - mean) * inv;
                    dxhat[j] = gr[j] * sv[j];
                    gs[j] = gs[j] + gr[j] * xhat[j];
                    m1 = m1 + dxhat[j];
                    m2 = m2 + dxhat[j] * xhat[j];
                }
                m1 = m1 / n;
                m2 = m2 / n;
                for j in 0..c {
                    gxr[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *scale, gs);
            if let Some(b) = bias {
                accumulate(nodes, grads, *b, kernels::column_sums(g, c));
            }
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let c = node.value.last_dim();
            let mut gx = vec![T::zero(); y.len()];
            for ((yr, gr), gxr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    gxr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::AttnScores(q, k) => {
            let (qv, kv) = (val(*q), val(*k));
            let (b, nq, h, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2], qv.shape()[3]);
            let nk = kv.shape()[1];
            let hd = (h * d) as isize;
            let mut gq = vec![T::zero(); qv.len()];
            let mut gk = vec![T::zero(); kv.len()];
            for bi in 0..b {
                for hi in 0..h {
                    let qo = (bi * nq * h + hi) * d;
                    let ko = (bi * nk * h + hi) * d;
                    let go = (bi * h + hi) * nq * nk;
                    // SAFETY: offsets and strides stay inside the buffers.
                    unsafe {
                        T::gemm(nq, nk, d, T::one(), g[go..].as_ptr(), nk as isize, 1, kv.data()[ko..].as_ptr(), hd, 1,
                            T::zero(), gq[qo..].as_mut_ptr(), hd, 1);
                        T::gemm(nk, nq, d, T::one(), g[go..].as_ptr(), 1, nk as isize, qv.data()[qo..].as_ptr(), hd, 1,
                            T::zero(), gk[ko..].as_mut_ptr(), hd, 1);
                    }
                }
            }
            accumulate(nodes, grads, *q, gq);
            accumulate(nodes, grads, *k, gk);
        }
        Op::AttnApply(w, v) => {
            let (wv, vv) = (val(*w), val(*v));
            let (b, h, nq, nk) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
            let d = vv.shape()[3];
            let hd = (h * d) as isize;
            let mut gw = vec![T::zero(); wv.len()];
            let mut gv = vec![T::zero(); vv.len()];
            for bi in 0..b {
                for hi in 0..h {
                    let wo = (bi * h + hi) * nq * nk;
                    let vo = (bi * nk * h + hi) * d;
                    let go = (bi * nq * h + hi) * d;
                    // SAFETY: offsets and strides stay inside the buffers.
                    unsafe {
                        T::gemm(nq, d, nk, T::one(), g[go..].as_ptr(), hd, 1, vv.data()[vo..].as_ptr(), 1, hd,
                            T::zero(), gw[wo..].as_mut_ptr(), nk as isize, 1);
                        T::gemm(nk, nq, d, T::one(), wv.data()[wo..].as_ptr(), 1, nk as isize, g[go..].as_ptr(), hd, 1,
                            T::zero(), gv[vo..].as_mut_ptr(), hd, 1);
                    }
                }
            }
            accumulate(nodes, grads, *w, gw);
            accumulate(nodes, grads, *v, gv);
        }
        Op::AvgPool(x, s) => {
            let xv = val(*x);
            let (b, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let (oh, ow) = (h / s, w / s);
            let inv = T::of(1.0 / (s * s) as f64);
            let mut gx = vec![T::zero(); xv.len()];
            for bi in 0..b {
                for y in 0..h {
                    for xx in 0..w {
                        let dst = ((bi * h + y) * w + xx) * c;
                        let src = ((bi * oh + y / s) * ow + xx / s) * c;
                        for ch in 0..c {
                            gx[dst + ch] = g[src + ch] * inv;
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::SpaceToDepth(x, p) => {
            let s = val(*x).shape();
            let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
            let per = h * w * c;
            let gx = (0..b).flat_map(|i| wavelet::d2s_raw(&g[i * per..(i + 1) * per], h, w, c, *p)).collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::DepthToSpace(x, p) => {
            let (b, h, w, c) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
            let per = h * w * c;
            let gx = (0..b).flat_map(|i| wavelet::s2d_raw(&g[i * per..(i + 1) * per], h, w, c, *p)).collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Dwt { x, map, geom, levels } => {
            let [b, h, w, c] = *geom;
            let adj = match map {
                DwtMap::Forward => DwtMap::ForwardAdjoint,
                DwtMap::Inverse => DwtMap::InverseAdjoint,
                DwtMap::ForwardAdjoint => DwtMap::Forward,
                DwtMap::InverseAdjoint => DwtMap::Inverse,
            };
            accumulate(nodes, grads, *x, wavelet::dwt_batch(g, b, h, w, c, *levels, adj));
        }
        Op::Dropout(x, mask) => {
            accumulate(nodes, grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
        }
        Op::Gather { table, ids } => {
            let tv = val(*table);
            let e = tv.shape()[1];
            let mut gt = vec![T::zero(); tv.len()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..e {
                    gt[id * e + j] = gt[id * e + j] + g[r * e + j];
                }
            }
            accumulate(nodes, grads, *table, gt);
        }
        Op::SliceLast { x, start } => {
            let xv = val(*x);
            let c = xv.last_dim();
            let len = node.value.last_dim();
            let mut gx = vec![T::zero(); xv.len()];
            for (dst, src) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                dst[*start..*start + len].copy_from_slice(src);
            }
            accumulate(nodes, grads, *x, gx);
        }
    }
}
