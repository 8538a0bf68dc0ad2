//! Reverse-mode differentiation over a fixed operator set.
//!
//! A [`Tape`] records every operation as a node holding its output value.
//! [`Tape::backward`] walks the nodes once in reverse creation order and
//! returns a [`Gradients`] table; parameter leaves are tied back to their
//! [`ParamStore`] slots so gradients can be accumulated into the store.

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::color_hvi::{clip_hvi, hvi_to_rgb_jacobian};
use crate::error::{contract, Error, Result};
use crate::s2d;
use crate::wkv::{self, WkvParams};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Abs(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Tanh(Var),
    SquaredRelu(Var),
    Softplus(Var),
    Clamp01(Var),
    MatMul(Var, Var),
    Conv1x1 { x: Var, w: Var, b: Option<Var> },
    DwConv3x3 { x: Var, k: Var },
    Conv3x3 { x: Var, k: Var, b: Option<Var> },
    LayerNorm { x: Var, scale: Var, offset: Var, xhat: Vec<T>, inv: Vec<T> },
    ConcatChannels(Var, Var),
    SliceChannels { x: Var, start: usize },
    Mean(Var),
    Reshape(Var),
    PixelUnshuffle(Var, usize),
    PixelShuffle(Var, usize),
    BiWkv { k: Var, v: Var, w: Var, u: Var },
    Filter2d { x: Var, kernel: Tensor<T> },
    AvgPool2(Var),
    HviClip(Var),
    Phvit(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Abs(_) => "abs",
            Op::Sqrt(_) => "sqrt",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::SquaredRelu(_) => "squared_relu",
            Op::Softplus(_) => "softplus",
            Op::Clamp01(_) => "clamp01",
            Op::MatMul(..) => "matmul",
            Op::Conv1x1 { .. } => "conv1x1",
            Op::DwConv3x3 { .. } => "dwconv3x3",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatChannels(..) => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Mean(_) => "mean_reduce",
            Op::Reshape(_) => "reshape",
            Op::PixelUnshuffle(..) => "pixel_unshuffle",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::BiWkv { .. } => "biwkv",
            Op::Filter2d { .. } => "filter2d",
            Op::AvgPool2(_) => "avg_pool2",
            Op::HviClip(_) => "hvi_clip",
            Op::Phvit(_) => "phvit",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for one reverse sweep.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

/// How the right-hand side of a binary op lines up with the left.
#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    Channel,
    Scalar,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that evaluates without keeping anything differentiable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
            consumed: false,
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if let Some(i) = value.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                op: op.name(),
                detail: format!("non-finite output at flat index {i}"),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input that is not bound to any parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let value = store.get(id).value.clone();
        self.push(value, Op::Param(id), true)
    }

    fn bcast(&self, a: Var, b: Var, op: &str) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb.len() == 1 && sb[0] == *sa.last().unwrap_or(&1) {
            Ok(Bcast::Channel)
        } else if sb.iter().product::<usize>() == 1 {
            Ok(Bcast::Scalar)
        } else {
            Err(contract(format!("{op}: shapes {sa:?} and {sb:?} do not broadcast")))
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let mode = self.bcast(a, b, op.name())?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let c = av.last_dim();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match mode {
                    Bcast::Same => bv[i],
                    Bcast::Channel => bv[i % c],
                    Bcast::Scalar => bv[0],
                };
                f(x, y)
            })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        let ng = self.ng(&[a, b]);
        self.push(value, op, ng)
    }

    /// Elementwise sum; `b` may also be a per-channel vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        let ng = self.ng(&[x]);
        self.push(value, op, ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, Op::MulScalar(x, s), |v| v * s)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v < T::ZERO) {
            return Err(Error::Numeric {
                op: "sqrt",
                detail: format!("negative input {bad:?}"),
            });
        }
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn squared_relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::SquaredRelu(x), |v| {
            let r = v.max(T::ZERO);
            r * r
        })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn clamp01(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Clamp01(x), |v| v.max(T::ZERO).min(T::ONE))
    }

    /// `a[.., K] @ b[K, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if bv.shape().len() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(contract(format!(
                "matmul: {:?} @ {:?} is not defined",
                av.shape(),
                bv.shape()
            )));
        }
        let (k, m) = (bv.shape()[0], bv.shape()[1]);
        let rows = av.rows();
        let data = kernels::matmul(av.data(), bv.data(), rows, k, m);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let value = Tensor::new(&shape, data)?;
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// Per-pixel projection of an `(H, W, C)` map by `w[C, Cout]` plus optional bias.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.shape().len() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(contract(format!(
                "conv1x1: input {:?} does not match projection {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (k, m) = (wv.shape()[0], wv.shape()[1]);
        let mut data = kernels::matmul(xv.data(), wv.data(), xv.rows(), k, m);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [m] {
                return Err(contract(format!("conv1x1: bias {:?} for {m} outputs", bv.shape())));
            }
            for row in data.chunks_exact_mut(m) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let value = Tensor::new(&shape, data)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(value, Op::Conv1x1 { x, w, b }, ng)
    }

    /// Depth-wise 3x3 convolution with zero same-padding; kernel `(3, 3, C)`.
    pub fn dwconv3x3(&mut self, x: Var, k: Var) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(k);
        if xv.shape().len() != 3 || kv.shape() != [3, 3, xv.shape()[2]] {
            return Err(contract(format!(
                "dwconv3x3: input {:?} with kernel {:?}",
                xv.shape(),
                kv.shape()
            )));
        }
        let data = kernels::dwconv3x3(xv, kv);
        let value = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(&[x, k]);
        self.push(value, Op::DwConv3x3 { x, k }, ng)
    }

    /// Dense 3x3 convolution with zero same-padding; kernel `(3, 3, Cin, Cout)`.
    pub fn conv3x3(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(k);
        if xv.shape().len() != 3 || kv.shape().len() != 4 || kv.shape()[..3] != [3, 3, xv.shape()[2]] {
            return Err(contract(format!(
                "conv3x3: input {:?} with kernel {:?}",
                xv.shape(),
                kv.shape()
            )));
        }
        let co = kv.shape()[3];
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [co] {
                    return Err(contract(format!("conv3x3: bias {:?} for {co} outputs", bv.shape())));
                }
                Some(bv)
            }
            None => None,
        };
        let data = kernels::conv3x3(xv, kv, bias);
        let value = Tensor::new(&[xv.shape()[0], xv.shape()[1], co], data)?;
        let mut deps = vec![x, k];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(value, Op::Conv3x3 { x, k, b }, ng)
    }

    /// Normalizes over the last axis (epsilon 1e-5) then applies scale and offset.
    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if self.shape(scale) != [c] || self.shape(offset) != [c] {
            return Err(contract(format!(
                "layer_norm: {c} channels with scale {:?} and offset {:?}",
                self.shape(scale),
                self.shape(offset)
            )));
        }
        let (y, xhat, inv) = kernels::layer_norm(
            xv.data(),
            self.value(scale).data(),
            self.value(offset).data(),
            c,
        );
        let value = Tensor::new(xv.shape(), y)?;
        let ng = self.ng(&[x, scale, offset]);
        let (xhat, inv) = if ng { (xhat, inv) } else { (Vec::new(), Vec::new()) };
        self.push(
            value,
            Op::LayerNorm {
                x,
                scale,
                offset,
                xhat,
                inv,
            },
            ng,
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let sa = av.shape();
        let sb = bv.shape();
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(contract(format!("concat_channels: {sa:?} and {sb:?}")));
        }
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks_exact(ca).zip(bv.data().chunks_exact(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(&shape, data)?;
        let ng = self.ng(&[a, b]);
        self.push(value, Op::ConcatChannels(a, b), ng)
    }

    /// Channels `start..start+len` of the last axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if start + len > c {
            return Err(contract(format!("slice_channels: {start}+{len} exceeds {c}")));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, data)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::SliceChannels { x, start }, ng)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).mean();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = s2d::pixel_unshuffle(self.value(x), r)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::PixelUnshuffle(x, r), ng)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = s2d::pixel_shuffle(self.value(x), r)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::PixelShuffle(x, r), ng)
    }

    /// Bi-WKV over all leading positions of `k`/`v` flattened into one
    /// token sequence. `w` is the effective (non-negative) decay.
    pub fn biwkv(&mut self, k: Var, v: Var, w: Var, u: Var) -> Result<Var> {
        let (kt, vt, params) = self.wkv_inputs(k, v, w, u)?;
        let out = wkv::biwkv_scan(&kt, &vt, &params)?;
        let value = out.reshape(self.shape(k))?;
        let ng = self.ng(&[k, v, w, u]);
        self.push(value, Op::BiWkv { k, v, w, u }, ng)
    }

    fn wkv_inputs(&self, k: Var, v: Var, w: Var, u: Var) -> Result<(Tensor<T>, Tensor<T>, WkvParams<T>)> {
        let kv = self.value(k);
        let c = kv.last_dim();
        let seq = [1, kv.rows(), c];
        let kt = kv.clone().reshape(&seq)?;
        let vt = self.value(v).clone().reshape(&seq)?;
        let params = WkvParams::new(self.value(w).data().to_vec(), self.value(u).data().to_vec())?;
        Ok((kt, vt, params))
    }

    /// Per-channel valid correlation with a constant `(kh, kw)` kernel.
    pub fn filter2d(&mut self, x: Var, kernel: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3
            || kernel.shape().len() != 2
            || kernel.shape()[0] > xv.shape()[0]
            || kernel.shape()[1] > xv.shape()[1]
        {
            return Err(contract(format!(
                "filter2d: input {:?} with kernel {:?}",
                xv.shape(),
                kernel.shape()
            )));
        }
        let (data, shape) = kernels::filter2d_valid(xv, &kernel);
        let value = Tensor::new(&shape, data)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::Filter2d { x, kernel }, ng)
    }

    /// 2x2 average pooling (odd trailing rows/columns are dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 || xv.shape()[0] < 2 || xv.shape()[1] < 2 {
            return Err(contract(format!("avg_pool2: input {:?}", xv.shape())));
        }
        let (data, shape) = kernels::avg_pool2(xv);
        let value = Tensor::new(&shape, data)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::AvgPool2(x), ng)
    }

    /// Radial chroma clip and intensity clamp on a `(.., 3)` HVI map.
    pub fn hvi_clip(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.last_dim() != 3 {
            return Err(contract(format!("hvi_clip: input {:?}", xv.shape())));
        }
        let mut data = Vec::with_capacity(xv.len());
        for p in xv.data().chunks_exact(3) {
            data.extend_from_slice(&clip_hvi([p[0], p[1], p[2]]));
        }
        let value = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::HviClip(x), ng)
    }

    /// HVI -> RGB on a `(.., 3)` map whose chroma magnitude is within 1.
    pub fn phvit(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.last_dim() != 3 {
            return Err(contract(format!("phvit: input {:?}", xv.shape())));
        }
        let mut data = Vec::with_capacity(xv.len());
        for p in xv.data().chunks_exact(3) {
            let (rgb, _) = hvi_to_rgb_jacobian([p[0], p[1], p[2]]);
            data.extend_from_slice(&rgb);
        }
        let value = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::Phvit(x), ng)
    }

    /// Reverse sweep from a scalar. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(contract("backward called twice on the same tape"));
        }
        if !self.grad_enabled {
            return Err(contract("backward on an inference tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::ONE));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: Var, delta: Vec<T>) -> Result<()> {
        if !self.nodes[target.0].needs_grad {
            return Ok(());
        }
        let op = self.nodes[target.0].op.name();
        if let Some(i) = delta.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                op,
                detail: format!("non-finite gradient at flat index {i}"),
            });
        }
        match &mut grads[target.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(target), delta)?);
            }
        }
        Ok(())
    }

    /// Reduces a full-shape gradient to the broadcast operand's shape.
    fn reduce_to(&self, b: Var, mode: Bcast, full: Vec<T>) -> Vec<T> {
        match mode {
            Bcast::Same => full,
            Bcast::Channel => {
                let c = self.value(b).len();
                let mut out = vec![T::ZERO; c];
                for row in full.chunks_exact(c) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            }
            Bcast::Scalar => {
                let mut acc = T::ZERO;
                for v in full {
                    acc += v;
                }
                vec![acc; self.value(b).len()]
            }
        }
    }

    fn operand(&self, a: Var, b: Var) -> (Bcast, &[T], &[T], usize) {
        let mode = self.bcast(a, b, "").expect("validated in forward");
        (mode, self.value(a).data(), self.value(b).data(), self.value(a).last_dim())
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let out = node.value.data();
        let pick = |mode: Bcast, bd: &[T], i: usize, c: usize| match mode {
            Bcast::Same => bd[i],
            Bcast::Channel => bd[i % c],
            Bcast::Scalar => bd[0],
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::Add(a, b) => {
                let (mode, ..) = self.operand(a, b);
                self.accumulate(grads, a, gd.to_vec())?;
                let gb = self.reduce_to(b, mode, gd.to_vec());
                self.accumulate(grads, b, gb)?;
            }
            &Op::Sub(a, b) => {
                let (mode, ..) = self.operand(a, b);
                self.accumulate(grads, a, gd.to_vec())?;
                let gb = self.reduce_to(b, mode, gd.iter().map(|&x| -x).collect());
                self.accumulate(grads, b, gb)?;
            }
            &Op::Mul(a, b) => {
                let (mode, ad, bd, c) = self.operand(a, b);
                let ga = gd.iter().enumerate().map(|(i, &x)| x * pick(mode, bd, i, c)).collect();
                let gb_full = gd.iter().zip(ad).map(|(&x, &av)| x * av).collect();
                let gb = self.reduce_to(b, mode, gb_full);
                self.accumulate(grads, a, ga)?;
                self.accumulate(grads, b, gb)?;
            }
            &Op::Div(a, b) => {
                let (mode, _, bd, c) = self.operand(a, b);
                let ga = gd.iter().enumerate().map(|(i, &x)| x / pick(mode, bd, i, c)).collect();
                let gb_full = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| -x * out[i] / pick(mode, bd, i, c))
                    .collect();
                let gb = self.reduce_to(b, mode, gb_full);
                self.accumulate(grads, a, ga)?;
                self.accumulate(grads, b, gb)?;
            }
            &Op::AddScalar(x) => self.accumulate(grads, x, gd.to_vec())?,
            &Op::MulScalar(x, s) => self.accumulate(grads, x, gd.iter().map(|&v| v * s).collect())?,
            &Op::Abs(x) => {
                let xd = self.value(x).data();
                let d = gd
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| {
                        if xv > T::ZERO {
                            gv
                        } else if xv < T::ZERO {
                            -gv
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                self.accumulate(grads, x, d)?;
            }
            &Op::Sqrt(x) => {
                let half = T::from_f64(0.5);
                let d = gd
                    .iter()
                    .zip(out)
                    .map(|(&gv, &y)| if y > T::ZERO { gv * half / y } else { T::ZERO })
                    .collect();
                self.accumulate(grads, x, d)?;
            }
            &Op::Sigmoid(x) => {
                let d = gd.iter().zip(out).map(|(&gv, &y)| gv * y * (T::ONE - y)).collect();
                self.accumulate(grads, x, d)?;
            }
            &Op::Tanh(x) => {
                let d = gd.iter().zip(out).map(|(&gv, &y)| gv * (T::ONE - y * y)).collect();
                self.accumulate(grads, x, d)?;
            }
            &Op::SquaredRelu(x) => {
                let two = T::from_f64(2.0);
                let xd = self.value(x).data();
                let d = gd
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > T::ZERO { gv * two * xv } else { T::ZERO })
                    .collect();
                self.accumulate(grads, x, d)?;
            }
            &Op::Softplus(x) => {
                let xd = self.value(x).data();
                let d = gd.iter().zip(xd).map(|(&gv, &xv)| gv * sigmoid(xv)).collect();
                self.accumulate(grads, x, d)?;
            }
            &Op::Clamp01(x) => {
                let xd = self.value(x).data();
                let d = gd
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv >= T::ZERO && xv <= T::ONE { gv } else { T::ZERO })
                    .collect();
                self.accumulate(grads, x, d)?;
            }
            &Op::MatMul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (k, m) = (bv.shape()[0], bv.shape()[1]);
                let (da, db) = kernels::matmul_backward(av.data(), bv.data(), gd, av.rows(), k, m);
                self.accumulate(grads, a, da)?;
                self.accumulate(grads, b, db)?;
            }
            &Op::Conv1x1 { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (k, m) = (wv.shape()[0], wv.shape()[1]);
                let (dx, dw) = kernels::matmul_backward(xv.data(), wv.data(), gd, xv.rows(), k, m);
                self.accumulate(grads, x, dx)?;
                self.accumulate(grads, w, dw)?;
                if let Some(b) = b {
                    let db = self.reduce_to(b, Bcast::Channel, gd.to_vec());
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::DwConv3x3 { x, k } => {
                let (dx, dk) = kernels::dwconv3x3_backward(self.value(x), self.value(k), gd);
                self.accumulate(grads, x, dx)?;
                self.accumulate(grads, k, dk)?;
            }
            &Op::Conv3x3 { x, k, b } => {
                let (dx, dk, db) = kernels::conv3x3_backward(self.value(x), self.value(k), gd);
                self.accumulate(grads, x, dx)?;
                self.accumulate(grads, k, dk)?;
                if let Some(b) = b {
                    self.accumulate(grads, b, db)?;
                }
            }
            Op::LayerNorm {
                x,
                scale,
                offset,
                xhat,
                inv,
            } => {
                let c = self.value(*x).last_dim();
                let (dx, ds, db) = kernels::layer_norm_backward(xhat, inv, self.value(*scale).data(), gd, c);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *scale, ds)?;
                self.accumulate(grads, *offset, db)?;
            }
            &Op::ConcatChannels(a, b) => {
                let ca = self.value(a).last_dim();
                let cb = self.value(b).last_dim();
                let mut ga = Vec::with_capacity(self.value(a).len());
                let mut gb = Vec::with_capacity(self.value(b).len());
                for row in gd.chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, a, ga)?;
                self.accumulate(grads, b, gb)?;
            }
            &Op::SliceChannels { x, start } => {
                let c = self.value(x).last_dim();
                let len = node.value.last_dim();
                let mut dx = vec![T::ZERO; self.value(x).len()];
                for (drow, grow) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(len)) {
                    drow[start..start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, x, dx)?;
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                let v = gd[0] / T::from_f64(n as f64);
                self.accumulate(grads, x, vec![v; n])?;
            }
            &Op::Reshape(x) => self.accumulate(grads, x, gd.to_vec())?,
            &Op::PixelUnshuffle(x, r) => {
                let back = s2d::pixel_shuffle(g, r)?;
                self.accumulate(grads, x, back.into_data())?;
            }
            &Op::PixelShuffle(x, r) => {
                let back = s2d::pixel_unshuffle(g, r)?;
                self.accumulate(grads, x, back.into_data())?;
            }
            &Op::BiWkv { k, v, w, u } => {
                let (kt, vt, params) = self.wkv_inputs(k, v, w, u)?;
                let up = g.clone().reshape(kt.shape())?;
                let wg = wkv::biwkv_backward(&kt, &vt, &params, &up)?;
                self.accumulate(grads, k, wg.dk.into_data())?;
                self.accumulate(grads, v, wg.dv.into_data())?;
                self.accumulate(grads, w, wg.dw)?;
                self.accumulate(grads, u, wg.du)?;
            }
            Op::Filter2d { x, kernel } => {
                let dx = kernels::filter2d_valid_backward(self.shape(*x), kernel, gd);
                self.accumulate(grads, *x, dx)?;
            }
            &Op::AvgPool2(x) => {
                let dx = kernels::avg_pool2_backward(self.shape(x), gd);
                self.accumulate(grads, x, dx)?;
            }
            &Op::HviClip(x) => {
                let xd = self.value(x).data();
                let mut dx = Vec::with_capacity(xd.len());
                for (p, gp) in xd.chunks_exact(3).zip(gd.chunks_exact(3)) {
                    let (hc, vc, iv) = (p[0], p[1], p[2]);
                    let s = (hc * hc + vc * vc).sqrt();
                    if s > T::ONE {
                        let s3 = s * s * s;
                        // d(c/|c|) = I/|c| - c c^T/|c|^3
                        let j00 = T::ONE / s - hc * hc / s3;
                        let j01 = -hc * vc / s3;
                        let j11 = T::ONE / s - vc * vc / s3;
                        dx.push(gp[0] * j00 + gp[1] * j01);
                        dx.push(gp[0] * j01 + gp[1] * j11);
                    } else {
                        dx.push(gp[0]);
                        dx.push(gp[1]);
                    }
                    dx.push(if iv >= T::ZERO && iv <= T::ONE { gp[2] } else { T::ZERO });
                }
                self.accumulate(grads, x, dx)?;
            }
            &Op::Phvit(x) => {
                let xd = self.value(x).data();
                let mut dx = Vec::with_capacity(xd.len());
                for (p, gp) in xd.chunks_exact(3).zip(gd.chunks_exact(3)) {
                    let (_, jac) = hvi_to_rgb_jacobian([p[0], p[1], p[2]]);
                    for i in 0..3 {
                        dx.push(gp[0] * jac[0][i] + gp[1] * jac[1][i] + gp[2] * jac[2][i]);
                    }
                }
                self.accumulate(grads, x, dx)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    x.max(T::ZERO) + (-x.abs()).exp().ln_1p()
}

/// Result of a reverse sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`, if `v` was reachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter leaves and their gradients, in recording order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.wrt(v)))
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.params() {
            if let Some(g) = g {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
