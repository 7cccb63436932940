//! Dense tensors on an explicit reverse-mode tape.
//!
//! A [`Tape`] owns every tensor of one forward pass. Operations append nodes
//! in construction order, which is already topological (parents always carry
//! smaller ids), so [`Tape::backward`] is a single reverse sweep. Tapes are
//! confined to one logical thread; independent tapes may run concurrently.
//!
//! All kernels use a fixed sequential reduction order, so the same seeded
//! computation is bit-identical across runs.

mod flops;
mod kernels;

pub use flops::FlopCounter;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded tensor: value, optional gradient, and the op that made it.
#[derive(Debug)]
pub struct Tensor<T: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
    op: Op<T>,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Conv2d {
        x: TensorId,
        kern: TensorId,
        bias: Option<TensorId>,
        dims: kernels::ConvDims,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    SoftmaxLastDim {
        x: TensorId,
    },
    /// out[i] = x[map[i]]; backward scatter-adds in ascending i.
    Gather {
        x: TensorId,
        map: Arc<Vec<u32>>,
    },
    Reshape {
        x: TensorId,
    },
    PadZero2d {
        x: TensorId,
        top: usize,
        left: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    AddScaled {
        a: TensorId,
        b: TensorId,
        alpha: T,
    },
    Scale {
        x: TensorId,
        c: T,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    AddBiasLastDim {
        x: TensorId,
        bias: TensorId,
    },
    Gelu {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Sum {
        x: TensorId,
    },
    /// Adds mask[(g / heads) % windows] to scores[g] for scores [G, t, t].
    /// The mask is constant, so backward is a pass-through.
    AddWindowMask {
        x: TensorId,
    },
    /// Adds table[rel[p*t+q], g % heads] to scores[g, p, q].
    RelPosBias {
        x: TensorId,
        table: TensorId,
        rel: Arc<Vec<u32>>,
        heads: usize,
    },
    BceWithLogits {
        logits: TensorId,
        targets: Arc<Vec<T>>,
    },
    SmoothL1 {
        pred: TensorId,
        target: Arc<Vec<T>>,
        beta: T,
    },
}

/// Tape of one forward pass plus its FLOP counter.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
    flops: FlopCounter,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// GELU with the tanh approximation:
/// 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: FlopCounter::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient is tracked through it.
    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize]) -> Result<TensorId> {
        self.check_leaf(&data, shape)?;
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Parameter leaf; receives a gradient on backward (zero if unused).
    pub fn leaf_grad(&mut self, data: Vec<T>, shape: &[usize]) -> Result<TensorId> {
        self.check_leaf(&data, shape)?;
        Ok(self.push(shape.to_vec(), data, true, Op::Leaf))
    }

    fn check_leaf(&self, data: &[T], shape: &[usize]) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Ids from before the call are invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> T {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn flop_counter(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops.reset();
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── arithmetic ops ───────────────────────────────────────────────

    /// Batched matrix product of [.., m, k] and [.., k, n].
    ///
    /// Batch dims must match exactly, or `b` may be a plain [k, n] matrix
    /// shared across the whole batch. Counts batch*m*n*k MACs.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_tagged(a, b, "matmul")
    }

    /// Same as [`Tape::matmul`] with a custom FLOP-breakdown key.
    pub fn matmul_tagged(
        &mut self,
        a: TensorId,
        b: TensorId,
        tag: &'static str,
    ) -> Result<TensorId> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank >= 2 operands, got {ashape:?} x {bshape:?}"
            )));
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {ashape:?} x {bshape:?}"
            )));
        }
        let batch_dims = &ashape[..ashape.len() - 2];
        let b_shared = bshape.len() == 2;
        if !b_shared && batch_dims != &bshape[..bshape.len() - 2] {
            return Err(Error::Shape(format!(
                "matmul batch dimensions disagree: {ashape:?} x {bshape:?}"
            )));
        }
        let batch = batch_dims.iter().product::<usize>().max(1);
        let mut out_shape = batch_dims.to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let mut out = vec![T::ZERO; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let bs = if b_shared { 0 } else { bi * k * n };
                kernels::matmul_acc(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[bs..bs + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.flops.add(tag, (batch * m * n * k) as u64);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            },
        ))
    }

    /// Cross-correlation conv; output extent must divide exactly
    /// ((H + 2*pad - kh) % stride == 0), otherwise a shape error.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kern: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kern).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d wants x [B,C,H,W] and kernel [Co,Ci,kh,kw], got {xs:?} and {ks:?}"
            )));
        }
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c_in {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {xs:?} vs kernel {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let span_h = h as i64 + 2 * pad as i64 - kh as i64;
        let span_w = w as i64 + 2 * pad as i64 - kw as i64;
        if span_h < 0 || span_w < 0 || span_h % stride as i64 != 0 || span_w % stride as i64 != 0 {
            return Err(Error::Shape(format!(
                "conv2d output size not integral for input {h}x{w}, kernel {kh}x{kw}, \
                 stride {stride}, pad {pad}"
            )));
        }
        let h_out = (span_h / stride as i64 + 1) as usize;
        let w_out = (span_w / stride as i64 + 1) as usize;
        if let Some(bid) = bias {
            let bs = self.shape(bid);
            if bs != [c_out] {
                return Err(Error::Shape(format!(
                    "conv2d bias shape {bs:?} does not match {c_out} output channels"
                )));
            }
        }
        let dims = kernels::ConvDims {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
        };
        let mut out = vec![T::ZERO; batch * c_out * h_out * w_out];
        {
            let xd = self.data(x);
            let kd = self.data(kern);
            let bd = bias.map(|b| self.data(b).to_vec());
            kernels::conv2d_forward(xd, kd, bd.as_deref(), &mut out, &dims);
        }
        self.flops.add(
            "conv",
            (batch * c_out * h_out * w_out * c_in * kh * kw) as u64,
        );
        let rg = self.requires(x)
            || self.requires(kern)
            || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            vec![batch, c_out, h_out, w_out],
            out,
            rg,
            Op::Conv2d { x, kern, bias, dims },
        ))
    }

    /// Per-slice normalization over the last dimension, then affine.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| {
            Error::Shape("layer_norm input must have at least one dimension".into())
        })?;
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last dim {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = numel(&xs) / d;
        let mut out = vec![T::ZERO; rows * d];
        {
            let xd = self.data(x);
            let gd = self.data(gamma).to_vec();
            let bd = self.data(beta).to_vec();
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let (mean, rstd) = layer_norm_stats(row, eps);
                let o = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    o[j] = gd[j] * ((row[j] - mean) * rstd) + bd[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(xs, out, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Numerically stable softmax along the last dimension.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| {
            Error::Shape("softmax input must have at least one dimension".into())
        })?;
        let rows = numel(&xs) / d;
        let mut out = vec![T::ZERO; rows * d];
        {
            let xd = self.data(x);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let o = &mut out[r * d..(r + 1) * d];
                let mut mx = row[0];
                for &v in row.iter() {
                    mx = mx.max(v);
                }
                let mut sum = T::ZERO;
                for j in 0..d {
                    let e = (row[j] - mx).exp();
                    o[j] = e;
                    sum += e;
                }
                for j in 0..d {
                    o[j] = o[j] / sum;
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(xs, out, rg, Op::SoftmaxLastDim { x }))
    }

    /// Data-movement: out[i] = x[map[i]]. `out_shape` sizes the result.
    pub fn gather(&mut self, x: TensorId, map: Arc<Vec<u32>>, out_shape: &[usize]) -> Result<TensorId> {
        let n_in = numel(self.shape(x));
        if numel(out_shape) != map.len() {
            return Err(Error::Shape(format!(
                "gather map length {} does not match output shape {out_shape:?}",
                map.len()
            )));
        }
        debug_assert!(map.iter().all(|&i| (i as usize) < n_in));
        let _ = n_in;
        let mut out = Vec::with_capacity(map.len());
        {
            let xd = self.data(x);
            out.extend(map.iter().map(|&i| xd[i as usize]));
        }
        let rg = self.requires(x);
        Ok(self.push(out_shape.to_vec(), out, rg, Op::Gather { x, map }))
    }

    /// Reinterpret under a new shape with the same element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape { x }))
    }

    /// Axis permutation, e.g. perm = [0, 2, 1, 3].
    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if perm.len() != xs.len() {
            return Err(Error::Shape(format!(
                "permute {perm:?} does not match rank of {xs:?}"
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Shape(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        // strides of the input, walked in permuted order
        let mut in_strides = vec![1usize; xs.len()];
        for i in (0..xs.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * xs[i + 1];
        }
        let n = numel(&xs);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            let mut src = 0;
            for (o, &p) in perm.iter().enumerate() {
                src += idx[o] * in_strides[p];
            }
            map.push(src as u32);
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.gather(x, Arc::new(map), &out_shape)
    }

    /// Nearest-neighbor 2x upsampling of [B,C,H,W].
    pub fn upsample_nearest_2x(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!(
                "upsample_nearest_2x wants [B,C,H,W], got {xs:?}"
            )));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut map = Vec::with_capacity(b * c * 4 * h * w);
        for p in 0..b * c {
            let base = p * h * w;
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    map.push((base + (oy / 2) * w + ox / 2) as u32);
                }
            }
        }
        self.gather(x, Arc::new(map), &[b, c, 2 * h, 2 * w])
    }

    /// Zero-pads the spatial dims of [B,C,H,W] (possibly asymmetrically).
    pub fn pad_zero_2d(
        &mut self,
        x: TensorId,
        top: usize,
        left: usize,
        bottom: usize,
        right: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("pad_zero_2d wants [B,C,H,W], got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h + top + bottom, w + left + right);
        let mut out = vec![T::ZERO; b * c * ho * wo];
        {
            let xd = self.data(x);
            for p in 0..b * c {
                for y in 0..h {
                    let src = p * h * w + y * w;
                    let dst = p * ho * wo + (y + top) * wo + left;
                    out[dst..dst + w].copy_from_slice(&xd[src..src + w]);
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![b, c, ho, wo], out, rg, Op::PadZero2d { x, top, left }))
    }

    /// Elementwise a + b (identical shapes).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, rg, Op::Add { a, b }))
    }

    /// a + alpha * b with a fixed scalar weight.
    pub fn add_scaled(&mut self, a: TensorId, b: TensorId, alpha: T) -> Result<TensorId> {
        self.check_same_shape(a, b, "add_scaled")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + alpha * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, rg, Op::AddScaled { a, b, alpha }))
    }

    /// c * x for a fixed scalar c.
    pub fn scale(&mut self, x: TensorId, c: T) -> Result<TensorId> {
        let data: Vec<T> = self.data(x).iter().map(|&v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape, data, rg, Op::Scale { x, c }))
    }

    /// Elementwise product (identical shapes).
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, rg, Op::Mul { a, b }))
    }

    /// Broadcasts bias [d] over the rows of x [.., d].
    pub fn add_bias_lastdim(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match last dim of {xs:?}",
                self.shape(bias)
            )));
        }
        let rows = numel(&xs) / d;
        let mut data = self.data(x).to_vec();
        {
            let bd = self.data(bias).to_vec();
            for r in 0..rows {
                for j in 0..d {
                    data[r * d + j] += bd[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(xs, data, rg, Op::AddBiasLastDim { x, bias }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| {
                let xf = v.to_f64();
                let u = SQRT_2_OVER_PI * (xf + GELU_COEF * xf * xf * xf);
                T::from_f64(0.5 * xf * (1.0 + u.tanh()))
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape, data, rg, Op::Gelu { x }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<T> = self.data(x).iter().map(|&v| v.max(T::ZERO)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape, data, rg, Op::Relu { x }))
    }

    /// Full reduction to a single element, sequential order.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let mut acc = T::ZERO;
        for &v in self.data(x) {
            acc += v;
        }
        let rg = self.requires(x);
        Ok(self.push(vec![1], vec![acc], rg, Op::Sum { x }))
    }

    /// Adds a per-window additive bias to scores [G, t, t], where window
    /// identity cycles as (g / heads) % windows.
    pub fn add_window_mask(
        &mut self,
        x: TensorId,
        mask: Arc<Vec<T>>,
        windows: usize,
        heads: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!(
                "add_window_mask wants [G,t,t] scores, got {xs:?}"
            )));
        }
        let (g_total, t) = (xs[0], xs[1]);
        if xs[1] != xs[2] || mask.len() != windows * t * t || g_total % (windows * heads) != 0 {
            return Err(Error::Shape(format!(
                "window mask of {windows} windows / {heads} heads does not tile scores {xs:?}"
            )));
        }
        let mut data = self.data(x).to_vec();
        for g in 0..g_total {
            let widx = (g / heads) % windows;
            let m = &mask[widx * t * t..(widx + 1) * t * t];
            let o = &mut data[g * t * t..(g + 1) * t * t];
            for j in 0..t * t {
                o[j] += m[j];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(xs, data, rg, Op::AddWindowMask { x }))
    }

    /// Adds a learned relative-position bias table [(2w-1)^2, heads] to
    /// scores [G, t, t]; `rel[p*t+q]` indexes the table row, head = g % heads.
    pub fn add_rel_pos_bias(
        &mut self,
        x: TensorId,
        table: TensorId,
        rel: Arc<Vec<u32>>,
        heads: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != xs[2] {
            return Err(Error::Shape(format!(
                "add_rel_pos_bias wants [G,t,t] scores, got {xs:?}"
            )));
        }
        let t = xs[1];
        if rel.len() != t * t || self.shape(table).len() != 2 || self.shape(table)[1] != heads {
            return Err(Error::Shape(
                "relative-position table does not match scores".into(),
            ));
        }
        let mut data = self.data(x).to_vec();
        {
            let td = self.data(table).to_vec();
            for g in 0..xs[0] {
                let h = g % heads;
                let o = &mut data[g * t * t..(g + 1) * t * t];
                for (j, &r) in rel.iter().enumerate() {
                    o[j] += td[r as usize * heads + h];
                }
            }
        }
        let rg = self.requires(x) || self.requires(table);
        Ok(self.push(xs, data, rg, Op::RelPosBias { x, table, rel, heads }))
    }

    /// Elementwise binary cross-entropy with logits against constant targets:
    /// max(z,0) - z*y + ln(1 + exp(-|z|)).
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: Arc<Vec<T>>) -> Result<TensorId> {
        let n = numel(self.shape(logits));
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "bce targets length {} vs {} logits",
                targets.len(),
                n
            )));
        }
        let data: Vec<T> = self
            .data(logits)
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| z.max(T::ZERO) - z * y + (T::ONE + (-z.abs()).exp()).ln())
            .collect();
        let shape = self.shape(logits).to_vec();
        let rg = self.requires(logits);
        Ok(self.push(shape, data, rg, Op::BceWithLogits { logits, targets }))
    }

    /// Elementwise smooth-L1 against constant targets:
    /// 0.5*d^2/beta for |d| < beta, |d| - 0.5*beta otherwise.
    pub fn smooth_l1(&mut self, pred: TensorId, target: Arc<Vec<T>>, beta: T) -> Result<TensorId> {
        let n = numel(self.shape(pred));
        if target.len() != n {
            return Err(Error::Shape(format!(
                "smooth_l1 target length {} vs {} predictions",
                target.len(),
                n
            )));
        }
        let half = T::from_f64(0.5);
        let data: Vec<T> = self
            .data(pred)
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| {
                let d = p - t;
                if d.abs() < beta {
                    half * d * d / beta
                } else {
                    d.abs() - half * beta
                }
            })
            .collect();
        let shape = self.shape(pred).to_vec();
        let rg = self.requires(pred);
        Ok(self.push(shape, data, rg, Op::SmoothL1 { pred, target, beta }))
    }

    fn check_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land on every
    /// requires_grad tensor; unused parameters get zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Numeric("backward on an empty tape".into()));
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Numeric(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut touched = vec![false; n];
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![T::ZERO; node.data.len()]);
            } else {
                node.grad = None;
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = T::ONE;
        } else {
            // Loss of constants: every parameter keeps its zero gradient.
            return Ok(());
        }
        touched[loss.0] = true;

        for i in (0..=loss.0).rev() {
            if !touched[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let updates = self.node_backward(i)?;
            for (pid, upd) in updates {
                let parent = &mut self.nodes[pid.0];
                if !parent.requires_grad {
                    continue;
                }
                let g = parent.grad.get_or_insert_with(|| vec![T::ZERO; parent.data.len()]);
                for (gv, uv) in g.iter_mut().zip(upd) {
                    *gv += uv;
                }
                touched[pid.0] = true;
            }
        }
        Ok(())
    }

    /// Gradient contributions of node i to each of its parents.
    fn node_backward(&self, i: usize) -> Result<Vec<(TensorId, Vec<T>)>> {
        let node = &self.nodes[i];
        let g = node.grad.as_ref().expect("touched node has a gradient");
        let mut out: Vec<(TensorId, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.requires(*a) {
                    let mut da = vec![T::ZERO; batch * m * k];
                    let bd = self.data(*b);
                    for bi in 0..batch {
                        let bs = if *b_shared { 0 } else { bi * k * n };
                        kernels::matmul_grad_a(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[bs..bs + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((*a, da));
                }
                if self.requires(*b) {
                    let mut db = vec![T::ZERO; self.data(*b).len()];
                    let ad = self.data(*a);
                    for bi in 0..batch {
                        let bs = if *b_shared { 0 } else { bi * k * n };
                        kernels::matmul_grad_b(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &mut db[bs..bs + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((*b, db));
                }
            }
            Op::Conv2d { x, kern, bias, dims } => {
                if self.requires(*x) {
                    let mut dx = vec![T::ZERO; self.data(*x).len()];
                    kernels::conv2d_grad_input(g, self.data(*kern), &mut dx, dims);
                    out.push((*x, dx));
                }
                let kern_req = self.requires(*kern);
                let bias_req = bias.map(|b| self.requires(b)).unwrap_or(false);
                if kern_req || bias_req {
                    let mut dk = vec![T::ZERO; self.data(*kern).len()];
                    let mut db = bias.map(|b| vec![T::ZERO; self.data(b).len()]);
                    kernels::conv2d_grad_kernel(g, self.data(*x), &mut dk, db.as_deref_mut(), dims);
                    if kern_req {
                        out.push((*kern, dk));
                    }
                    if bias_req {
                        out.push((bias.unwrap(), db.unwrap()));
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let d = self.shape(*gamma)[0];
                let rows = xd.len() / d;
                let mut dx = vec![T::ZERO; xd.len()];
                let mut dgamma = vec![T::ZERO; d];
                let mut dbeta = vec![T::ZERO; d];
                let dn = T::from_f64(d as f64);
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (mean, rstd) = layer_norm_stats(row, *eps);
                    let mut sum1 = T::ZERO;
                    let mut sum2 = T::ZERO;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dy = grow[j] * gd[j];
                        sum1 += dy;
                        sum2 += dy * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dy = grow[j] * gd[j];
                        dx[r * d + j] = rstd * (dy - sum1 / dn - xhat * sum2 / dn);
                    }
                }
                if self.requires(*x) {
                    out.push((*x, dx));
                }
                if self.requires(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.requires(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::SoftmaxLastDim { x } => {
                if self.requires(*x) {
                    let y = &node.data;
                    let d = *node.shape.last().unwrap();
                    let rows = y.len() / d;
                    let mut dx = vec![T::ZERO; y.len()];
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut dot = T::ZERO;
                        for j in 0..d {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..d {
                            dx[r * d + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Gather { x, map } => {
                if self.requires(*x) {
                    let mut dx = vec![T::ZERO; self.data(*x).len()];
                    for (j, &src) in map.iter().enumerate() {
                        dx[src as usize] += g[j];
                    }
                    out.push((*x, dx));
                }
            }
            Op::Reshape { x } => {
                if self.requires(*x) {
                    out.push((*x, g.clone()));
                }
            }
            Op::PadZero2d { x, top, left } => {
                if self.requires(*x) {
                    let xs = self.shape(*x);
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ho, wo) = (node.shape[2], node.shape[3]);
                    let mut dx = vec![T::ZERO; b * c * h * w];
                    for p in 0..b * c {
                        for y in 0..h {
                            let src = p * ho * wo + (y + top) * wo + left;
                            let dst = p * h * w + y * w;
                            for xj in 0..w {
                                dx[dst + xj] += g[src + xj];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    out.push((*a, g.clone()));
                }
                if self.requires(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::AddScaled { a, b, alpha } => {
                if self.requires(*a) {
                    out.push((*a, g.clone()));
                }
                if self.requires(*b) {
                    out.push((*b, g.iter().map(|&v| *alpha * v).collect()));
                }
            }
            Op::Scale { x, c } => {
                if self.requires(*x) {
                    out.push((*x, g.iter().map(|&v| *c * v).collect()));
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let bd = self.data(*b);
                    out.push((*a, g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect()));
                }
                if self.requires(*b) {
                    let ad = self.data(*a);
                    out.push((*b, g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect()));
                }
            }
            Op::AddBiasLastDim { x, bias } => {
                if self.requires(*x) {
                    out.push((*x, g.clone()));
                }
                if self.requires(*bias) {
                    let d = self.shape(*bias)[0];
                    let rows = g.len() / d;
                    let mut db = vec![T::ZERO; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::Gelu { x } => {
                if self.requires(*x) {
                    let xd = self.data(*x);
                    let dx: Vec<T> = xd
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gv)| {
                            let xf = v.to_f64();
                            let u = SQRT_2_OVER_PI * (xf + GELU_COEF * xf * xf * xf);
                            let th = u.tanh();
                            let sech2 = 1.0 - th * th;
                            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * xf * xf);
                            let d = 0.5 * (1.0 + th) + 0.5 * xf * sech2 * du;
                            gv * T::from_f64(d)
                        })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    let xd = self.data(*x);
                    let dx: Vec<T> = xd
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gv)| if v > T::ZERO { gv } else { T::ZERO })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Sum { x } => {
                if self.requires(*x) {
                    let n = self.data(*x).len();
                    out.push((*x, vec![g[0]; n]));
                }
            }
            Op::AddWindowMask { x, .. } => {
                if self.requires(*x) {
                    out.push((*x, g.clone()));
                }
            }
            Op::RelPosBias {
                x,
                table,
                rel,
                heads,
            } => {
                if self.requires(*x) {
                    out.push((*x, g.clone()));
                }
                if self.requires(*table) {
                    let t2 = rel.len();
                    let g_total = node.shape[0];
                    let mut dt = vec![T::ZERO; self.data(*table).len()];
                    for gi in 0..g_total {
                        let h = gi % heads;
                        let grow = &g[gi * t2..(gi + 1) * t2];
                        for (j, &r) in rel.iter().enumerate() {
                            dt[r as usize * heads + h] += grow[j];
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.requires(*logits) {
                    let zd = self.data(*logits);
                    let dx: Vec<T> = zd
                        .iter()
                        .zip(targets.iter())
                        .zip(g.iter())
                        .map(|((&z, &y), &gv)| gv * (stable_sigmoid(z) - y))
                        .collect();
                    out.push((*logits, dx));
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                if self.requires(*pred) {
                    let pd = self.data(*pred);
                    let dx: Vec<T> = pd
                        .iter()
                        .zip(target.iter())
                        .zip(g.iter())
                        .map(|((&p, &t), &gv)| {
                            let d = p - t;
                            let slope = if d.abs() < *beta {
                                d / *beta
                            } else if d > T::ZERO {
                                T::ONE
                            } else {
                                -T::ONE
                            };
                            gv * slope
                        })
                        .collect();
                    out.push((*pred, dx));
                }
            }
        }
        Ok(out)
    }
}

fn layer_norm_stats<T: Scalar>(row: &[T], eps: f64) -> (T, T) {
    let d = T::from_f64(row.len() as f64);
    let mut mean = T::ZERO;
    for &v in row {
        mean += v;
    }
    mean = mean / d;
    let mut var = T::ZERO;
    for &v in row {
        let c = v - mean;
        var += c * c;
    }
    var = var / d;
    let rstd = T::ONE / (var + T::from_f64(eps)).sqrt();
    (mean, rstd)
}

fn stable_sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::ZERO {
        T::ONE / (T::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::ONE + e)
    }
}

#[cfg(test)]
mod tests;
