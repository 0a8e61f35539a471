//! Reverse-mode tape. Operations execute eagerly and record themselves; the
//! tape's creation order is a topological order, so `backward` is a single
//! reverse sweep that visits each node exactly once and accumulates gradients
//! additively across fan-out.
//!
//! Elementwise binaries broadcast in exactly one pattern: a `[N,C,1,1]`
//! operand expands over the spatial axes of a `[N,C,H,W]` operand. Any other
//! shape mismatch is a dimension error.

use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use crate::tensor::{Real, Tensor};

pub type VarId = usize;

/// Which operand of a binary op is the `[N,C,1,1]` side.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    None,
    Left,
    Right,
}

/// Backward of a custom node: receives the upstream gradient and one
/// zero-initialized buffer per input to accumulate into.
pub type CustomBackward<T> = Box<dyn Fn(&[T], &mut [Vec<T>])>;

enum Op<T: Real> {
    Leaf,
    Add { a: VarId, b: VarId, bc: Bcast },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId, bc: Bcast },
    Div { a: VarId, b: VarId },
    Scale { a: VarId, c: T },
    Relu { a: VarId },
    Sigmoid { a: VarId },
    SqrtEps { a: VarId, eps: T },
    Abs { a: VarId },
    Clamp01 { a: VarId },
    Conv2d { input: VarId, weight: VarId, bias: VarId, stride: usize, pad: usize },
    ConvT2d { input: VarId, weight: VarId, bias: VarId, stride: usize, pad: usize },
    Linear { input: VarId, weight: VarId, bias: VarId },
    GlobalAvgPool { a: VarId },
    SpatialSum { a: VarId },
    ChannelSum { a: VarId },
    Reshape { a: VarId },
    UpsampleNearest { a: VarId, factor: usize },
    ChannelConcat { a: VarId, b: VarId },
    SumAll { a: VarId },
    MeanAll { a: VarId },
    Custom { inputs: Vec<VarId>, backward: CustomBackward<T> },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// The recorded computation of one forward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        self.nodes.len() - 1
    }

    /// Inserts a tensor as a differentiable input (gradient tracked if the
    /// tensor has `requires_grad`).
    pub fn leaf(&mut self, t: &Tensor<T>) -> VarId {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Inserts a tensor that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> VarId {
        self.push(t.shape.clone(), t.data.clone(), false, Op::Leaf)
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: VarId) -> &[T] {
        &self.nodes[id].data
    }

    pub fn to_tensor(&self, id: VarId) -> Tensor<T> {
        Tensor {
            shape: self.nodes[id].shape.clone(),
            data: self.nodes[id].data.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Gradient buffer of a node, populated by `backward`.
    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.nodes[id].grad.as_deref()
    }

    fn rg(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    fn bcast_of(&self, op: &'static str, a: VarId, b: VarId) -> Result<Bcast> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa == sb {
            return Ok(Bcast::None);
        }
        let chan = |s: &[usize]| s.len() == 4 && s[2] == 1 && s[3] == 1;
        if sa.len() == 4 && sb.len() == 4 && sa[0] == sb[0] && sa[1] == sb[1] {
            if chan(sb) {
                return Ok(Bcast::Right);
            }
            if chan(sa) {
                return Ok(Bcast::Left);
            }
        }
        Err(Error::dim(op, format!("incompatible shapes {sa:?} and {sb:?}")))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let bc = self.bcast_of("add", a, b)?;
        let (big, small) = match bc {
            Bcast::Left => (b, a),
            _ => (a, b),
        };
        let shape = self.nodes[big].shape.clone();
        let mut out = self.nodes[big].data.clone();
        match bc {
            Bcast::None => axpy(&mut out, &self.nodes[small].data),
            _ => {
                let [n, c, h, w] = shape4(&shape);
                let sm = &self.nodes[small].data;
                for ni in 0..n {
                    for ci in 0..c {
                        let v = sm[ni * c + ci];
                        let base = (ni * c + ci) * h * w;
                        for p in &mut out[base..base + h * w] {
                            *p += v;
                        }
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Add { a, b, bc }))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::dim(
                "sub",
                format!("incompatible shapes {:?} and {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let data: Vec<T> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, data, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let bc = self.bcast_of("mul", a, b)?;
        let (big, small) = match bc {
            Bcast::Left => (b, a),
            _ => (a, b),
        };
        let shape = self.nodes[big].shape.clone();
        let data = match bc {
            Bcast::None => self.nodes[a]
                .data
                .iter()
                .zip(&self.nodes[b].data)
                .map(|(&x, &y)| x * y)
                .collect(),
            _ => {
                let [n, c, h, w] = shape4(&shape);
                let sm = &self.nodes[small].data;
                let bg = &self.nodes[big].data;
                let mut out = vec![T::zero(); bg.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let v = sm[ni * c + ci];
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            out[base + p] = bg[base + p] * v;
                        }
                    }
                }
                out
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Mul { a, b, bc }))
    }

    /// Elementwise division; shapes must match exactly.
    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::dim(
                "div",
                format!("incompatible shapes {:?} and {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let data: Vec<T> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x / y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, data, rg, Op::Div { a, b }))
    }

    pub fn scale(&mut self, a: VarId, c: T) -> VarId {
        let data: Vec<T> = self.nodes[a].data.iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let data: Vec<T> = self.nodes[a].data.iter().map(|&x| x.max(T::zero())).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let one = T::one();
        let data: Vec<T> = self.nodes[a].data.iter().map(|&x| one / (one + (-x).exp())).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Sigmoid { a })
    }

    /// `sqrt(x + eps)`; the epsilon keeps the derivative finite at zero.
    pub fn sqrt_eps(&mut self, a: VarId, eps: T) -> VarId {
        let data: Vec<T> = self.nodes[a].data.iter().map(|&x| (x + eps).sqrt()).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::SqrtEps { a, eps })
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        let data: Vec<T> = self.nodes[a].data.iter().map(|&x| x.abs()).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Abs { a })
    }

    /// Clamp to `[0,1]`. Gradient passes only where the input is strictly
    /// inside the interval.
    pub fn clamp01(&mut self, a: VarId) -> VarId {
        let (zero, one) = (T::zero(), T::one());
        let data: Vec<T> = self.nodes[a].data.iter().map(|&x| x.max(zero).min(one)).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Clamp01 { a })
    }

    /// Cross-correlation (no kernel flip): input `[N,C,H,W]`, weight
    /// `[O,C,k,k]` with odd `k`, bias `[O]`.
    pub fn conv2d(&mut self, input: VarId, weight: VarId, bias: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let si = self.nodes[input].shape.clone();
        let sw = self.nodes[weight].shape.clone();
        let sb = self.nodes[bias].shape.clone();
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::dim("conv2d", format!("need 4-D input/weight, got {si:?} / {sw:?}")));
        }
        let [n, c, h, w] = shape4(&si);
        let (o, wc, k) = (sw[0], sw[1], sw[2]);
        if sw[3] != k || k % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel must be square with odd size, got {sw:?}")));
        }
        if wc != c {
            return Err(Error::dim("conv2d", format!("input has {c} channels, weight expects {wc}")));
        }
        if sb != [o] {
            return Err(Error::dim("conv2d", format!("bias shape {sb:?} does not match {o} output channels")));
        }
        let geom = ConvGeom::conv(h, w, k, stride, pad).ok_or_else(|| {
            Error::dim(
                "conv2d",
                format!("spatial {h}x{w} with k={k} stride={stride} pad={pad} has no integral output size"),
            )
        })?;
        let (oh, ow) = (geom.out_h, geom.out_w);
        let ckk = c * k * k;
        let cols = oh * ow;
        let mut out = vec![T::zero(); n * o * cols];
        let mut col = vec![T::zero(); ckk * cols];
        for ni in 0..n {
            im2col(&self.nodes[input].data[ni * c * h * w..(ni + 1) * c * h * w], c, &geom, &mut col);
            gemm_nn(
                o,
                ckk,
                cols,
                &self.nodes[weight].data,
                &col,
                &mut out[ni * o * cols..(ni + 1) * o * cols],
            );
            for oc in 0..o {
                let bv = self.nodes[bias].data[oc];
                for p in &mut out[(ni * o + oc) * cols..(ni * o + oc + 1) * cols] {
                    *p += bv;
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(vec![n, o, oh, ow], out, rg, Op::Conv2d { input, weight, bias, stride, pad }))
    }

    /// Transposed convolution: input `[N,C,H,W]`, weight `[C,O,k,k]`, bias
    /// `[O]`; output spatial size `(H-1)*stride - 2*pad + k`. The forward map
    /// is the adjoint of `conv2d`'s input map for the same weights.
    pub fn conv_transpose2d(
        &mut self,
        input: VarId,
        weight: VarId,
        bias: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let si = self.nodes[input].shape.clone();
        let sw = self.nodes[weight].shape.clone();
        let sb = self.nodes[bias].shape.clone();
        if si.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::dim("conv_transpose2d", format!("need 4-D input/weight, got {si:?} / {sw:?}")));
        }
        let [n, c, h, w] = shape4(&si);
        let (wc, o, k) = (sw[0], sw[1], sw[2]);
        if wc != c {
            return Err(Error::dim("conv_transpose2d", format!("input has {c} channels, weight expects {wc}")));
        }
        if sb != [o] {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("bias shape {sb:?} does not match {o} output channels"),
            ));
        }
        if (h - 1) * stride + k <= 2 * pad || (w - 1) * stride + k <= 2 * pad {
            return Err(Error::dim("conv_transpose2d", "output size would be non-positive".to_string()));
        }
        let (oh, ow) = ConvGeom::conv_transpose_out(h, w, k, stride, pad);
        // Underlying conv geometry: image (o, oh, ow) -> output (h, w).
        let geom = ConvGeom { h: oh, w: ow, k, stride, pad, out_h: h, out_w: w };
        let okk = o * k * k;
        let mut out = vec![T::zero(); n * o * oh * ow];
        let mut col = vec![T::zero(); okk * h * w];
        for ni in 0..n {
            col.iter_mut().for_each(|v| *v = T::zero());
            gemm_tn(
                okk,
                c,
                h * w,
                &self.nodes[weight].data,
                &self.nodes[input].data[ni * c * h * w..(ni + 1) * c * h * w],
                &mut col,
            );
            col2im(&col, o, &geom, &mut out[ni * o * oh * ow..(ni + 1) * o * oh * ow]);
            for oc in 0..o {
                let bv = self.nodes[bias].data[oc];
                for p in &mut out[(ni * o + oc) * oh * ow..(ni * o + oc + 1) * oh * ow] {
                    *p += bv;
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(vec![n, o, oh, ow], out, rg, Op::ConvT2d { input, weight, bias, stride, pad }))
    }

    /// `x[N,K] * w[M,K]^T + b[M]`.
    pub fn linear(&mut self, input: VarId, weight: VarId, bias: VarId) -> Result<VarId> {
        let si = self.nodes[input].shape.clone();
        let sw = self.nodes[weight].shape.clone();
        let sb = self.nodes[bias].shape.clone();
        if si.len() != 2 || sw.len() != 2 || si[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::dim(
                "linear",
                format!("input {si:?}, weight {sw:?}, bias {sb:?} are inconsistent"),
            ));
        }
        let (n, k, m) = (si[0], si[1], sw[0]);
        let mut out = vec![T::zero(); n * m];
        gemm_nt(n, k, m, &self.nodes[input].data, &self.nodes[weight].data, &mut out);
        for ni in 0..n {
            for mi in 0..m {
                out[ni * m + mi] += self.nodes[bias].data[mi];
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(vec![n, m], out, rg, Op::Linear { input, weight, bias }))
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, a: VarId) -> Result<VarId> {
        let s = self.nodes[a].shape.clone();
        if s.len() != 4 {
            return Err(Error::dim("global_avg_pool", format!("need 4-D input, got {s:?}")));
        }
        let [n, c, h, w] = shape4(&s);
        let inv = T::one() / T::from_usize(h * w);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n * c {
            let mut acc = T::zero();
            for &v in &self.nodes[a].data[i * h * w..(i + 1) * h * w] {
                acc += v;
            }
            out[i] = acc * inv;
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, c, 1, 1], out, rg, Op::GlobalAvgPool { a }))
    }

    /// Spatial sum: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn spatial_sum(&mut self, a: VarId) -> Result<VarId> {
        let s = self.nodes[a].shape.clone();
        if s.len() != 4 {
            return Err(Error::dim("spatial_sum", format!("need 4-D input, got {s:?}")));
        }
        let [n, c, h, w] = shape4(&s);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n * c {
            let mut acc = T::zero();
            for &v in &self.nodes[a].data[i * h * w..(i + 1) * h * w] {
                acc += v;
            }
            out[i] = acc;
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, c, 1, 1], out, rg, Op::SpatialSum { a }))
    }

    /// Channel sum: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_sum(&mut self, a: VarId) -> Result<VarId> {
        let s = self.nodes[a].shape.clone();
        if s.len() != 4 {
            return Err(Error::dim("channel_sum", format!("need 4-D input, got {s:?}")));
        }
        let [n, c, h, w] = shape4(&s);
        let hw = h * w;
        let mut out = vec![T::zero(); n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let src = &self.nodes[a].data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                let dst = &mut out[ni * hw..(ni + 1) * hw];
                axpy(dst, src);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, 1, h, w], out, rg, Op::ChannelSum { a }))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a].data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.nodes[a].shape),
            ));
        }
        let data = self.nodes[a].data.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape { a }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, a: VarId, factor: usize) -> Result<VarId> {
        let s = self.nodes[a].shape.clone();
        if s.len() != 4 || factor == 0 {
            return Err(Error::dim("upsample_nearest", format!("need 4-D input and factor >= 1, got {s:?}")));
        }
        let [n, c, h, w] = shape4(&s);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for i in 0..n * c {
            let src = &self.nodes[a].data[i * h * w..(i + 1) * h * w];
            let dst = &mut out[i * oh * ow..(i + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / factor) * w + x / factor];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, c, oh, ow], out, rg, Op::UpsampleNearest { a, factor }))
    }

    /// Concatenates along the channel axis.
    pub fn channel_concat(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.nodes[a].shape.clone();
        let sb = self.nodes[b].shape.clone();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::dim("channel_concat", format!("incompatible shapes {sa:?} and {sb:?}")));
        }
        let [n, ca, h, w] = shape4(&sa);
        let cb = sb[1];
        let hw = h * w;
        let mut out = vec![T::zero(); n * (ca + cb) * hw];
        for ni in 0..n {
            let dst = &mut out[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&self.nodes[a].data[ni * ca * hw..(ni + 1) * ca * hw]);
            dst[ca * hw..].copy_from_slice(&self.nodes[b].data[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n, ca + cb, h, w], out, rg, Op::ChannelConcat { a, b }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let mut acc = T::zero();
        for &v in &self.nodes[a].data {
            acc += v;
        }
        let rg = self.rg(a);
        self.push(vec![1], vec![acc], rg, Op::SumAll { a })
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.nodes[a].data.len();
        let mut acc = T::zero();
        for &v in &self.nodes[a].data {
            acc += v;
        }
        let rg = self.rg(a);
        self.push(vec![1], vec![acc / T::from_usize(n)], rg, Op::MeanAll { a })
    }

    /// Records an externally computed op. `backward` receives the upstream
    /// gradient and one zero buffer per input (in `inputs` order) to fill.
    pub fn custom(
        &mut self,
        inputs: &[VarId],
        shape: Vec<usize>,
        data: Vec<T>,
        backward: CustomBackward<T>,
    ) -> VarId {
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(shape, data, rg, Op::Custom { inputs: inputs.to_vec(), backward })
    }

    /// Reverse sweep from a scalar loss. Errors if the loss is not `[1]` or
    /// not finite (NaN/Inf surface here, never silently).
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::dim("backward", format!("loss must be scalar, got {:?}", self.nodes[loss].shape)));
        }
        if !self.nodes[loss].data[0].is_finite() {
            return Err(Error::NonFinite("loss evaluation".into()));
        }
        self.nodes[loss].grad = Some(vec![T::one()]);
        for i in (0..=loss).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let contribs = self.node_backward(i);
            for (p, buf) in contribs {
                let node = &mut self.nodes[p];
                match &mut node.grad {
                    Some(g) => axpy(g, &buf),
                    None => node.grad = Some(buf),
                }
            }
        }
        Ok(())
    }

    /// Computes the gradient contribution of node `i` to each parent that
    /// requires grad. Pure read phase; accumulation happens in `backward`.
    fn node_backward(&self, i: VarId) -> Vec<(VarId, Vec<T>)> {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let g = node.grad.as_ref().expect("caller checked");
        let mut out: Vec<(VarId, Vec<T>)> = Vec::new();
        let mut want = |p: VarId| nodes[p].requires_grad;
        let zeros = |p: VarId| vec![T::zero(); nodes[p].data.len()];

        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, bc } => {
                for (side, id) in [(Bcast::Left, *a), (Bcast::Right, *b)] {
                    if !want(id) {
                        continue;
                    }
                    let mut buf = zeros(id);
                    if *bc == side {
                        reduce_spatial_into(g, &node.shape, &mut buf);
                    } else {
                        axpy(&mut buf, g);
                    }
                    out.push((id, buf));
                }
            }
            Op::Sub { a, b } => {
                if want(*a) {
                    let mut buf = zeros(*a);
                    axpy(&mut buf, g);
                    out.push((*a, buf));
                }
                if want(*b) {
                    let buf: Vec<T> = g.iter().map(|&v| -v).collect();
                    out.push((*b, buf));
                }
            }
            Op::Mul { a, b, bc } => {
                let [n, c, h, w] = if *bc == Bcast::None { [0; 4] } else { shape4(&node.shape) };
                for (side, id, other) in [(Bcast::Left, *a, *b), (Bcast::Right, *b, *a)] {
                    if !want(id) {
                        continue;
                    }
                    let mut buf = zeros(id);
                    match bc {
                        Bcast::None => {
                            for ((d, &gv), &ov) in buf.iter_mut().zip(g).zip(&nodes[other].data) {
                                *d += gv * ov;
                            }
                        }
                        _ if *bc == side => {
                            // This operand is [N,C,1,1]: reduce g * big over space.
                            let big = &nodes[other].data;
                            for ni in 0..n {
                                for ci in 0..c {
                                    let base = (ni * c + ci) * h * w;
                                    let mut acc = T::zero();
                                    for p in 0..h * w {
                                        acc += g[base + p] * big[base + p];
                                    }
                                    buf[ni * c + ci] += acc;
                                }
                            }
                        }
                        _ => {
                            // This operand is the big side: multiply g by the
                            // broadcast channel value.
                            let small = &nodes[other].data;
                            for ni in 0..n {
                                for ci in 0..c {
                                    let v = small[ni * c + ci];
                                    let base = (ni * c + ci) * h * w;
                                    for p in 0..h * w {
                                        buf[base + p] += g[base + p] * v;
                                    }
                                }
                            }
                        }
                    }
                    out.push((id, buf));
                }
            }
            Op::Div { a, b } => {
                if want(*a) {
                    let buf: Vec<T> = g.iter().zip(&nodes[*b].data).map(|(&gv, &bv)| gv / bv).collect();
                    out.push((*a, buf));
                }
                if want(*b) {
                    let buf: Vec<T> = g
                        .iter()
                        .zip(&nodes[*a].data)
                        .zip(&nodes[*b].data)
                        .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                        .collect();
                    out.push((*b, buf));
                }
            }
            Op::Scale { a, c } => {
                if want(*a) {
                    let buf: Vec<T> = g.iter().map(|&v| v * *c).collect();
                    out.push((*a, buf));
                }
            }
            Op::Relu { a } => {
                if want(*a) {
                    let buf: Vec<T> = g
                        .iter()
                        .zip(&nodes[*a].data)
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((*a, buf));
                }
            }
            Op::Sigmoid { a } => {
                if want(*a) {
                    let buf: Vec<T> = g
                        .iter()
                        .zip(&node.data)
                        .map(|(&gv, &y)| gv * y * (T::one() - y))
                        .collect();
                    out.push((*a, buf));
                }
            }
            Op::SqrtEps { a, .. } => {
                if want(*a) {
                    let half = T::from_f64(0.5);
                    let buf: Vec<T> = g.iter().zip(&node.data).map(|(&gv, &y)| gv * half / y).collect();
                    out.push((*a, buf));
                }
            }
            Op::Abs { a } => {
                if want(*a) {
                    let buf: Vec<T> = g
                        .iter()
                        .zip(&nodes[*a].data)
                        .map(|(&gv, &x)| {
                            if x > T::zero() {
                                gv
                            } else if x < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    out.push((*a, buf));
                }
            }
            Op::Clamp01 { a } => {
                if want(*a) {
                    let buf: Vec<T> = g
                        .iter()
                        .zip(&nodes[*a].data)
                        .map(|(&gv, &x)| if x > T::zero() && x < T::one() { gv } else { T::zero() })
                        .collect();
                    out.push((*a, buf));
                }
            }
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let si = &nodes[*input].shape;
                let sw = &nodes[*weight].shape;
                let [n, c, h, w] = shape4(si);
                let (o, k) = (sw[0], sw[2]);
                let geom = ConvGeom::conv(h, w, k, *stride, *pad).expect("validated at forward");
                let cols = geom.out_h * geom.out_w;
                let ckk = c * k * k;
                let mut d_input = if want(*input) { Some(zeros(*input)) } else { None };
                let mut d_weight = if want(*weight) { Some(zeros(*weight)) } else { None };
                let mut d_bias = if want(*bias) { Some(zeros(*bias)) } else { None };
                let mut col = vec![T::zero(); ckk * cols];
                for ni in 0..n {
                    let gn = &g[ni * o * cols..(ni + 1) * o * cols];
                    if let Some(di) = d_input.as_mut() {
                        col.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(ckk, o, cols, &nodes[*weight].data, gn, &mut col);
                        col2im(&col, c, &geom, &mut di[ni * c * h * w..(ni + 1) * c * h * w]);
                    }
                    if let Some(dw) = d_weight.as_mut() {
                        im2col(&nodes[*input].data[ni * c * h * w..(ni + 1) * c * h * w], c, &geom, &mut col);
                        gemm_nt(o, cols, ckk, gn, &col, dw);
                    }
                    if let Some(db) = d_bias.as_mut() {
                        for oc in 0..o {
                            let mut acc = T::zero();
                            for &v in &gn[oc * cols..(oc + 1) * cols] {
                                acc += v;
                            }
                            db[oc] += acc;
                        }
                    }
                }
                if let Some(b) = d_input {
                    out.push((*input, b));
                }
                if let Some(b) = d_weight {
                    out.push((*weight, b));
                }
                if let Some(b) = d_bias {
                    out.push((*bias, b));
                }
            }
            Op::ConvT2d { input, weight, bias, stride, pad } => {
                let si = &nodes[*input].shape;
                let sw = &nodes[*weight].shape;
                let [n, c, h, w] = shape4(si);
                let (o, k) = (sw[1], sw[2]);
                let (oh, ow) = ConvGeom::conv_transpose_out(h, w, k, *stride, *pad);
                let geom = ConvGeom { h: oh, w: ow, k, stride: *stride, pad: *pad, out_h: h, out_w: w };
                let okk = o * k * k;
                let hw = h * w;
                let mut d_input = if want(*input) { Some(zeros(*input)) } else { None };
                let mut d_weight = if want(*weight) { Some(zeros(*weight)) } else { None };
                let mut d_bias = if want(*bias) { Some(zeros(*bias)) } else { None };
                let mut col = vec![T::zero(); okk * hw];
                for ni in 0..n {
                    let gn = &g[ni * o * oh * ow..(ni + 1) * o * oh * ow];
                    im2col(gn, o, &geom, &mut col);
                    if let Some(di) = d_input.as_mut() {
                        gemm_nn(c, okk, hw, &nodes[*weight].data, &col, &mut di[ni * c * hw..(ni + 1) * c * hw]);
                    }
                    if let Some(dw) = d_weight.as_mut() {
                        gemm_nt(
                            c,
                            hw,
                            okk,
                            &nodes[*input].data[ni * c * hw..(ni + 1) * c * hw],
                            &col,
                            dw,
                        );
                    }
                    if let Some(db) = d_bias.as_mut() {
                        for oc in 0..o {
                            let mut acc = T::zero();
                            for &v in &gn[oc * oh * ow..(oc + 1) * oh * ow] {
                                acc += v;
                            }
                            db[oc] += acc;
                        }
                    }
                }
                if let Some(b) = d_input {
                    out.push((*input, b));
                }
                if let Some(b) = d_weight {
                    out.push((*weight, b));
                }
                if let Some(b) = d_bias {
                    out.push((*bias, b));
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, k) = (nodes[*input].shape[0], nodes[*input].shape[1]);
                let m = nodes[*weight].shape[0];
                if want(*input) {
                    let mut buf = zeros(*input);
                    gemm_nn(n, m, k, g, &nodes[*weight].data, &mut buf);
                    out.push((*input, buf));
                }
                if want(*weight) {
                    let mut buf = zeros(*weight);
                    gemm_tn(m, n, k, g, &nodes[*input].data, &mut buf);
                    out.push((*weight, buf));
                }
                if want(*bias) {
                    let mut buf = zeros(*bias);
                    for ni in 0..n {
                        for mi in 0..m {
                            buf[mi] += g[ni * m + mi];
                        }
                    }
                    out.push((*bias, buf));
                }
            }
            Op::GlobalAvgPool { a } => {
                if want(*a) {
                    let [n, c, h, w] = shape4(&nodes[*a].shape);
                    let inv = T::one() / T::from_usize(h * w);
                    let mut buf = zeros(*a);
                    for i in 0..n * c {
                        let gv = g[i] * inv;
                        for p in &mut buf[i * h * w..(i + 1) * h * w] {
                            *p += gv;
                        }
                    }
                    out.push((*a, buf));
                }
            }
            Op::SpatialSum { a } => {
                if want(*a) {
                    let [n, c, h, w] = shape4(&nodes[*a].shape);
                    let mut buf = zeros(*a);
                    for i in 0..n * c {
                        let gv = g[i];
                        for p in &mut buf[i * h * w..(i + 1) * h * w] {
                            *p += gv;
                        }
                    }
                    out.push((*a, buf));
                }
            }
            Op::ChannelSum { a } => {
                if want(*a) {
                    let [n, c, h, w] = shape4(&nodes[*a].shape);
                    let hw = h * w;
                    let mut buf = zeros(*a);
                    for ni in 0..n {
                        let gn = &g[ni * hw..(ni + 1) * hw];
                        for ci in 0..c {
                            axpy(&mut buf[(ni * c + ci) * hw..(ni * c + ci + 1) * hw], gn);
                        }
                    }
                    out.push((*a, buf));
                }
            }
            Op::Reshape { a } => {
                if want(*a) {
                    let mut buf = zeros(*a);
                    axpy(&mut buf, g);
                    out.push((*a, buf));
                }
            }
            Op::UpsampleNearest { a, factor } => {
                if want(*a) {
                    let [n, c, h, w] = shape4(&nodes[*a].shape);
                    let f = *factor;
                    let (oh, ow) = (h * f, w * f);
                    let mut buf = zeros(*a);
                    for i in 0..n * c {
                        let gn = &g[i * oh * ow..(i + 1) * oh * ow];
                        let dst = &mut buf[i * h * w..(i + 1) * h * w];
                        for y in 0..oh {
                            for x in 0..ow {
                                dst[(y / f) * w + x / f] += gn[y * ow + x];
                            }
                        }
                    }
                    out.push((*a, buf));
                }
            }
            Op::ChannelConcat { a, b } => {
                let [n, ca, h, w] = shape4(&nodes[*a].shape);
                let cb = nodes[*b].shape[1];
                let hw = h * w;
                if want(*a) {
                    let mut buf = zeros(*a);
                    for ni in 0..n {
                        let src = &g[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw];
                        axpy(&mut buf[ni * ca * hw..(ni + 1) * ca * hw], src);
                    }
                    out.push((*a, buf));
                }
                if want(*b) {
                    let mut buf = zeros(*b);
                    for ni in 0..n {
                        let src = &g[ni * (ca + cb) * hw + ca * hw..(ni + 1) * (ca + cb) * hw];
                        axpy(&mut buf[ni * cb * hw..(ni + 1) * cb * hw], src);
                    }
                    out.push((*b, buf));
                }
            }
            Op::SumAll { a } => {
                if want(*a) {
                    let buf = vec![g[0]; nodes[*a].data.len()];
                    out.push((*a, buf));
                }
            }
            Op::MeanAll { a } => {
                if want(*a) {
                    let numel = nodes[*a].data.len();
                    let buf = vec![g[0] / T::from_usize(numel); numel];
                    out.push((*a, buf));
                }
            }
            Op::Custom { inputs, backward } => {
                let mut bufs: Vec<Vec<T>> = inputs.iter().map(|&p| zeros(p)).collect();
                backward(g, &mut bufs);
                for (&p, buf) in inputs.iter().zip(bufs) {
                    if want(p) {
                        out.push((p, buf));
                    }
                }
            }
        }
        out
    }
}

#[inline]
fn shape4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

/// Reduces a `[N,C,H,W]` gradient into a `[N,C,1,1]` buffer by summing the
/// spatial axes.
fn reduce_spatial_into<T: Real>(g: &[T], shape: &[usize], buf: &mut [T]) {
    let [n, c, h, w] = shape4(shape);
    for i in 0..n * c {
        let mut acc = T::zero();
        for &v in &g[i * h * w..(i + 1) * h * w] {
            acc += v;
        }
        buf[i] += acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap().param()
    }

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn diamond_fanout_accumulates_both_paths() {
        // d/dx (x + x) = 2
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&tensor(&[1], vec![3.0]));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn identity_kernel_conv_reproduces_input() {
        let mut g = Graph::<f32>::new();
        let input = Tensor::<f32>::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let mut kernel = vec![0.0f32; 9];
        kernel[4] = 1.0;
        let x = g.constant(&input);
        let w = g.constant(&Tensor::new(&[1, 1, 3, 3], kernel).unwrap());
        let b = g.constant(&Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), input.data.as_slice());
    }

    #[test]
    fn ones_kernel_conv_matches_window_sums() {
        // 4x4 ramp, all-ones 3x3 kernel, pad 0: nested-loop oracle.
        let input: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::new(&[1, 1, 4, 4], input.clone()).unwrap());
        let w = g.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.constant(&Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        let mut want = [0.0f32; 4];
        for oh in 0..2 {
            for ow in 0..2 {
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        acc += input[(oh + i) * 4 + (ow + j)];
                    }
                }
                want[oh * 2 + ow] = acc;
            }
        }
        assert_eq!(g.value(y), &want);
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::full(&[1, 2, 8, 8], 0.5));
        let w = g.constant(&Tensor::full(&[2, 3, 4, 4], 0.1));
        let b = g.constant(&Tensor::zeros(&[3]));
        let y = g.conv_transpose2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 16, 16]);
    }

    #[test]
    fn conv_transpose_forward_equals_conv_input_backward() {
        // forward(conv_transpose2d) == backward-input of conv2d, same weights.
        let x = Tensor::<f64>::new(&[2, 3, 5, 5], rand_vec(7, 150)).unwrap();
        let wt = Tensor::<f64>::new(&[3, 2, 3, 3], rand_vec(8, 54)).unwrap();

        let mut g = Graph::<f64>::new();
        let xv = g.constant(&x);
        let wv = g.constant(&wt);
        let bv = g.constant(&Tensor::zeros(&[2]));
        let y = g.conv_transpose2d(xv, wv, bv, 1, 1).unwrap();

        // conv2d with weight [O=3, C=2, 3, 3] (same buffer) maps 2ch -> 3ch;
        // its input gradient with upstream x must equal the tconv forward.
        let mut g2 = Graph::<f64>::new();
        let inp = Tensor::<f64>::zeros(&[2, 2, 5, 5]).param();
        let iv = g2.leaf(&inp);
        let wv2 = g2.constant(&wt);
        let bv2 = g2.constant(&Tensor::zeros(&[3]));
        let c = g2.conv2d(iv, wv2, bv2, 1, 1).unwrap();
        // Inject x as the upstream gradient by taking sum(c * x).
        let xc = g2.constant(&x);
        let prod = g2.mul(c, xc).unwrap();
        let loss = g2.sum_all(prod);
        g2.backward(loss).unwrap();
        let dinput = g2.grad(iv).unwrap();

        for (a, b) in g.value(y).iter().zip(dinput) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_transpose_delta_input_places_kernel() {
        // A single 1 in the input stamps the kernel into the output.
        let mut x = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        x.data[4] = 1.0; // center
        let kernel: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let mut g = Graph::<f32>::new();
        let xv = g.constant(&x);
        let wv = g.constant(&Tensor::new(&[1, 1, 3, 3], kernel.clone()).unwrap());
        let bv = g.constant(&Tensor::zeros(&[1]));
        let y = g.conv_transpose2d(xv, wv, bv, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        // stride 1, pad 1: output == kernel footprint centered on the delta
        assert_eq!(g.value(y), kernel.as_slice());
    }

    #[test]
    fn relu_and_pool_basics() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::new(&[4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 0.5, 2.0]);

        let c = g.constant(&Tensor::full(&[1, 2, 3, 3], 0.25));
        let p = g.global_avg_pool(c).unwrap();
        assert_eq!(g.value(p), &[0.25, 0.25]);

        let s = g.sigmoid(g.constant(&Tensor::zeros(&[1])));
        assert_eq!(g.value(s), &[0.5]);
    }

    #[test]
    fn broadcast_mul_gates_channels() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gate = g.constant(&Tensor::new(&[1, 2, 1, 1], vec![0.5, 2.0]).unwrap());
        let y = g.mul(x, gate).unwrap();
        assert_eq!(g.value(y), &[0.5, 1.0, 6.0, 8.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        let x = g.constant(&Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(&Tensor::zeros(&[3, 5, 3, 3]));
        let bias = g.constant(&Tensor::zeros(&[3]));
        let err = g.conv2d(x, w, bias, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channels"), "{msg}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(&Tensor::new(&[1], vec![0.0]).unwrap().param());
        let b = g.constant(&Tensor::new(&[1], vec![0.0]).unwrap());
        let y = g.div(a, b).unwrap(); // 0/0 = NaN
        assert!(matches!(g.backward(y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let x = Tensor::<f32>::new(&[2, 3, 6, 6], rand_vec(99, 216).iter().map(|&v| v as f32).collect()).unwrap();
            let w = Tensor::<f32>::new(&[4, 3, 3, 3], rand_vec(100, 108).iter().map(|&v| v as f32).collect()).unwrap();
            let mut g = Graph::<f32>::new();
            let xv = g.constant(&x);
            let wv = g.constant(&w);
            let bv = g.constant(&Tensor::zeros(&[4]));
            let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
            let s = g.sigmoid(y);
            let m = g.mean_all(s);
            g.value(m)[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
