use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom};
use super::{shape_err, ParamId, ParamStore, Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel mean and biased variance observed by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Log(Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, T),
    Concat(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    Pool {
        x: Var,
        weights: Vec<T>,
    },
    ChannelDot {
        fmap: Var,
        vec: Var,
    },
    Warp {
        img: Var,
        flow: Var,
    },
    Diff {
        x: Var,
        horizontal: bool,
    },
    Sum(Var),
    Mean(Var),
    Expand(Var),
    Select {
        x: Var,
        index: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded forward computation. Build one per step, call
/// [`Graph::backward`] on a scalar output, then drop it.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Vec<T>>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient of an input created with [`Graph::input_with_grad`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&var)
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (&id, g) in &self.params {
            store.accumulate_grad(id, g);
        }
    }
}

fn grad_slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients; parameters are read-only inputs.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        let grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let grad = self.grad_enabled;
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err("conv2d", format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
        }
        if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} does not fit {h}x{wd} with padding {padding}")));
        }
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            padding,
            out_h: kernels::conv_out_extent(h, kh, stride, padding),
            out_w: kernels::conv_out_extent(wd, kw, stride, padding),
        };
        let (k, n) = (geom.rows(), geom.cols());
        let keep_cols = self.rg(w);
        let mut cols_all = if keep_cols { vec![T::zero(); batch * k * n] } else { Vec::new() };
        let mut scratch = vec![T::zero(); k * n];
        let mut out = vec![T::zero(); batch * cout * n];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let in_plane = cin * h * wd;
            for bi in 0..batch {
                let cols = if keep_cols { &mut cols_all[bi * k * n..(bi + 1) * k * n] } else { &mut scratch[..] };
                kernels::im2col(&xv[bi * in_plane..(bi + 1) * in_plane], &geom, cols);
                T::gemm(cout, k, n, wv, false, cols, false, &mut out[bi * cout * n..(bi + 1) * cout * n], false);
            }
            kernels::add_channel_bias(&mut out, self.value(b).data(), n);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(&[batch, cout, geom.out_h, geom.out_w], out)?;
        self.push("conv2d", value, Op::Conv { x, w, b, geom, cols: cols_all }, rg)
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] in `x`.
    /// The weight has shape `[in_channels, out_channels, kh, kw]`.
    pub fn transpose_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var, TensorError> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(shape_err(
                "transpose_conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err("transpose_conv2d", format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
        }
        if stride == 0 || h == 0 || wd == 0 || output_padding >= stride {
            return Err(shape_err("transpose_conv2d", "invalid stride/output padding"));
        }
        let out_h = kernels::transpose_conv_out_extent(h, kh, stride, padding, output_padding);
        let out_w = kernels::transpose_conv_out_extent(wd, kw, stride, padding, output_padding);
        if out_h == 0 || out_w == 0 {
            return Err(shape_err("transpose_conv2d", "padding larger than output"));
        }
        let geom = ConvGeom {
            channels: cout,
            height: out_h,
            width: out_w,
            kh,
            kw,
            stride,
            padding,
            out_h: h,
            out_w: wd,
        };
        let (k, n) = (geom.rows(), geom.cols());
        let mut cols = vec![T::zero(); k * n];
        let out_plane = cout * out_h * out_w;
        let mut out = vec![T::zero(); batch * out_plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..batch {
                T::gemm(k, cin, n, wv, true, &xv[bi * cin * n..(bi + 1) * cin * n], false, &mut cols, false);
                kernels::col2im(&cols, &geom, &mut out[bi * out_plane..(bi + 1) * out_plane]);
            }
            kernels::add_channel_bias(&mut out, self.value(b).data(), out_h * out_w);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(&[batch, cout, out_h, out_w], out)?;
        self.push("transpose_conv2d", value, Op::ConvT { x, w, b, geom }, rg)
    }

    fn channel_layout(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(shape_err(op, format!("expected at least rank 2, got {shape:?}")));
        }
        let plane: usize = shape[2..].iter().product();
        Ok((shape[0], shape[1], plane))
    }

    /// Batch normalization using statistics of the current batch. Returns the
    /// observed statistics so the caller can update running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>), TensorError> {
        let (batch, ch, plane) = self.channel_layout(x, "batch_norm")?;
        let count = batch * plane;
        if count < 2 {
            return Err(TensorError::BatchTooSmall(count));
        }
        let xv = self.value(x).data();
        let nf = T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for (i, chunk) in xv.chunks(plane).enumerate() {
            mean[i % ch] += chunk.iter().copied().sum();
        }
        for m in &mut mean {
            *m /= nf;
        }
        for (i, chunk) in xv.chunks(plane).enumerate() {
            let m = mean[i % ch];
            var[i % ch] += chunk.iter().map(|&v| (v - m) * (v - m)).sum();
        }
        for v in &mut var {
            *v /= nf;
        }
        let stats = BatchStats { mean, var };
        let out = self.normalize(x, gamma, beta, &stats, eps, true)?;
        Ok((out, stats))
    }

    /// Batch normalization with fixed statistics (inference mode, or replaying
    /// the statistics of another batch). Differentiable in `x`, `gamma`, `beta`.
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, stats: &BatchStats<T>, eps: f64) -> Result<Var, TensorError> {
        self.normalize(x, gamma, beta, stats, eps, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, stats: &BatchStats<T>, eps: f64, batch_stats: bool) -> Result<Var, TensorError> {
        let (_, ch, plane) = self.channel_layout(x, "batch_norm")?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] || stats.mean.len() != ch || stats.var.len() != ch {
            return Err(shape_err("batch_norm", format!("{ch} channels but scale/shift/statistics disagree")));
        }
        let eps = T::lit(eps);
        let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (i, (src, (xh, o))) in xv
            .chunks(plane)
            .zip(xhat.chunks_mut(plane).zip(out.chunks_mut(plane)))
            .enumerate()
        {
            let c = i % ch;
            for ((&v, xh), o) in src.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *xh = (v - stats.mean[c]) * inv_std[c];
                *o = gv[c] * *xh + bv[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(self.shape(x), out)?;
        self.push(
            "batch_norm",
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, TensorError> {
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(x);
        self.push(name, value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, TensorError> {
        self.unary("scale", x, |v| v * factor, Op::Scale(x, factor))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value = if av.shape() == bv.shape() {
            Tensor::new(av.shape(), av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect())?
        } else if bv.numel() == 1 {
            let y = bv.data()[0];
            Tensor::new(av.shape(), av.data().iter().map(|&x| f(x, y)).collect())?
        } else if av.numel() == 1 {
            let x = av.data()[0];
            Tensor::new(bv.shape(), bv.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(name, value, Op::Binary(kind, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(shape_err("concat_channels", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for bi in 0..ba {
            out.extend_from_slice(&self.value(a).data()[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&[ba, ca + cb, ha, wa], out)?;
        self.push("concat_channels", value, Op::Concat(a, b), rg)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(shape_err("slice_channels", format!("[{start}, {}) out of {c} channels", start + len)));
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let base = (bi * c + start) * plane;
            out.extend_from_slice(&xv[base..base + len * plane]);
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[b, len, h, w], out)?;
        self.push("slice_channels", value, Op::Slice { x, start }, rg)
    }

    /// Average over spatial positions, `[B, C, H, W] -> [B, C]`.
    ///
    /// With a `[B, 1, H, W]` binary mask the sum runs over active positions
    /// only and is divided by the active count, or by `H*W` when
    /// `divide_by_area` is set.
    pub fn global_average_pool(&mut self, x: Var, mask: Option<&Tensor<T>>, divide_by_area: bool) -> Result<Var, TensorError> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let mut weights = vec![T::zero(); b * plane];
        match mask {
            None => weights.fill(T::one() / T::from_usize(plane).unwrap()),
            Some(m) => {
                if m.shape() != [b, 1, h, w] {
                    return Err(shape_err("global_average_pool", format!("mask {:?} for input {:?}", m.shape(), self.shape(x))));
                }
                for bi in 0..b {
                    let cells = &m.data()[bi * plane..(bi + 1) * plane];
                    let active = cells.iter().filter(|&&v| v != T::zero()).count();
                    if active == 0 {
                        return Err(TensorError::EmptyMask(bi));
                    }
                    let denom = T::from_usize(if divide_by_area { plane } else { active }).unwrap();
                    for (wt, &mv) in weights[bi * plane..(bi + 1) * plane].iter_mut().zip(cells) {
                        *wt = mv / denom;
                    }
                }
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let wt = &weights[bi * plane..(bi + 1) * plane];
            for ci in 0..c {
                let src = &xv[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                out[bi * c + ci] = src.iter().zip(wt).map(|(&v, &m)| v * m).sum();
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[b, c], out)?;
        self.push("global_average_pool", value, Op::Pool { x, weights }, rg)
    }

    /// Per-location inner product of a `[B, D, H, W]` map with a `[B, D]`
    /// vector broadcast over space, giving `[B, 1, H, W]`.
    pub fn channel_dot(&mut self, fmap: Var, vec: Var) -> Result<Var, TensorError> {
        let (b, d, h, w) = self.value(fmap).dims4()?;
        if self.shape(vec) != [b, d] {
            return Err(shape_err("channel_dot", format!("map {:?}, vector {:?}", self.shape(fmap), self.shape(vec))));
        }
        let plane = h * w;
        let fv = self.value(fmap).data();
        let vv = self.value(vec).data();
        let mut out = vec![T::zero(); b * plane];
        for bi in 0..b {
            let dst = &mut out[bi * plane..(bi + 1) * plane];
            for ci in 0..d {
                let coef = vv[bi * d + ci];
                let src = &fv[(bi * d + ci) * plane..(bi * d + ci + 1) * plane];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += coef * s;
                }
            }
        }
        let rg = self.rg(fmap) || self.rg(vec);
        let value = Tensor::new(&[b, 1, h, w], out)?;
        self.push("channel_dot", value, Op::ChannelDot { fmap, vec }, rg)
    }

    /// Backward warp: `out(x) = img(x - flow(x))` with bilinear sampling and
    /// source coordinates clamped to the image. Flow channel 0 is the
    /// horizontal displacement, channel 1 the vertical one, in pixels.
    pub fn warp(&mut self, img: Var, flow: Var) -> Result<Var, TensorError> {
        let (b, c, h, w) = self.value(img).dims4()?;
        if self.shape(flow) != [b, 2, h, w] {
            return Err(shape_err("warp", format!("image {:?}, flow {:?}", self.shape(img), self.shape(flow))));
        }
        let iv = self.value(img).data();
        let fv = self.value(flow).data();
        let plane = h * w;
        let mut out = vec![T::zero(); b * c * plane];
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let s = Sample::new(fv, bi, plane, w, h, x, y);
                    for ci in 0..c {
                        let src = &iv[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                        out[(bi * c + ci) * plane + y * w + x] = s.interpolate(src);
                    }
                }
            }
        }
        let rg = self.rg(img) || self.rg(flow);
        let value = Tensor::new(&[b, c, h, w], out)?;
        self.push("warp", value, Op::Warp { img, flow }, rg)
    }

    /// Forward difference along width (`horizontal`) or height.
    pub fn diff(&mut self, x: Var, horizontal: bool) -> Result<Var, TensorError> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = if horizontal { (h, w.saturating_sub(1)) } else { (h.saturating_sub(1), w) };
        if oh == 0 || ow == 0 {
            return Err(shape_err("diff", format!("extent too small: {:?}", self.shape(x))));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for p in 0..b * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let here = src[y * w + xx];
                    let next = if horizontal { src[y * w + xx + 1] } else { src[(y + 1) * w + xx] };
                    out.push(next - here);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        self.push("diff", value, Op::Diff { x, horizontal }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel().max(1)).unwrap();
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Repeat `x` along a new leading batch axis.
    pub fn expand_batch(&mut self, x: Var, times: usize) -> Result<Var, TensorError> {
        let src = self.value(x);
        let mut shape = vec![times];
        shape.extend_from_slice(src.shape());
        let mut out = Vec::with_capacity(times * src.numel());
        for _ in 0..times {
            out.extend_from_slice(src.data());
        }
        let rg = self.rg(x);
        let value = Tensor::new(&shape, out)?;
        self.push("expand_batch", value, Op::Expand(x), rg)
    }

    /// Batch item `index`, keeping a leading batch axis of 1.
    pub fn select_batch(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let src = self.value(x);
        if src.shape().is_empty() || index >= src.shape()[0] {
            return Err(shape_err("select_batch", format!("index {index} of {:?}", src.shape())));
        }
        let value = src.batch_item(index);
        let rg = self.rg(x);
        self.push("select_batch", value, Op::Select { x, index }, rg)
    }

    /// Reverse pass from a scalar. Parameter gradients are collected by id,
    /// input gradients by handle.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut result = Gradients {
            params: BTreeMap::new(),
            inputs: HashMap::new(),
        };
        if !nodes[loss.0].requires_grad {
            return Ok(result);
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    result.inputs.insert(Var(i), Tensor::new(node.value.shape(), g)?);
                }
                Op::Param(id) => {
                    let acc = result.params.entry(*id).or_insert_with(|| vec![T::zero(); g.len()]);
                    for (a, d) in acc.iter_mut().zip(&g) {
                        *a += *d;
                    }
                }
                op => self.backward_op(op, &node.value, &g, &mut grads),
            }
        }
        Ok(result)
    }

    /// Backward pass that adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn backward_op(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Conv { x, w, b, geom, cols } => {
                let (batch, cin, _, _) = nodes[x.0].value.dims4().unwrap();
                let cout = out.shape()[1];
                let (k, n) = (geom.rows(), geom.cols());
                if let Some(db) = grad_slot(grads, nodes, *b) {
                    kernels::bias_grad(g, cout, n, db);
                }
                if let Some(dw) = grad_slot(grads, nodes, *w) {
                    for bi in 0..batch {
                        T::gemm(cout, n, k, &g[bi * cout * n..(bi + 1) * cout * n], false, &cols[bi * k * n..(bi + 1) * k * n], true, dw, true);
                    }
                }
                if nodes[x.0].requires_grad {
                    let wv = nodes[w.0].value.data();
                    let in_plane = cin * geom.height * geom.width;
                    let mut dcols = vec![T::zero(); k * n];
                    let dx = grad_slot(grads, nodes, *x).unwrap();
                    for bi in 0..batch {
                        T::gemm(k, cout, n, wv, true, &g[bi * cout * n..(bi + 1) * cout * n], false, &mut dcols, false);
                        kernels::col2im(&dcols, geom, &mut dx[bi * in_plane..(bi + 1) * in_plane]);
                    }
                }
            }
            Op::ConvT { x, w, b, geom } => {
                let (batch, cin, _, _) = nodes[x.0].value.dims4().unwrap();
                let cout = geom.channels;
                let (k, n) = (geom.rows(), geom.cols());
                let out_plane = cout * geom.height * geom.width;
                if let Some(db) = grad_slot(grads, nodes, *b) {
                    kernels::bias_grad(g, cout, geom.height * geom.width, db);
                }
                let need_w = nodes[w.0].requires_grad;
                let need_x = nodes[x.0].requires_grad;
                if !need_w && !need_x {
                    return;
                }
                let mut dcols = vec![T::zero(); k * n];
                for bi in 0..batch {
                    kernels::im2col(&g[bi * out_plane..(bi + 1) * out_plane], geom, &mut dcols);
                    if need_w {
                        let xv = &nodes[x.0].value.data()[bi * cin * n..(bi + 1) * cin * n];
                        let dw = grad_slot(grads, nodes, *w).unwrap();
                        T::gemm(cin, n, k, xv, false, &dcols, true, dw, true);
                    }
                    if need_x {
                        let wv = nodes[w.0].value.data();
                        let dx = grad_slot(grads, nodes, *x).unwrap();
                        T::gemm(cin, k, n, wv, false, &dcols, false, &mut dx[bi * cin * n..(bi + 1) * cin * n], true);
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = out.shape();
                let (batch, ch) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for (i, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let c = i % ch;
                    for (&gv, &xv) in gc.iter().zip(xc) {
                        sum_g[c] += gv;
                        sum_gx[c] += gv * xv;
                    }
                }
                if let Some(dbeta) = grad_slot(grads, nodes, *beta) {
                    for (d, s) in dbeta.iter_mut().zip(&sum_g) {
                        *d += *s;
                    }
                }
                if let Some(dgamma) = grad_slot(grads, nodes, *gamma) {
                    for (d, s) in dgamma.iter_mut().zip(&sum_gx) {
                        *d += *s;
                    }
                }
                if nodes[x.0].requires_grad {
                    let gam = nodes[gamma.0].value.data().to_vec();
                    let dx = grad_slot(grads, nodes, *x).unwrap();
                    let nf = T::from_usize(batch * plane).unwrap();
                    for (i, ((dc, gc), xc)) in dx.chunks_mut(plane).zip(g.chunks(plane)).zip(xhat.chunks(plane)).enumerate() {
                        let c = i % ch;
                        let scale = gam[c] * inv_std[c];
                        if *batch_stats {
                            let mg = sum_g[c] / nf;
                            let mgx = sum_gx[c] / nf;
                            for ((d, &gv), &xv) in dc.iter_mut().zip(gc).zip(xc) {
                                *d += scale * (gv - mg - xv * mgx);
                            }
                        } else {
                            for (d, &gv) in dc.iter_mut().zip(gc) {
                                *d += scale * gv;
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        if y > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * y * (T::one() - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * (T::one() - y * y);
                    }
                }
            }
            Op::Abs(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        } else if v < T::zero() {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::Log(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv / v;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *factor;
                    }
                }
            }
            Op::Binary(kind, a, b) => self.backward_binary(*kind, *a, *b, g, grads),
            Op::Concat(a, b) => {
                let (batch, ca, h, w) = nodes[a.0].value.dims4().unwrap();
                let cb = nodes[b.0].value.shape()[1];
                let plane = h * w;
                let stride = (ca + cb) * plane;
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    for bi in 0..batch {
                        for (d, &gv) in da[bi * ca * plane..(bi + 1) * ca * plane].iter_mut().zip(&g[bi * stride..bi * stride + ca * plane]) {
                            *d += gv;
                        }
                    }
                }
                if let Some(db) = grad_slot(grads, nodes, *b) {
                    for bi in 0..batch {
                        for (d, &gv) in db[bi * cb * plane..(bi + 1) * cb * plane].iter_mut().zip(&g[bi * stride + ca * plane..(bi + 1) * stride]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Slice { x, start } => {
                let (batch, c, h, w) = nodes[x.0].value.dims4().unwrap();
                let len = out.shape()[1];
                let plane = h * w;
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for bi in 0..batch {
                        let base = (bi * c + start) * plane;
                        for (d, &gv) in dx[base..base + len * plane].iter_mut().zip(&g[bi * len * plane..(bi + 1) * len * plane]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Pool { x, weights } => {
                let (batch, c, h, w) = nodes[x.0].value.dims4().unwrap();
                let plane = h * w;
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for bi in 0..batch {
                        let wt = &weights[bi * plane..(bi + 1) * plane];
                        for ci in 0..c {
                            let gv = g[bi * c + ci];
                            for (d, &m) in dx[(bi * c + ci) * plane..(bi * c + ci + 1) * plane].iter_mut().zip(wt) {
                                *d += gv * m;
                            }
                        }
                    }
                }
            }
            Op::ChannelDot { fmap, vec } => {
                let (batch, d, h, w) = nodes[fmap.0].value.dims4().unwrap();
                let plane = h * w;
                if nodes[fmap.0].requires_grad {
                    let vv = nodes[vec.0].value.data().to_vec();
                    let df = grad_slot(grads, nodes, *fmap).unwrap();
                    for bi in 0..batch {
                        let gp = &g[bi * plane..(bi + 1) * plane];
                        for ci in 0..d {
                            let coef = vv[bi * d + ci];
                            for (o, &gv) in df[(bi * d + ci) * plane..(bi * d + ci + 1) * plane].iter_mut().zip(gp) {
                                *o += coef * gv;
                            }
                        }
                    }
                }
                if nodes[vec.0].requires_grad {
                    let fv = nodes[fmap.0].value.data();
                    let dv = grad_slot(grads, nodes, *vec).unwrap();
                    for bi in 0..batch {
                        let gp = &g[bi * plane..(bi + 1) * plane];
                        for ci in 0..d {
                            let src = &fv[(bi * d + ci) * plane..(bi * d + ci + 1) * plane];
                            dv[bi * d + ci] += src.iter().zip(gp).map(|(&f, &gv)| f * gv).sum();
                        }
                    }
                }
            }
            Op::Warp { img, flow } => {
                let (batch, c, h, w) = nodes[img.0].value.dims4().unwrap();
                let plane = h * w;
                let iv = nodes[img.0].value.data();
                let fv = nodes[flow.0].value.data();
                let need_img = nodes[img.0].requires_grad;
                let need_flow = nodes[flow.0].requires_grad;
                let mut dimg = if need_img { vec![T::zero(); iv.len()] } else { Vec::new() };
                let mut dflow = if need_flow { vec![T::zero(); fv.len()] } else { Vec::new() };
                for bi in 0..batch {
                    for y in 0..h {
                        for x in 0..w {
                            let s = Sample::new(fv, bi, plane, w, h, x, y);
                            let (mut gx, mut gy) = (T::zero(), T::zero());
                            for ci in 0..c {
                                let gv = g[(bi * c + ci) * plane + y * w + x];
                                let base = (bi * c + ci) * plane;
                                if need_img {
                                    s.scatter(&mut dimg[base..base + plane], gv);
                                }
                                if need_flow {
                                    let (dx, dy) = s.spatial_grad(&iv[base..base + plane]);
                                    gx += gv * dx;
                                    gy += gv * dy;
                                }
                            }
                            if need_flow {
                                // source coordinate is position minus flow
                                dflow[(bi * 2) * plane + y * w + x] -= gx * s.pass_x;
                                dflow[(bi * 2 + 1) * plane + y * w + x] -= gy * s.pass_y;
                            }
                        }
                    }
                }
                if need_img {
                    let d = grad_slot(grads, nodes, *img).unwrap();
                    for (a, v) in d.iter_mut().zip(dimg) {
                        *a += v;
                    }
                }
                if need_flow {
                    let d = grad_slot(grads, nodes, *flow).unwrap();
                    for (a, v) in d.iter_mut().zip(dflow) {
                        *a += v;
                    }
                }
            }
            Op::Diff { x, horizontal } => {
                let (b, c, h, w) = nodes[x.0].value.dims4().unwrap();
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for p in 0..b * c {
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        let src = &g[p * oh * ow..(p + 1) * oh * ow];
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = src[y * ow + xx];
                                dst[y * w + xx] -= gv;
                                if *horizontal {
                                    dst[y * w + xx + 1] += gv;
                                } else {
                                    dst[(y + 1) * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    let share = g[0] / T::from_usize(dx.len().max(1)).unwrap();
                    for d in dx.iter_mut() {
                        *d += share;
                    }
                }
            }
            Op::Expand(x) => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    let n = dx.len();
                    for chunk in g.chunks(n) {
                        for (d, &gv) in dx.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Select { x, index } => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    let per = g.len();
                    for (d, &gv) in dx[index * per..(index + 1) * per].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
        }
    }

    fn backward_binary(&self, kind: BinaryKind, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let av = nodes[a.0].value.data();
        let bv = nodes[b.0].value.data();
        let n = g.len();
        let at = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
        let bt = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
        // d(out)/d(a) and d(out)/d(b) at element i
        let da_local = |i: usize| match kind {
            BinaryKind::Add | BinaryKind::Sub => T::one(),
            BinaryKind::Mul => bt(i),
            BinaryKind::Div => T::one() / bt(i),
        };
        let db_local = |i: usize| match kind {
            BinaryKind::Add => T::one(),
            BinaryKind::Sub => -T::one(),
            BinaryKind::Mul => at(i),
            BinaryKind::Div => -at(i) / (bt(i) * bt(i)),
        };
        if let Some(da) = grad_slot(grads, nodes, a) {
            if da.len() == n {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i] * da_local(i);
                }
            } else {
                da[0] += (0..n).map(|i| g[i] * da_local(i)).sum();
            }
        }
        if let Some(db) = grad_slot(grads, nodes, b) {
            if db.len() == n {
                for (i, d) in db.iter_mut().enumerate() {
                    *d += g[i] * db_local(i);
                }
            } else {
                db[0] += (0..n).map(|i| g[i] * db_local(i)).sum();
            }
        }
    }
}

/// Bilinear sampling footprint of one output pixel.
struct Sample<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    w: usize,
    pass_x: T,
    pass_y: T,
}

impl<T: Real> Sample<T> {
    fn new(flow: &[T], batch: usize, plane: usize, w: usize, h: usize, x: usize, y: usize) -> Self {
        let fx = flow[(batch * 2) * plane + y * w + x];
        let fy = flow[(batch * 2 + 1) * plane + y * w + x];
        let (x0, x1, ax, pass_x) = Self::axis(T::from_usize(x).unwrap() - fx, w);
        let (y0, y1, ay, pass_y) = Self::axis(T::from_usize(y).unwrap() - fy, h);
        Sample {
            x0,
            x1,
            y0,
            y1,
            ax,
            ay,
            w,
            pass_x,
            pass_y,
        }
    }

    fn axis(coord: T, extent: usize) -> (usize, usize, T, T) {
        let max = T::from_usize(extent - 1).unwrap();
        let inside = coord >= T::zero() && coord <= max;
        let c = coord.max(T::zero()).min(max);
        let lo = c.floor().to_usize().unwrap().min(extent - 1);
        let hi = (lo + 1).min(extent - 1);
        let frac = c - T::from_usize(lo).unwrap();
        (lo, hi, frac, if inside { T::one() } else { T::zero() })
    }

    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.ax) * (one - self.ay),
            self.ax * (one - self.ay),
            (one - self.ax) * self.ay,
            self.ax * self.ay,
        ]
    }

    fn taps(&self) -> [usize; 4] {
        [
            self.y0 * self.w + self.x0,
            self.y0 * self.w + self.x1,
            self.y1 * self.w + self.x0,
            self.y1 * self.w + self.x1,
        ]
    }

    fn interpolate(&self, plane: &[T]) -> T {
        let wts = self.weights();
        let taps = self.taps();
        (0..4).map(|i| wts[i] * plane[taps[i]]).sum()
    }

    fn scatter(&self, plane: &mut [T], g: T) {
        let wts = self.weights();
        for (i, t) in self.taps().into_iter().enumerate() {
            plane[t] += g * wts[i];
        }
    }

    /// Derivative of the interpolated value w.r.t. the sample coordinates.
    fn spatial_grad(&self, plane: &[T]) -> (T, T) {
        let [p00, p01, p10, p11] = self.taps().map(|t| plane[t]);
        let one = T::one();
        let dx = if self.x1 == self.x0 {
            T::zero()
        } else {
            (one - self.ay) * (p01 - p00) + self.ay * (p11 - p10)
        };
        let dy = if self.y1 == self.y0 {
            T::zero()
        } else {
            (one - self.ax) * (p10 - p00) + self.ax * (p11 - p01)
        };
        (dx, dy)
    }
}
