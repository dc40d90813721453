//! Reverse-mode autodiff over a flat tape of tensor operations.
//!
//! A [`Graph`] is rebuilt for every forward pass: each operation validates
//! its input shapes, computes its value eagerly, checks the result for
//! non-finite elements and records how to push gradients back. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients into every node with `requires_grad` on its path.
//!
//! Gradients only flow where they are needed: a node requires gradients iff
//! one of its inputs does, and backward skips the per-input work for inputs
//! that do not (frozen weights, targets, captured constants).

use crate::conv::{self, ConvDims};
use crate::gabor;
use crate::spectral;
use crate::tensor::{dims4_of, invalid, shape_err, Result, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Recip { a: usize },
    Sqrt { a: usize },
    Abs { a: usize },
    Gelu { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    Matmul { a: usize, b: usize },
    TransposeLast2 { a: usize },
    Reshape { a: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Conv2d { x: usize, w: usize, bias: Option<usize>, stride: usize, pad: usize, groups: usize },
    PixelShuffle { a: usize, r: usize },
    PixelUnshuffle { a: usize, r: usize },
    ConcatC { inputs: Vec<usize> },
    SliceC { a: usize, from: usize, to: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    ReflectPad2d { a: usize },
    ZeroPad2d { a: usize },
    Crop2d { a: usize },
    Tile0 { a: usize, times: usize },
    PatchSplit { a: usize, p: usize },
    PatchMerge { a: usize, gh: usize, gw: usize },
    Dwt2 { a: usize },
    Idwt2 { a: usize },
    Rfft2 { a: usize },
    Irfft2 { a: usize, w_out: usize },
    GaborKernel { lambda: usize, theta: f64, psi: f64, sigma: f64, gamma: f64, ksize: usize },
}

pub struct Graph {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            vals: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Register an input tensor. Leaves with `requires_grad` collect
    /// gradients during [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.vals.push(t);
        self.ops.push(Op::Leaf);
        self.requires.push(requires_grad);
        self.grads.push(None);
        Var(self.vals.len() - 1)
    }

    /// Constant input that never collects gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn val(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(self.vals[v.0].shape(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, t: Tensor, op: Op, requires: bool, name: &'static str) -> Result<Var> {
        if !t.is_finite() {
            return Err(TensorError::NonFinite { context: name.into() });
        }
        self.vals.push(t);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Ok(Var(self.vals.len() - 1))
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_apply(self.val(a), self.val(b), "add", |x, y| x + y)?;
        let r = self.req(a) || self.req(b);
        self.push(out, Op::Add { a: a.0, b: b.0 }, r, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_apply(self.val(a), self.val(b), "sub", |x, y| x - y)?;
        let r = self.req(a) || self.req(b);
        self.push(out, Op::Sub { a: a.0, b: b.0 }, r, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_apply(self.val(a), self.val(b), "mul", |x, y| x * y)?;
        let r = self.req(a) || self.req(b);
        self.push(out, Op::Mul { a: a.0, b: b.0 }, r, "mul")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.val(a).map(|v| v + c);
        let r = self.req(a);
        self.push(out, Op::AddScalar { a: a.0 }, r, "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.val(a).map(|v| v * c);
        let r = self.req(a);
        self.push(out, Op::MulScalar { a: a.0, c }, r, "mul_scalar")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|v| 1.0 / v);
        let r = self.req(a);
        self.push(out, Op::Recip { a: a.0 }, r, "recip")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(f64::sqrt);
        let r = self.req(a);
        self.push(out, Op::Sqrt { a: a.0 }, r, "sqrt")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(f64::abs);
        let r = self.req(a);
        self.push(out, Op::Abs { a: a.0 }, r, "abs")
    }

    /// Exact GELU: `x * Phi(x)` with the Gaussian CDF (no tanh approximation).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|v| v * gauss_cdf(v));
        let r = self.req(a);
        self.push(out, Op::Gelu { a: a.0 }, r, "gelu")
    }

    /// Clamp to `[lo, hi]`; gradient passes only through the un-clamped region.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.val(a).map(|v| v.clamp(lo, hi));
        let r = self.req(a);
        self.push(out, Op::Clamp { a: a.0, lo, hi }, r, "clamp")
    }

    // -- linear algebra ---------------------------------------------------

    /// Batched matrix multiply over the trailing two axes. Leading axes must
    /// match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asp, bsp) = (self.val(a).shape(), self.val(b).shape());
        if asp.len() < 2 || bsp.len() < 2 || asp.len() != bsp.len() {
            return Err(shape_err("matmul", format!("ranks {:?} x {:?}", asp, bsp)));
        }
        let r = asp.len();
        if asp[..r - 2] != bsp[..r - 2] {
            return Err(shape_err(
                "matmul",
                format!("leading axes differ: {:?} vs {:?}", &asp[..r - 2], &bsp[..r - 2]),
            ));
        }
        let (m, k) = (asp[r - 2], asp[r - 1]);
        let (k2, n) = (bsp[r - 2], bsp[r - 1]);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner axes differ: {k} (lhs last) vs {k2} (rhs second-to-last)"),
            ));
        }
        let batch: usize = asp[..r - 2].iter().product();
        let mut shape = asp[..r - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        for t in 0..batch {
            let (ab, bb, cb) = (t * m * k, t * k * n, t * m * n);
            for i in 0..m {
                for kk in 0..k {
                    let av = ad[ab + i * k + kk];
                    let brow = &bd[bb + kk * n..bb + (kk + 1) * n];
                    let crow = &mut out[cb + i * n..cb + (i + 1) * n];
                    for (c, bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        let req = self.req(a) || self.req(b);
        let t = Tensor::from_vec(&shape, out)?;
        self.push(t, Op::Matmul { a: a.0, b: b.0 }, req, "matmul")
    }

    /// Swap the trailing two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let sp = self.val(a).shape().to_vec();
        if sp.len() < 2 {
            return Err(shape_err("transpose", format!("rank {} < 2", sp.len())));
        }
        let r = sp.len();
        let (m, n) = (sp[r - 2], sp[r - 1]);
        let batch: usize = sp[..r - 2].iter().product();
        let mut shape = sp[..r - 2].to_vec();
        shape.extend_from_slice(&[n, m]);
        let out = transpose_batched(self.val(a).data(), batch, m, n);
        let req = self.req(a);
        let t = Tensor::from_vec(&shape, out)?;
        self.push(t, Op::TransposeLast2 { a: a.0 }, req, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).clone().reshaped(shape)?;
        let req = self.req(a);
        self.push(t, Op::Reshape { a: a.0 }, req, "reshape")
    }

    /// Numerically-stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sp = self.val(a).shape().to_vec();
        if axis >= sp.len() {
            return Err(invalid(
                "softmax",
                format!("axis {axis} out of range for rank {}", sp.len()),
            ));
        }
        let (outer, l, inner) = axis_split(&sp, axis);
        let mut out = self.val(a).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * l * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..l {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..l {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..l {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let req = self.req(a);
        let t = Tensor::from_vec(&sp, out)?;
        self.push(t, Op::Softmax { a: a.0, axis }, req, "softmax")
    }

    /// Layer normalization over the channel axis of a BCHW tensor: each
    /// spatial location is normalized across its C values, then scaled and
    /// shifted by per-channel `gamma` / `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (b, c, h, w) = self.val(x).dims4("layer_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.val(v).shape() != [c] {
                return Err(shape_err(
                    "layer_norm",
                    format!("{name} shape {:?}, want [{c}]", self.val(v).shape()),
                ));
            }
        }
        let m = h * w;
        let xd = self.val(x).data();
        let gd = self.val(gamma).data();
        let bd = self.val(beta).data();
        let mut out = vec![0.0; b * c * m];
        let mut mean = vec![0.0; m];
        let mut var = vec![0.0; m];
        for bi in 0..b {
            mean.fill(0.0);
            var.fill(0.0);
            let base = bi * c * m;
            for ci in 0..c {
                let row = &xd[base + ci * m..base + (ci + 1) * m];
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for v in mean.iter_mut() {
                *v /= c as f64;
            }
            for ci in 0..c {
                let row = &xd[base + ci * m..base + (ci + 1) * m];
                for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - mu;
                    *acc += d * d;
                }
            }
            for v in var.iter_mut() {
                *v = 1.0 / (*v / c as f64 + eps).sqrt();
            }
            for ci in 0..c {
                let row = &xd[base + ci * m..base + (ci + 1) * m];
                let orow = &mut out[base + ci * m..base + (ci + 1) * m];
                let (gc, bc) = (gd[ci], bd[ci]);
                for i in 0..m {
                    orow[i] = gc * (row[i] - mean[i]) * var[i] + bc;
                }
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let t = Tensor::from_vec(&[b, c, h, w], out)?;
        self.push(t, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }, req, "layer_norm")
    }

    // -- convolution ------------------------------------------------------

    /// 2-D convolution (cross-correlation) with zero padding and channel
    /// groups. `x` is `[B, Cin, H, W]`, `w` is `[Cout, Cin/groups, Kh, Kw]`,
    /// bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let d = self.conv_dims(x, w, stride, pad, groups)?;
        if let Some(bv) = bias {
            let bs = self.val(bv).shape();
            if bs != [d.cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?}, want [{}]", bs, d.cout),
                ));
            }
        }
        let out = conv::forward(
            self.val(x).data(),
            self.val(w).data(),
            bias.map(|bv| self.val(bv).data()),
            &d,
        );
        let req = self.req(x) || self.req(w) || bias.map(|bv| self.req(bv)).unwrap_or(false);
        let t = Tensor::from_vec(&d.out_shape(), out)?;
        self.push(
            t,
            Op::Conv2d { x: x.0, w: w.0, bias: bias.map(|b| b.0), stride, pad, groups },
            req,
            "conv2d",
        )
    }

    fn conv_dims(&self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<ConvDims> {
        let (b, cin, h, wd) = self.val(x).dims4("conv2d")?;
        let ws = self.val(w).shape();
        if ws.len() != 4 {
            return Err(shape_err("conv2d", format!("weight rank {} != 4", ws.len())));
        }
        let (cout, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be >= 1".into()));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(shape_err(
                "conv2d",
                format!("groups {groups} must divide Cin {cin} and Cout {cout}"),
            ));
        }
        if cpg != cin / groups {
            return Err(shape_err(
                "conv2d",
                format!("weight expects {cpg} channels/group, input has {}", cin / groups),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Ok(ConvDims { b, cin, h, w: wd, cout, cpg, kh, kw, stride, pad, groups, ho, wo })
    }

    // -- shape movement ---------------------------------------------------

    /// `[B, C, H*r, W*r] <- [B, C*r^2, H, W]`; sub-pixel index `dy*r + dx`
    /// lives in the channel axis (channel `c*r^2 + dy*r + dx`).
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let (b, c, h, w) = self.val(a).dims4("pixel_shuffle")?;
        if r == 0 || c % (r * r) != 0 {
            return Err(shape_err(
                "pixel_shuffle",
                format!("channels {c} not divisible by r^2 = {}", r * r),
            ));
        }
        let out = pixel_shuffle_kernel(self.val(a).data(), b, c, h, w, r);
        let req = self.req(a);
        let t = Tensor::from_vec(&[b, c / (r * r), h * r, w * r], out)?;
        self.push(t, Op::PixelShuffle { a: a.0, r }, req, "pixel_shuffle")
    }

    /// Exact inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let (b, c, h, w) = self.val(a).dims4("pixel_unshuffle")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(shape_err(
                "pixel_unshuffle",
                format!("extents {h}x{w} not divisible by r = {r}"),
            ));
        }
        let out = pixel_unshuffle_kernel(self.val(a).data(), b, c, h, w, r);
        let req = self.req(a);
        let t = Tensor::from_vec(&[b, c * r * r, h / r, w / r], out)?;
        self.push(t, Op::PixelUnshuffle { a: a.0, r }, req, "pixel_unshuffle")
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(invalid("concat_c", "no inputs".into()));
        }
        let (b, _, h, w) = self.val(inputs[0]).dims4("concat_c")?;
        let mut c_total = 0;
        for &v in inputs {
            let (vb, vc, vh, vw) = self.val(v).dims4("concat_c")?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(shape_err(
                    "concat_c",
                    format!("incompatible {:?} with leading [{b}, _, {h}, {w}]", self.val(v).shape()),
                ));
            }
            c_total += vc;
        }
        let plane = h * w;
        let mut out = vec![0.0; b * c_total * plane];
        for bi in 0..b {
            let mut c_off = 0;
            for &v in inputs {
                let vc = self.val(v).shape()[1];
                let src = self.val(v).data();
                let sbase = bi * vc * plane;
                let dbase = (bi * c_total + c_off) * plane;
                out[dbase..dbase + vc * plane].copy_from_slice(&src[sbase..sbase + vc * plane]);
                c_off += vc;
            }
        }
        let req = inputs.iter().any(|&v| self.req(v));
        let t = Tensor::from_vec(&[b, c_total, h, w], out)?;
        self.push(t, Op::ConcatC { inputs: inputs.iter().map(|v| v.0).collect() }, req, "concat_c")
    }

    /// Channel slice `[from, to)`.
    pub fn slice_c(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let (b, c, h, w) = self.val(a).dims4("slice_c")?;
        if from >= to || to > c {
            return Err(shape_err(
                "slice_c",
                format!("range [{from}, {to}) invalid for {c} channels"),
            ));
        }
        let plane = h * w;
        let nc = to - from;
        let mut out = vec![0.0; b * nc * plane];
        let src = self.val(a).data();
        for bi in 0..b {
            let sbase = (bi * c + from) * plane;
            let dbase = bi * nc * plane;
            out[dbase..dbase + nc * plane].copy_from_slice(&src[sbase..sbase + nc * plane]);
        }
        let req = self.req(a);
        let t = Tensor::from_vec(&[b, nc, h, w], out)?;
        self.push(t, Op::SliceC { a: a.0, from, to }, req, "slice_c")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.val(a).data().iter().sum();
        let req = self.req(a);
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 }, req, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.val(a).numel();
        let s: f64 = self.val(a).data().iter().sum();
        let req = self.req(a);
        self.push(Tensor::scalar(s / n as f64), Op::MeanAll { a: a.0 }, req, "mean_all")
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let s = self.sum_all(sq)?;
        self.sqrt(s)
    }

    /// Reflection padding (no edge repeat) on the bottom/right of a BCHW map.
    pub fn reflect_pad2d(&mut self, a: Var, ph: usize, pw: usize) -> Result<Var> {
        let (b, c, h, w) = self.val(a).dims4("reflect_pad2d")?;
        if (ph > 0 && ph > h - 1) || (pw > 0 && pw > w - 1) {
            return Err(invalid(
                "reflect_pad2d",
                format!("padding ({ph}, {pw}) too large for {h}x{w} without edge repeat"),
            ));
        }
        let (nh, nw) = (h + ph, w + pw);
        let mut out = vec![0.0; b * c * nh * nw];
        let src = self.val(a).data();
        for bc in 0..b * c {
            let sbase = bc * h * w;
            let dbase = bc * nh * nw;
            for y in 0..nh {
                let sy = reflect_index(y, h);
                for x in 0..nw {
                    let sx = reflect_index(x, w);
                    out[dbase + y * nw + x] = src[sbase + sy * w + sx];
                }
            }
        }
        let req = self.req(a);
        let t = Tensor::from_vec(&[b, c, nh, nw], out)?;
        self.push(t, Op::ReflectPad2d { a: a.0 }, req, "reflect_pad2d")
    }

    /// Zero padding on the bottom/right of a BCHW map.
    pub fn zero_pad2d(&mut self, a: Var, ph: usize, pw: usize) -> Result<Var> {
        let (b, c, h, w) = self.val(a).dims4("zero_pad2d")?;
        let (nh, nw) = (h + ph, w + pw);
        let mut out = vec![0.0; b * c * nh * nw];
        let src = self.val(a).data();
        for bc in 0..b * c {
            let sbase = bc * h * w;
            let dbase = bc * nh * nw;
            for y in 0..h {
                out[dbase + y * nw..dbase + y * nw + w]
                    .copy_from_slice(&src[sbase + y * w..sbase + (y + 1) * w]);
            }
        }
        let req = self.req(a);
        let t = Tensor::from_vec(&[b, c, nh, nw], out)?;
        self.push(t, Op::ZeroPad2d { a: a.0 }, req, "zero_pad2d")
    }

    /// Keep the top-left `h x w` region.
    pub fn crop2d(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (b, c, ih, iw) = self.val(a).dims4("crop2d")?;
        if h > ih || w > iw {
            return Err(shape_err("crop2d", format!("crop {h}x{w} exceeds {ih}x{iw}")));
        }
        let mut out = vec![0.0; b * c * h * w];
        let src = self.val(a).data();
        for bc in 0..b * c {
            let sbase = bc * ih * iw;
            let dbase = bc * h * w;
            for y in 0..h {
                out[dbase + y * w..dbase + (y + 1) * w]
                    .copy_from_slice(&src[sbase + y * iw..sbase + y * iw + w]);
            }
        }
        let req = self.req(a);
        let t = Tensor::from_vec(&[b, c, h, w], out)?;
        self.push(t, Op::Crop2d { a: a.0 }, req, "crop2d")
    }

    /// Repeat a tensor `times` along a new leading axis.
    pub fn tile0(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(invalid("tile0", "times must be >= 1".into()));
        }
        let n = self.val(a).numel();
        let mut shape = vec![times];
        shape.extend_from_slice(self.val(a).shape());
        let mut out = Vec::with_capacity(times * n);
        for _ in 0..times {
            out.extend_from_slice(self.val(a).data());
        }
        let req = self.req(a);
        let t = Tensor::from_vec(&shape, out)?;
        self.push(t, Op::Tile0 { a: a.0, times }, req, "tile0")
    }

    /// Cut `[B, C, H, W]` into non-overlapping `p x p` patches stacked on the
    /// batch axis in (b, gy, gx) order: `[B * (H/p) * (W/p), C, p, p]`.
    pub fn patch_split(&mut self, a: Var, p: usize) -> Result<Var> {
        let (b, c, h, w) = self.val(a).dims4("patch_split")?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(shape_err(
                "patch_split",
                format!("extents {h}x{w} not divisible by patch {p}"),
            ));
        }
        let out = patch_split_kernel(self.val(a).data(), b, c, h, w, p);
        let req = self.req(a);
        let t = Tensor::from_vec(&[b * (h / p) * (w / p), c, p, p], out)?;
        self.push(t, Op::PatchSplit { a: a.0, p }, req, "patch_split")
    }

    /// Exact inverse of [`Graph::patch_split`] given the patch-grid extents.
    pub fn patch_merge(&mut self, a: Var, gh: usize, gw: usize) -> Result<Var> {
        let (bp, c, p, p2) = self.val(a).dims4("patch_merge")?;
        if p != p2 {
            return Err(shape_err("patch_merge", format!("patches must be square, got {p}x{p2}")));
        }
        if gh == 0 || gw == 0 || bp % (gh * gw) != 0 {
            return Err(shape_err(
                "patch_merge",
                format!("batch {bp} not divisible by grid {gh}x{gw}"),
            ));
        }
        let b = bp / (gh * gw);
        let out = patch_merge_kernel(self.val(a).data(), b, c, gh, gw, p);
        let req = self.req(a);
        let t = Tensor::from_vec(&[b, c, gh * p, gw * p], out)?;
        self.push(t, Op::PatchMerge { a: a.0, gh, gw }, req, "patch_merge")
    }

    // -- spectral ---------------------------------------------------------

    /// Haar analysis producing the band-stacked layout `[B, 4C, H/2, W/2]`
    /// (ll, hl, lh, hh groups of C channels). See [`crate::spectral::dwt2`]
    /// for the four-band view.
    pub fn dwt2_stacked(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.val(a).dims4("dwt2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("dwt2", format!("extents must be even, got {h}x{w}")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let plane = h * w;
        let bplane = h2 * w2;
        let mut out = vec![0.0; b * 4 * c * bplane];
        let src = self.val(a).data();
        for bi in 0..b {
            for ci in 0..c {
                let s = (bi * c + ci) * plane;
                let base = bi * 4 * c * bplane;
                let (llr, rest) = out[base..base + 4 * c * bplane].split_at_mut(c * bplane);
                let (hlr, rest2) = rest.split_at_mut(c * bplane);
                let (lhr, hhr) = rest2.split_at_mut(c * bplane);
                spectral::haar_plane(
                    &src[s..s + plane],
                    h,
                    w,
                    &mut llr[ci * bplane..(ci + 1) * bplane],
                    &mut hlr[ci * bplane..(ci + 1) * bplane],
                    &mut lhr[ci * bplane..(ci + 1) * bplane],
                    &mut hhr[ci * bplane..(ci + 1) * bplane],
                );
            }
        }
        let req = self.req(a);
        let t = Tensor::from_vec(&[b, 4 * c, h2, w2], out)?;
        self.push(t, Op::Dwt2 { a: a.0 }, req, "dwt2")
    }

    /// Haar synthesis from the band-stacked layout back to `[B, C, 2H, 2W]`.
    pub fn idwt2_stacked(&mut self, a: Var) -> Result<Var> {
        let (b, c4, h, w) = self.val(a).dims4("idwt2")?;
        if c4 % 4 != 0 {
            return Err(shape_err("idwt2", format!("channels {c4} not divisible by 4 bands")));
        }
        let c = c4 / 4;
        let (nh, nw) = (2 * h, 2 * w);
        let bplane = h * w;
        let plane = nh * nw;
        let mut out = vec![0.0; b * c * plane];
        let src = self.val(a).data();
        for bi in 0..b {
            for ci in 0..c {
                let base = bi * 4 * c * bplane;
                let ll = &src[base + ci * bplane..base + (ci + 1) * bplane];
                let hl = &src[base + (c + ci) * bplane..base + (c + ci + 1) * bplane];
                let lh = &src[base + (2 * c + ci) * bplane..base + (2 * c + ci + 1) * bplane];
                let hh = &src[base + (3 * c + ci) * bplane..base + (3 * c + ci + 1) * bplane];
                let d = (bi * c + ci) * plane;
                spectral::haar_plane_inv(ll, hl, lh, hh, nh, nw, &mut out[d..d + plane]);
            }
        }
        let req = self.req(a);
        let t = Tensor::from_vec(&[b, c, nh, nw], out)?;
        self.push(t, Op::Idwt2 { a: a.0 }, req, "idwt2")
    }

    /// Real 2-D FFT producing `[B, 2C, H, W/2+1]`: real parts in the first C
    /// channels, imaginary parts in the last C.
    pub fn rfft2_stacked(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.val(a).dims4("rfft2")?;
        let wf = spectral::half_width(w);
        let plane = h * w;
        let fplane = h * wf;
        let mut out = vec![0.0; b * 2 * c * fplane];
        let src = self.val(a).data();
        for bi in 0..b {
            for ci in 0..c {
                let s = (bi * c + ci) * plane;
                let base = bi * 2 * c * fplane;
                let (res, ims) = out[base..base + 2 * c * fplane].split_at_mut(c * fplane);
                spectral::rfft2_plane(
                    &src[s..s + plane],
                    h,
                    w,
                    &mut res[ci * fplane..(ci + 1) * fplane],
                    &mut ims[ci * fplane..(ci + 1) * fplane],
                );
            }
        }
        let req = self.req(a);
        let t = Tensor::from_vec(&[b, 2 * c, h, wf], out)?;
        self.push(t, Op::Rfft2 { a: a.0 }, req, "rfft2")
    }

    /// Inverse of [`Graph::rfft2_stacked`] back to a real `[B, C, H, w_out]`.
    pub fn irfft2_stacked(&mut self, a: Var, w_out: usize) -> Result<Var> {
        let (b, c2, h, wf) = self.val(a).dims4("irfft2")?;
        if c2 % 2 != 0 {
            return Err(shape_err("irfft2", format!("channels {c2} not an re/im pair")));
        }
        if spectral::half_width(w_out) != wf {
            return Err(shape_err(
                "irfft2",
                format!("half width {wf} inconsistent with output width {w_out}"),
            ));
        }
        let c = c2 / 2;
        let plane = h * w_out;
        let fplane = h * wf;
        let mut out = vec![0.0; b * c * plane];
        let src = self.val(a).data();
        for bi in 0..b {
            for ci in 0..c {
                let base = bi * 2 * c * fplane;
                let re = &src[base + ci * fplane..base + (ci + 1) * fplane];
                let im = &src[base + (c + ci) * fplane..base + (c + ci + 1) * fplane];
                let d = (bi * c + ci) * plane;
                spectral::irfft2_plane(re, im, h, w_out, &mut out[d..d + plane]);
            }
        }
        let req = self.req(a);
        let t = Tensor::from_vec(&[b, c, h, w_out], out)?;
        self.push(t, Op::Irfft2 { a: a.0, w_out }, req, "irfft2")
    }

    /// Synthesize a `[k, k]` Gabor kernel from a scalar wavelength node.
    pub fn gabor_kernel(
        &mut self,
        lambda: Var,
        theta: f64,
        psi: f64,
        sigma: f64,
        gamma: f64,
        ksize: usize,
    ) -> Result<Var> {
        if self.val(lambda).numel() != 1 {
            return Err(shape_err(
                "gabor_kernel",
                format!("lambda must be scalar, got {:?}", self.val(lambda).shape()),
            ));
        }
        if ksize < 3 || ksize % 2 == 0 {
            return Err(invalid("gabor_kernel", format!("ksize {ksize} must be odd and >= 3")));
        }
        let lv = self.val(lambda).item();
        let vals = gabor::kernel_values(lv, theta, psi, sigma, gamma, ksize);
        let req = self.req(lambda);
        let t = Tensor::from_vec(&[ksize, ksize], vals)?;
        self.push(
            t,
            Op::GaborKernel { lambda: lambda.0, theta, psi, sigma, gamma, ksize },
            req,
            "gabor_kernel",
        )
    }

    // -- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Gradients land on every
    /// reachable node with `requires_grad` and stay available via
    /// [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.vals[loss.0].numel() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.vals[loss.0].shape()),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.requires[i] {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            let op = self.ops[i].clone();
            self.backprop_op(i, &op, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, j: usize, delta: Vec<f64>) {
        if !self.requires[j] {
            return;
        }
        match &mut self.grads[j] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            None => self.grads[j] = Some(delta),
        }
    }

    fn backprop_op(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.requires[a] {
                    let d = reduce_to_shape(g, self.vals[i].shape(), self.vals[a].shape());
                    self.add_grad(a, d);
                }
                if self.requires[b] {
                    let d = reduce_to_shape(g, self.vals[i].shape(), self.vals[b].shape());
                    self.add_grad(b, d);
                }
            }
            Op::Sub { a, b } => {
                if self.requires[a] {
                    let d = reduce_to_shape(g, self.vals[i].shape(), self.vals[a].shape());
                    self.add_grad(a, d);
                }
                if self.requires[b] {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    let d = reduce_to_shape(&neg, self.vals[i].shape(), self.vals[b].shape());
                    self.add_grad(b, d);
                }
            }
            Op::Mul { a, b } => {
                let out_shape = self.vals[i].shape().to_vec();
                if self.requires[a] {
                    let prod = broadcast_expand_mul(g, &out_shape, &self.vals[b]);
                    let d = reduce_to_shape(&prod, &out_shape, self.vals[a].shape());
                    self.add_grad(a, d);
                }
                if self.requires[b] {
                    let prod = broadcast_expand_mul(g, &out_shape, &self.vals[a]);
                    let d = reduce_to_shape(&prod, &out_shape, self.vals[b].shape());
                    self.add_grad(b, d);
                }
            }
            Op::AddScalar { a } => self.add_grad(a, g.to_vec()),
            Op::MulScalar { a, c } => self.add_grad(a, g.iter().map(|v| c * v).collect()),
            Op::Recip { a } => {
                let y = self.vals[i].data();
                self.add_grad(a, g.iter().zip(y).map(|(gv, yv)| -gv * yv * yv).collect());
            }
            Op::Sqrt { a } => {
                let y = self.vals[i].data();
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| if *yv == 0.0 { 0.0 } else { gv / (2.0 * yv) })
                    .collect();
                self.add_grad(a, d);
            }
            Op::Abs { a } => {
                let x = self.vals[a].data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| {
                        if *xv > 0.0 {
                            *gv
                        } else if *xv < 0.0 {
                            -*gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.add_grad(a, d);
            }
            Op::Gelu { a } => {
                let x = self.vals[a].data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| gv * (gauss_cdf(*xv) + xv * gauss_pdf(*xv)))
                    .collect();
                self.add_grad(a, d);
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.vals[a].data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| if *xv < lo || *xv > hi { 0.0 } else { *gv })
                    .collect();
                self.add_grad(a, d);
            }
            Op::Matmul { a, b } => {
                let asp = self.vals[a].shape();
                let r = asp.len();
                let (m, k) = (asp[r - 2], asp[r - 1]);
                let n = self.vals[b].shape()[r - 1];
                let batch: usize = asp[..r - 2].iter().product();
                if self.requires[a] {
                    let bd = self.vals[b].data();
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        let (gb, bb, ab) = (t * m * n, t * k * n, t * m * k);
                        for ii in 0..m {
                            for kk in 0..k {
                                let grow = &g[gb + ii * n..gb + (ii + 1) * n];
                                let brow = &bd[bb + kk * n..bb + (kk + 1) * n];
                                let mut acc = 0.0;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                da[ab + ii * k + kk] = acc;
                            }
                        }
                    }
                    self.add_grad(a, da);
                }
                if self.requires[b] {
                    let ad = self.vals[a].data();
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        let (gb, bb, ab) = (t * m * n, t * k * n, t * m * k);
                        for kk in 0..k {
                            for ii in 0..m {
                                let av = ad[ab + ii * k + kk];
                                let grow = &g[gb + ii * n..gb + (ii + 1) * n];
                                let drow = &mut db[bb + kk * n..bb + (kk + 1) * n];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    }
                    self.add_grad(b, db);
                }
            }
            Op::TransposeLast2 { a } => {
                let sp = self.vals[i].shape();
                let r = sp.len();
                let (m, n) = (sp[r - 2], sp[r - 1]);
                let batch: usize = sp[..r - 2].iter().product();
                self.add_grad(a, transpose_batched(g, batch, m, n));
            }
            Op::Reshape { a } => self.add_grad(a, g.to_vec()),
            Op::Softmax { a, axis } => {
                let sp = self.vals[i].shape().to_vec();
                let (outer, l, inner) = axis_split(&sp, axis);
                let y = self.vals[i].data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let base = o * l * inner + inn;
                        let mut dot = 0.0;
                        for j in 0..l {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..l {
                            let idx = base + j * inner;
                            d[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.add_grad(a, d);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (b, c, h, w) = dims4_of(self.vals[x].shape(), "layer_norm")?;
                let m = h * w;
                let xd = self.vals[x].data();
                let gd = self.vals[gamma].data();
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut mean = vec![0.0; m];
                let mut inv = vec![0.0; m];
                let mut s1 = vec![0.0; m];
                let mut s2 = vec![0.0; m];
                for bi in 0..b {
                    let base = bi * c * m;
                    mean.fill(0.0);
                    inv.fill(0.0);
                    for ci in 0..c {
                        let row = &xd[base + ci * m..base + (ci + 1) * m];
                        for (acc, v) in mean.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    for v in mean.iter_mut() {
                        *v /= c as f64;
                    }
                    for ci in 0..c {
                        let row = &xd[base + ci * m..base + (ci + 1) * m];
                        for ((acc, v), mu) in inv.iter_mut().zip(row).zip(&mean) {
                            let d = v - mu;
                            *acc += d * d;
                        }
                    }
                    for v in inv.iter_mut() {
                        *v = 1.0 / (*v / c as f64 + eps).sqrt();
                    }
                    s1.fill(0.0);
                    s2.fill(0.0);
                    for ci in 0..c {
                        let gout = &g[base + ci * m..base + (ci + 1) * m];
                        let row = &xd[base + ci * m..base + (ci + 1) * m];
                        let gc = gd[ci];
                        let mut dg = 0.0;
                        let mut db = 0.0;
                        for j in 0..m {
                            let xh = (row[j] - mean[j]) * inv[j];
                            let gg = gc * gout[j];
                            s1[j] += gg;
                            s2[j] += gg * xh;
                            dg += gout[j] * xh;
                            db += gout[j];
                        }
                        dgamma[ci] += dg;
                        dbeta[ci] += db;
                    }
                    for ci in 0..c {
                        let gout = &g[base + ci * m..base + (ci + 1) * m];
                        let row = &xd[base + ci * m..base + (ci + 1) * m];
                        let drow = &mut dx[base + ci * m..base + (ci + 1) * m];
                        let gc = gd[ci];
                        for j in 0..m {
                            let xh = (row[j] - mean[j]) * inv[j];
                            drow[j] =
                                inv[j] * (gc * gout[j] - s1[j] / c as f64 - xh * s2[j] / c as f64);
                        }
                    }
                }
                if self.requires[x] {
                    self.add_grad(x, dx);
                }
                if self.requires[gamma] {
                    self.add_grad(gamma, dgamma);
                }
                if self.requires[beta] {
                    self.add_grad(beta, dbeta);
                }
            }
            Op::Conv2d { x, w, bias, stride, pad, groups } => {
                let d = self.conv_dims(Var(x), Var(w), stride, pad, groups)?;
                if self.requires[x] {
                    let dx = conv::backward_x(g, self.vals[w].data(), &d);
                    self.add_grad(x, dx);
                }
                if self.requires[w] {
                    let dw = conv::backward_w(g, self.vals[x].data(), &d);
                    self.add_grad(w, dw);
                }
                if let Some(bv) = bias {
                    if self.requires[bv] {
                        let db = conv::backward_bias(g, &d);
                        self.add_grad(bv, db);
                    }
                }
            }
            Op::PixelShuffle { a, r } => {
                let (b, c, h, w) = dims4_of(self.vals[i].shape(), "pixel_shuffle")?;
                self.add_grad(a, pixel_unshuffle_kernel(g, b, c, h, w, r));
            }
            Op::PixelUnshuffle { a, r } => {
                let (b, c, h, w) = dims4_of(self.vals[i].shape(), "pixel_unshuffle")?;
                self.add_grad(a, pixel_shuffle_kernel(g, b, c, h, w, r));
            }
            Op::ConcatC { ref inputs } => {
                let (b, c_total, h, w) = dims4_of(self.vals[i].shape(), "concat_c")?;
                let plane = h * w;
                let mut c_off = 0;
                for &a in inputs {
                    let vc = self.vals[a].shape()[1];
                    if self.requires[a] {
                        let mut d = vec![0.0; b * vc * plane];
                        for bi in 0..b {
                            let sbase = (bi * c_total + c_off) * plane;
                            let dbase = bi * vc * plane;
                            d[dbase..dbase + vc * plane]
                                .copy_from_slice(&g[sbase..sbase + vc * plane]);
                        }
                        self.add_grad(a, d);
                    }
                    c_off += vc;
                }
            }
            Op::SliceC { a, from, to } => {
                let (b, c, h, w) = dims4_of(self.vals[a].shape(), "slice_c")?;
                let plane = h * w;
                let nc = to - from;
                let mut d = vec![0.0; b * c * plane];
                for bi in 0..b {
                    let dbase = (bi * c + from) * plane;
                    let sbase = bi * nc * plane;
                    d[dbase..dbase + nc * plane].copy_from_slice(&g[sbase..sbase + nc * plane]);
                }
                self.add_grad(a, d);
            }
            Op::SumAll { a } => {
                self.add_grad(a, vec![g[0]; self.vals[a].numel()]);
            }
            Op::MeanAll { a } => {
                let n = self.vals[a].numel();
                self.add_grad(a, vec![g[0] / n as f64; n]);
            }
            Op::ReflectPad2d { a } => {
                let (b, c, h, w) = dims4_of(self.vals[a].shape(), "reflect_pad2d")?;
                let (_, _, nh, nw) = dims4_of(self.vals[i].shape(), "reflect_pad2d")?;
                let mut d = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    let sbase = bc * nh * nw;
                    let dbase = bc * h * w;
                    for y in 0..nh {
                        let sy = reflect_index(y, h);
                        for x in 0..nw {
                            let sx = reflect_index(x, w);
                            d[dbase + sy * w + sx] += g[sbase + y * nw + x];
                        }
                    }
                }
                self.add_grad(a, d);
            }
            Op::ZeroPad2d { a } => {
                let (b, c, h, w) = dims4_of(self.vals[a].shape(), "zero_pad2d")?;
                let (_, _, nh, nw) = dims4_of(self.vals[i].shape(), "zero_pad2d")?;
                let mut d = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    let sbase = bc * nh * nw;
                    let dbase = bc * h * w;
                    for y in 0..h {
                        d[dbase + y * w..dbase + (y + 1) * w]
                            .copy_from_slice(&g[sbase + y * nw..sbase + y * nw + w]);
                    }
                }
                self.add_grad(a, d);
            }
            Op::Crop2d { a } => {
                let (b, c, ih, iw) = dims4_of(self.vals[a].shape(), "crop2d")?;
                let (_, _, h, w) = dims4_of(self.vals[i].shape(), "crop2d")?;
                let mut d = vec![0.0; b * c * ih * iw];
                for bc in 0..b * c {
                    let dbase = bc * ih * iw;
                    let sbase = bc * h * w;
                    for y in 0..h {
                        d[dbase + y * iw..dbase + y * iw + w]
                            .copy_from_slice(&g[sbase + y * w..sbase + (y + 1) * w]);
                    }
                }
                self.add_grad(a, d);
            }
            Op::Tile0 { a, times } => {
                let n = self.vals[a].numel();
                let mut d = vec![0.0; n];
                for t in 0..times {
                    for (dv, gv) in d.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                        *dv += gv;
                    }
                }
                self.add_grad(a, d);
            }
            Op::PatchSplit { a, p } => {
                let (b, c, h, w) = dims4_of(self.vals[a].shape(), "patch_split")?;
                self.add_grad(a, patch_merge_kernel(g, b, c, h / p, w / p, p));
            }
            Op::PatchMerge { a, gh, gw } => {
                let (b, c, _, _) = dims4_of(self.vals[i].shape(), "patch_merge")?;
                let p = self.vals[a].shape()[2];
                self.add_grad(a, patch_split_kernel(g, b, c, gh * p, gw * p, p));
            }
            Op::Dwt2 { a } => {
                let (b, c, h, w) = dims4_of(self.vals[a].shape(), "dwt2")?;
                let (h2, w2) = (h / 2, w / 2);
                let bplane = h2 * w2;
                let plane = h * w;
                let mut d = vec![0.0; b * c * plane];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = bi * 4 * c * bplane;
                        let ll = &g[base + ci * bplane..base + (ci + 1) * bplane];
                        let hl = &g[base + (c + ci) * bplane..base + (c + ci + 1) * bplane];
                        let lh = &g[base + (2 * c + ci) * bplane..base + (2 * c + ci + 1) * bplane];
                        let hh = &g[base + (3 * c + ci) * bplane..base + (3 * c + ci + 1) * bplane];
                        let dst = (bi * c + ci) * plane;
                        spectral::haar_plane_inv(ll, hl, lh, hh, h, w, &mut d[dst..dst + plane]);
                    }
                }
                self.add_grad(a, d);
            }
            Op::Idwt2 { a } => {
                let (b, c4, h, w) = dims4_of(self.vals[a].shape(), "idwt2")?;
                let c = c4 / 4;
                let (nh, nw) = (2 * h, 2 * w);
                let bplane = h * w;
                let plane = nh * nw;
                let mut d = vec![0.0; b * c4 * bplane];
                for bi in 0..b {
                    for ci in 0..c {
                        let src = (bi * c + ci) * plane;
                        let base = bi * 4 * c * bplane;
                        let (llr, rest) = d[base..base + 4 * c * bplane].split_at_mut(c * bplane);
                        let (hlr, rest2) = rest.split_at_mut(c * bplane);
                        let (lhr, hhr) = rest2.split_at_mut(c * bplane);
                        spectral::haar_plane(
                            &g[src..src + plane],
                            nh,
                            nw,
                            &mut llr[ci * bplane..(ci + 1) * bplane],
                            &mut hlr[ci * bplane..(ci + 1) * bplane],
                            &mut lhr[ci * bplane..(ci + 1) * bplane],
                            &mut hhr[ci * bplane..(ci + 1) * bplane],
                        );
                    }
                }
                self.add_grad(a, d);
            }
            Op::Rfft2 { a } => {
                let (b, c, h, w) = dims4_of(self.vals[a].shape(), "rfft2")?;
                let wf = spectral::half_width(w);
                let fplane = h * wf;
                let plane = h * w;
                let mut d = vec![0.0; b * c * plane];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = bi * 2 * c * fplane;
                        let gre = &g[base + ci * fplane..base + (ci + 1) * fplane];
                        let gim = &g[base + (c + ci) * fplane..base + (c + ci + 1) * fplane];
                        let dst = (bi * c + ci) * plane;
                        spectral::rfft2_adjoint_plane(gre, gim, h, w, &mut d[dst..dst + plane]);
                    }
                }
                self.add_grad(a, d);
            }
            Op::Irfft2 { a, w_out } => {
                let (b, c2, h, wf) = dims4_of(self.vals[a].shape(), "irfft2")?;
                let c = c2 / 2;
                let fplane = h * wf;
                let plane = h * w_out;
                let mut d = vec![0.0; b * c2 * fplane];
                for bi in 0..b {
                    for ci in 0..c {
                        let src = (bi * c + ci) * plane;
                        let base = bi * 2 * c * fplane;
                        let (res, ims) = d[base..base + 2 * c * fplane].split_at_mut(c * fplane);
                        spectral::irfft2_adjoint_plane(
                            &g[src..src + plane],
                            h,
                            w_out,
                            &mut res[ci * fplane..(ci + 1) * fplane],
                            &mut ims[ci * fplane..(ci + 1) * fplane],
                        );
                    }
                }
                self.add_grad(a, d);
            }
            Op::GaborKernel { lambda, theta, psi, sigma, gamma, ksize } => {
                let lv = self.vals[lambda].item();
                let dvals = gabor::kernel_dlambda(lv, theta, psi, sigma, gamma, ksize);
                let mut acc = 0.0;
                for (gv, dv) in g.iter().zip(&dvals) {
                    acc += gv * dv;
                }
                self.add_grad(lambda, vec![acc]);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// kernels and helpers
// ---------------------------------------------------------------------------

/// `0.5 * (1 + erf(x / sqrt(2)))`.
fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_batched(data: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for t in 0..batch {
        let base = t * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = data[base + i * n + j];
            }
        }
    }
    out
}

fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * len - 2 - i
    }
}

fn pixel_shuffle_kernel(src: &[f64], b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let co = c / (r * r);
    let (nh, nw) = (h * r, w * r);
    let mut out = vec![0.0; b * co * nh * nw];
    for bi in 0..b {
        for cc in 0..co {
            for y in 0..nh {
                let (gy, dy) = (y / r, y % r);
                for x in 0..nw {
                    let (gx, dx) = (x / r, x % r);
                    let ci = cc * r * r + dy * r + dx;
                    out[((bi * co + cc) * nh + y) * nw + x] =
                        src[((bi * c + ci) * h + gy) * w + gx];
                }
            }
        }
    }
    out
}

fn pixel_unshuffle_kernel(src: &[f64], b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let co = c * r * r;
    let (nh, nw) = (h / r, w / r);
    let mut out = vec![0.0; b * co * nh * nw];
    for bi in 0..b {
        for cc in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = cc * r * r + dy * r + dx;
                    for gy in 0..nh {
                        for gx in 0..nw {
                            out[((bi * co + oc) * nh + gy) * nw + gx] =
                                src[((bi * c + cc) * h + gy * r + dy) * w + gx * r + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn patch_split_kernel(src: &[f64], b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; b * gh * gw * c * p * p];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let ob = (bi * gh + gy) * gw + gx;
                for ci in 0..c {
                    for py in 0..p {
                        let srow = ((bi * c + ci) * h + gy * p + py) * w + gx * p;
                        let drow = ((ob * c + ci) * p + py) * p;
                        out[drow..drow + p].copy_from_slice(&src[srow..srow + p]);
                    }
                }
            }
        }
    }
    out
}

fn patch_merge_kernel(src: &[f64], b: usize, c: usize, gh: usize, gw: usize, p: usize) -> Vec<f64> {
    let (h, w) = (gh * p, gw * p);
    let mut out = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let sb = (bi * gh + gy) * gw + gx;
                for ci in 0..c {
                    for py in 0..p {
                        let srow = ((sb * c + ci) * p + py) * p;
                        let drow = ((bi * c + ci) * h + gy * p + py) * w + gx * p;
                        out[drow..drow + p].copy_from_slice(&src[srow..srow + p]);
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ad = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let bd = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ad == bd {
            ad
        } else if ad == 1 {
            bd
        } else if bd == 1 {
            ad
        } else {
            return Err(shape_err(
                op,
                format!("cannot broadcast {:?} with {:?} (axis {i}: {ad} vs {bd})", a, b),
            ));
        };
    }
    Ok(out)
}

/// Right-aligned strides into `shape` for iterating over `out`; broadcast
/// axes get stride 0.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let off = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 && out[off + i] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let astr = bcast_strides(a_shape, out_shape);
    let bstr = bcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut a_off, mut b_off) = (0usize, 0usize);
    for i in 0..total {
        f(i, a_off, b_off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            a_off += astr[d];
            b_off += bstr[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            a_off -= astr[d] * out_shape[d];
            b_off -= bstr[d] * out_shape[d];
        }
    }
}

/// `b` tiled as a suffix of `a`: shapes right-align exactly.
fn is_suffix(b: &[usize], a: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn broadcast_apply(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        return Tensor::from_vec(a.shape(), data);
    }
    if is_suffix(b.shape(), a.shape()) {
        let n = b.numel();
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks_exact(n) {
            data.extend(chunk.iter().zip(b.data()).map(|(x, y)| f(*x, *y)));
        }
        return Tensor::from_vec(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape(), op)?;
    let mut data = vec![0.0; out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out_shape, a.shape(), b.shape(), |i, ao, bo| {
        data[i] = f(ad[ao], bd[bo]);
    });
    Tensor::from_vec(&out_shape, data)
}

/// `g * other` evaluated on the (already broadcast) output grid.
fn broadcast_expand_mul(g: &[f64], out_shape: &[usize], other: &Tensor) -> Vec<f64> {
    if other.shape() == out_shape {
        return g.iter().zip(other.data()).map(|(a, b)| a * b).collect();
    }
    if is_suffix(other.shape(), out_shape) {
        let n = other.numel();
        let mut out = Vec::with_capacity(g.len());
        for chunk in g.chunks_exact(n) {
            out.extend(chunk.iter().zip(other.data()).map(|(a, b)| a * b));
        }
        return out;
    }
    let mut out = vec![0.0; g.len()];
    let od = other.data();
    for_each_broadcast(out_shape, out_shape, other.shape(), |i, _, bo| {
        out[i] = g[i] * od[bo];
    });
    out
}

/// Sum `g` (laid out on `from_shape`) down to `to_shape`.
fn reduce_to_shape(g: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    if from_shape == to_shape {
        return g.to_vec();
    }
    if is_suffix(to_shape, from_shape) {
        let n: usize = to_shape.iter().product();
        let mut out = vec![0.0; n];
        for chunk in g.chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return out;
    }
    let n: usize = to_shape.iter().product();
    let mut out = vec![0.0; n];
    for_each_broadcast(from_shape, from_shape, to_shape, |i, _, to_off| {
        out[to_off] += g[i];
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
        assert_eq!(g.val(y).data(), g.val(x).data());
    }

    #[test]
    fn conv_all_ones_center_value() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
        assert_eq!(g.val(y).at4(0, 0, 1, 1), 9.0);
        assert_eq!(g.val(y).at4(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn conv_matches_direct_loop_oracle() {
        let mut g = Graph::new();
        let mut s = 41u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let xd: Vec<f64> = (0..2 * 4 * 5 * 6).map(|_| next()).collect();
        let wd: Vec<f64> = (0..6 * 2 * 3 * 3).map(|_| next()).collect();
        let bd: Vec<f64> = (0..6).map(|_| next()).collect();
        let x = g.constant(t(&[2, 4, 5, 6], &xd));
        let w = g.constant(t(&[6, 2, 3, 3], &wd));
        let b = g.constant(t(&[6], &bd));
        let y = g.conv2d(x, w, Some(b), 2, 1, 2).unwrap();
        let expect = crate::oracle::conv2d_ref(&xd, (2, 4, 5, 6), &wd, (6, 2, 3, 3), &bd, 2, 1, 2);
        for (a, e) in g.val(y).data().iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_with_padding_wider_than_the_input() {
        // 7x7 kernel, pad 3, on maps smaller than the padding: some kernel
        // columns never overlap the input and must contribute nothing.
        let mut g = Graph::new();
        let mut s = 97u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for (h, w) in [(1, 1), (2, 2), (1, 3)] {
            let xd: Vec<f64> = (0..2 * h * w).map(|_| next()).collect();
            let wd: Vec<f64> = (0..2 * 49).map(|_| next()).collect();
            let bd: Vec<f64> = (0..2).map(|_| next()).collect();
            let x = g.constant(t(&[1, 2, h, w], &xd));
            let k = g.constant(t(&[2, 1, 7, 7], &wd));
            let b = g.constant(t(&[2], &bd));
            let y = g.conv2d(x, k, Some(b), 1, 3, 2).unwrap();
            let expect =
                crate::oracle::conv2d_ref(&xd, (1, 2, h, w), &wd, (2, 1, 7, 7), &bd, 1, 3, 2);
            assert_eq!(g.val(y).shape(), &[1, 2, h, w]);
            for (a, e) in g.val(y).data().iter().zip(&expect) {
                assert!((a - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_known_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[0.7, 0.7, 0.7, 0.7]));
        let y = g.softmax(x, 1).unwrap();
        for v in g.val(y).data() {
            assert!((v - 0.25).abs() <= 1e-12);
        }
        let x2 = g.constant(t(&[2], &[0.0, 3.0f64.ln()]));
        let y2 = g.softmax(x2, 0).unwrap();
        assert!((g.val(y2).data()[0] - 0.25).abs() <= 1e-12);
        assert!((g.val(y2).data()[1] - 0.75).abs() <= 1e-12);
        // Large logits must not overflow.
        let x3 = g.constant(t(&[2], &[1000.0, 1000.0]));
        let y3 = g.softmax(x3, 0).unwrap();
        assert!((g.val(y3).data()[0] - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn layer_norm_constant_channels_give_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 3, 2, 2], 5.0));
        let gamma = g.constant(Tensor::filled(&[3], 2.0));
        let beta = g.constant(t(&[3], &[0.1, 0.2, 0.3]));
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        for c in 0..3 {
            for yy in 0..2 {
                for xx in 0..2 {
                    let v = g.val(y).at4(0, c, yy, xx);
                    assert!((v - [0.1, 0.2, 0.3][c]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn gelu_fixed_points() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 10.0, -10.0]));
        let y = g.gelu(x).unwrap();
        assert_eq!(g.val(y).data()[0], 0.0);
        assert!((g.val(y).data()[1] - 10.0).abs() <= 1e-6);
        assert!(g.val(y).data()[2].abs() <= 1e-6);
    }

    #[test]
    fn pixel_unshuffle_spec_example_and_inverse() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.pixel_unshuffle(x, 2).unwrap();
        assert_eq!(g.val(y).shape(), &[1, 4, 1, 1]);
        assert_eq!(g.val(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = g.pixel_shuffle(y, 2).unwrap();
        assert_eq!(g.val(back).data(), g.val(x).data());
    }

    #[test]
    fn patch_split_merge_roundtrip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 8 * 8).map(|i| i as f64).collect();
        let x = g.constant(t(&[2, 3, 8, 8], &data));
        let p = g.patch_split(x, 4).unwrap();
        assert_eq!(g.val(p).shape(), &[8, 3, 4, 4]);
        let back = g.patch_merge(p, 2, 2).unwrap();
        assert_eq!(g.val(back).data(), g.val(x).data());
    }

    #[test]
    fn sum_square_gradient_matches_fd() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let rep = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-8, "rel err {}", rep.max_rel_err);
        // Analytic gradient is 2x.
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2, 2, 2], &(0..16).map(|i| i as f64).collect::<Vec<_>>()), true);
        let b = g.leaf(t(&[1, 2, 1, 1], &[10.0, 20.0]), true);
        let y = g.add(a, b).unwrap();
        assert_eq!(g.val(y).at4(0, 0, 0, 0), 10.0);
        assert_eq!(g.val(y).at4(0, 1, 0, 0), 24.0);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[8.0, 8.0]);
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[0.0]));
        let err = g.recip(x).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn matmul_small_example() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.val(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let bt = g.transpose_last2(b).unwrap();
        assert_eq!(g.val(bt).data(), &[5.0, 7.0, 6.0, 8.0]);
    }

    #[test]
    fn clamp_gradient_masks_outside() {
        let x = t(&[4], &[-1.0, 0.5, 3.0, 7.9]);
        let mut g = Graph::new();
        let v = g.leaf(x, true);
        let y = g.clamp(v, 0.1, 8.0).unwrap();
        assert_eq!(g.val(y).data(), &[0.1, 0.5, 3.0, 7.9]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[0.0, 1.0, 1.0, 1.0]);
    }
}
