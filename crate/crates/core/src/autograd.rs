//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! inputs (no gradient) or parameters; [`Graph::backward`] returns the
//! gradients of every parameter leaf that the root depends on.

use std::sync::Arc;

use crate::error::{shape_check, Result};
use crate::imaging::{resize_plane, resize_plane_adjoint, ResizeKernel};
use crate::tensor::{conv_out_len, conv_transpose_out_len, Float, Tensor, Unfold};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    LeakyRelu(Var, F),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    PixelShuffle { x: Var, r: usize },
    Resize { x: Var, rows: Arc<ResizeKernel>, cols: Arc<ResizeKernel> },
    ChannelMean(Var),
    MulChannel(Var, Var),
    MulSpatial(Var, Var),
    L1(Var, Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    grad: bool,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let grad = inputs.iter().any(|v| self.nodes[v.0].grad);
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        shape_check!(
            self.value(a).shape() == self.value(b).shape(),
            "{what}: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        Ok(())
    }

    /// Stride-1 2-D cross-correlation with zero padding.
    /// `w` is `[out, in, k, k]`, `b` is `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (co, wci, k, k2) = self.value(w).dims4()?;
        shape_check!(wci == ci && k == k2, "conv2d weight {:?} for input {:?}", self.value(w).shape(), self.value(x).shape());
        if let Some(b) = b {
            shape_check!(self.value(b).shape() == [co], "conv2d bias {:?}, want [{co}]", self.value(b).shape());
        }
        let (Some(oh), Some(ow)) = (conv_out_len(h, k, 1, pad), conv_out_len(wd, k, 1, pad)) else {
            return Err(crate::Error::Shape(format!("conv2d kernel {k} larger than padded {h}x{wd}")));
        };
        let u = Unfold { channels: ci, h, w: wd, k, stride: 1, pad, out_h: oh, out_w: ow };
        let direct = k == 1 && pad == 0;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        let mut cols = if direct { Vec::new() } else { vec![F::zero(); u.rows() * u.cols()] };
        for i in 0..n {
            let xi = &xv[i * ci * h * wd..(i + 1) * ci * h * wd];
            let oi = &mut out.data_mut()[i * co * oh * ow..(i + 1) * co * oh * ow];
            if direct {
                F::gemm(co, ci, oh * ow, wv, false, xi, false, F::zero(), oi);
            } else {
                u.im2col(xi, &mut cols);
                F::gemm(co, u.rows(), u.cols(), wv, false, &cols, false, F::zero(), oi);
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data());
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, &inputs))
    }

    /// Transposed convolution; `w` is `[in, out, k, k]`, output side
    /// `(len-1)*stride + k - 2*pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (wci, co, k, k2) = self.value(w).dims4()?;
        shape_check!(wci == ci && k == k2, "conv_transpose2d weight {:?} for input {:?}", self.value(w).shape(), self.value(x).shape());
        if let Some(b) = b {
            shape_check!(self.value(b).shape() == [co], "conv_transpose2d bias {:?}", self.value(b).shape());
        }
        let (Some(oh), Some(ow)) = (
            conv_transpose_out_len(h, k, stride, pad),
            conv_transpose_out_len(wd, k, stride, pad),
        ) else {
            return Err(crate::Error::Shape("conv_transpose2d padding exceeds output".into()));
        };
        let u = Unfold { channels: co, h: oh, w: ow, k, stride, pad, out_h: h, out_w: wd };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        let mut cols = vec![F::zero(); u.rows() * u.cols()];
        for i in 0..n {
            let xi = &xv[i * ci * h * wd..(i + 1) * ci * h * wd];
            F::gemm(u.rows(), ci, h * wd, wv, true, xi, false, F::zero(), &mut cols);
            u.col2im(&cols, &mut out.data_mut()[i * co * oh * ow..(i + 1) * co * oh * ow]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data());
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let v = self.value(a).map(|x| if x > F::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| F::one() / (F::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        shape_check!(!parts.is_empty(), "concat of nothing");
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            shape_check!((pn, ph, pw) == (n, h, w), "concat {:?} vs {:?}", self.value(p).shape(), self.value(parts[0]).shape());
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[i * pc * h * w..(i + 1) * pc * h * w]);
            }
        }
        let v = Tensor::from_vec(&[n, total_c, h, w], out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `[start, start + len)`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        shape_check!(start + len <= c && len > 0, "narrow {start}+{len} of {c} channels");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * h * w);
        for i in 0..n {
            let base = (i * c + start) * h * w;
            out.extend_from_slice(&src[base..base + len * h * w]);
        }
        let v = Tensor::from_vec(&[n, len, h, w], out)?;
        Ok(self.push(v, Op::Narrow { x, start }, &[x]))
    }

    /// Sub-pixel rearrangement `[n, c*r*r, h, w] -> [n, c, h*r, w*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, crr, h, w) = self.value(x).dims4()?;
        shape_check!(r >= 1 && crr % (r * r) == 0, "pixel_shuffle: {crr} channels not divisible by {r}^2");
        let c = crr / (r * r);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
        let dst = out.data_mut();
        let (oh, ow) = (h * r, w * r);
        for i in 0..n {
            for ch in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let sc = ch * r * r + dy * r + dx;
                        let sp = &src[(i * crr + sc) * h * w..(i * crr + sc + 1) * h * w];
                        let dp = &mut dst[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
                        for y in 0..h {
                            let drow = &mut dp[(y * r + dy) * ow..(y * r + dy + 1) * ow];
                            for xx in 0..w {
                                drow[xx * r + dx] = sp[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::PixelShuffle { x, r }, &[x]))
    }

    /// Bicubic resize of every plane to `out_h × out_w`.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        shape_check!(out_h >= 1 && out_w >= 1, "resize to {out_h}x{out_w}");
        let rows = Arc::new(ResizeKernel::new(h, out_h));
        let cols = Arc::new(ResizeKernel::new(w, out_w));
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        for (s, d) in self.value(x).data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(out_h * out_w)) {
            resize_plane(s, h, w, &rows, &cols, d);
        }
        Ok(self.push(out, Op::Resize { x, rows, cols }, &[x]))
    }

    /// Global average pool `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inv = F::one() / F::of((h * w) as f64);
        let data = self.value(x).data().chunks_exact(h * w).map(|p| p.iter().copied().sum::<F>() * inv).collect();
        let v = Tensor::from_vec(&[n, c, 1, 1], data)?;
        Ok(self.push(v, Op::ChannelMean(x), &[x]))
    }

    /// `x * s` with `s: [n, c, 1, 1]` broadcast over space.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        shape_check!(self.value(s).shape() == [n, c, 1, 1], "mul_channel scale {:?} for {:?}", self.value(s).shape(), self.value(x).shape());
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (plane, &k) in out.data_mut().chunks_exact_mut(h * w).zip(sv) {
            plane.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push(out, Op::MulChannel(x, s), &[x, s]))
    }

    /// `x * m` with `m: [n, 1, h, w]` broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        shape_check!(self.value(m).shape() == [n, 1, h, w], "mul_spatial mask {:?} for {:?}", self.value(m).shape(), self.value(x).shape());
        let mv = self.value(m).data();
        let mut out = self.value(x).clone();
        for (idx, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            let mask = &mv[(idx / c) * h * w..(idx / c + 1) * h * w];
            plane.iter_mut().zip(mask).for_each(|(v, &k)| *v *= k);
        }
        Ok(self.push(out, Op::MulSpatial(x, m), &[x, m]))
    }

    /// Mean absolute difference, a scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1")?;
        let n = self.value(a).len();
        let s: F = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y).abs()).sum();
        let v = Tensor::scalar(s / F::of(n as f64));
        Ok(self.push(v, Op::L1(a, b), &[a, b]))
    }

    /// Gradients of the scalar `root` with respect to every parameter leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        shape_check!(self.value(root).len() == 1, "backward needs a scalar root, got {:?}", self.value(root).shape());
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.grad && matches!(node.op, Op::Leaf)) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn backprop(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let (n, ci, h, wd) = self.value(*x).dims4()?;
                let (co, _, k, _) = self.value(*w).dims4()?;
                let (_, _, oh, ow) = out.dims4()?;
                let u = Unfold { channels: ci, h, w: wd, k, stride: 1, pad: *pad, out_h: oh, out_w: ow };
                let direct = k == 1 && *pad == 0;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_w = self.wants(*w);
                let need_x = self.wants(*x);
                let mut dw = Tensor::zeros(self.value(*w).shape());
                let mut dx = if need_x { Tensor::zeros(self.value(*x).shape()) } else { Tensor::zeros(&[0]) };
                let mut cols = if direct { Vec::new() } else { vec![F::zero(); u.rows() * u.cols()] };
                let plane_in = ci * h * wd;
                let plane_out = co * oh * ow;
                for i in 0..n {
                    let gi = &g.data()[i * plane_out..(i + 1) * plane_out];
                    let xi = &xv[i * plane_in..(i + 1) * plane_in];
                    if need_w {
                        if direct {
                            F::gemm(co, oh * ow, ci, gi, false, xi, true, F::one(), dw.data_mut());
                        } else {
                            u.im2col(xi, &mut cols);
                            F::gemm(co, u.cols(), u.rows(), gi, false, &cols, true, F::one(), dw.data_mut());
                        }
                    }
                    if need_x {
                        let dxi = &mut dx.data_mut()[i * plane_in..(i + 1) * plane_in];
                        if direct {
                            F::gemm(ci, co, oh * ow, wv, true, gi, false, F::zero(), dxi);
                        } else {
                            F::gemm(u.rows(), co, u.cols(), wv, true, gi, false, F::zero(), &mut cols);
                            u.col2im(&cols, dxi);
                        }
                    }
                }
                if need_w {
                    accumulate(grads, *w, dw);
                }
                if need_x {
                    accumulate(grads, *x, dx);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, channel_sums(g, co)?);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (n, ci, h, wd) = self.value(*x).dims4()?;
                let (_, co, k, _) = self.value(*w).dims4()?;
                let (_, _, oh, ow) = out.dims4()?;
                let u = Unfold { channels: co, h: oh, w: ow, k, stride: *stride, pad: *pad, out_h: h, out_w: wd };
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_w = self.wants(*w);
                let need_x = self.wants(*x);
                let mut dw = Tensor::zeros(self.value(*w).shape());
                let mut dx = if need_x { Tensor::zeros(self.value(*x).shape()) } else { Tensor::zeros(&[0]) };
                let mut cols = vec![F::zero(); u.rows() * u.cols()];
                let plane_in = ci * h * wd;
                let plane_out = co * oh * ow;
                for i in 0..n {
                    u.im2col(&g.data()[i * plane_out..(i + 1) * plane_out], &mut cols);
                    if need_x {
                        let dxi = &mut dx.data_mut()[i * plane_in..(i + 1) * plane_in];
                        F::gemm(ci, u.rows(), h * wd, wv, false, &cols, false, F::zero(), dxi);
                    }
                    if need_w {
                        let xi = &xv[i * plane_in..(i + 1) * plane_in];
                        F::gemm(ci, h * wd, u.rows(), xi, false, &cols, true, F::one(), dw.data_mut());
                    }
                }
                if need_w {
                    accumulate(grads, *w, dw);
                }
                if need_x {
                    accumulate(grads, *x, dx);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, channel_sums(g, co)?);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |gv, y| gv * y)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |gv, x| gv * x)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = g.zip_map(self.value(*a), |gv, x| if x > F::zero() { gv } else { gv * slope })?;
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |gv, y| gv * y * (F::one() - y))?;
                accumulate(grads, *a, d);
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = out.dims4()?;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * pc * h * w);
                        for i in 0..n {
                            let base = (i * total_c + offset) * h * w;
                            d.extend_from_slice(&g.data()[base..base + pc * h * w]);
                        }
                        accumulate(grads, p, Tensor::from_vec(&[n, pc, h, w], d)?);
                    }
                    offset += pc;
                }
            }
            Op::Narrow { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let len = out.shape()[1];
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for i in 0..n {
                    let base = (i * c + start) * h * w;
                    d.data_mut()[base..base + len * h * w].copy_from_slice(&g.data()[i * len * h * w..(i + 1) * len * h * w]);
                }
                accumulate(grads, *x, d);
            }
            Op::PixelShuffle { x, r } => {
                let r = *r;
                let (n, crr, h, w) = self.value(*x).dims4()?;
                let c = crr / (r * r);
                let (oh, ow) = (h * r, w * r);
                let mut d = Tensor::zeros(&[n, crr, h, w]);
                let dd = d.data_mut();
                let gd = g.data();
                for i in 0..n {
                    for ch in 0..c {
                        for dy in 0..r {
                            for dx in 0..r {
                                let sc = ch * r * r + dy * r + dx;
                                let sp = &mut dd[(i * crr + sc) * h * w..(i * crr + sc + 1) * h * w];
                                let gp = &gd[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
                                for y in 0..h {
                                    let grow = &gp[(y * r + dy) * ow..(y * r + dy + 1) * ow];
                                    for xx in 0..w {
                                        sp[y * w + xx] = grow[xx * r + dx];
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Resize { x, rows, cols } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (oh, ow) = (rows.out_len(), cols.out_len());
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for (gp, dp) in g.data().chunks_exact(oh * ow).zip(d.data_mut().chunks_exact_mut(h * w)) {
                    resize_plane_adjoint(gp, rows, cols, dp);
                }
                accumulate(grads, *x, d);
            }
            Op::ChannelMean(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let inv = F::one() / F::of((h * w) as f64);
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for (plane, &gv) in d.data_mut().chunks_exact_mut(h * w).zip(g.data()) {
                    plane.fill(gv * inv);
                }
                accumulate(grads, *x, d);
            }
            Op::MulChannel(x, s) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                if self.wants(*x) {
                    let mut d = g.clone();
                    for (plane, &k) in d.data_mut().chunks_exact_mut(h * w).zip(self.value(*s).data()) {
                        plane.iter_mut().for_each(|v| *v *= k);
                    }
                    accumulate(grads, *x, d);
                }
                if self.wants(*s) {
                    let data = g
                        .data()
                        .chunks_exact(h * w)
                        .zip(self.value(*x).data().chunks_exact(h * w))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    accumulate(grads, *s, Tensor::from_vec(self.value(*s).shape(), data)?);
                }
            }
            Op::MulSpatial(x, m) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let mv = self.value(*m).data();
                if self.wants(*x) {
                    let mut d = g.clone();
                    for (idx, plane) in d.data_mut().chunks_exact_mut(h * w).enumerate() {
                        let mask = &mv[(idx / c) * h * w..(idx / c + 1) * h * w];
                        plane.iter_mut().zip(mask).for_each(|(v, &k)| *v *= k);
                    }
                    accumulate(grads, *x, d);
                }
                if self.wants(*m) {
                    let mut d = Tensor::zeros(&[n, 1, h, w]);
                    let xv = self.value(*x).data();
                    for i in 0..n {
                        let dm = &mut d.data_mut()[i * h * w..(i + 1) * h * w];
                        for ch in 0..c {
                            let base = (i * c + ch) * h * w;
                            for p in 0..h * w {
                                dm[p] += g.data()[base + p] * xv[base + p];
                            }
                        }
                    }
                    accumulate(grads, *m, d);
                }
            }
            Op::L1(a, b) => {
                let n = self.value(*a).len();
                let k = g.item() / F::of(n as f64);
                let sign = self.value(*a).zip_map(self.value(*b), |x, y| {
                    if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        F::zero()
                    }
                })?;
                if self.wants(*b) {
                    accumulate(grads, *b, sign.map(|v| -v));
                }
                if self.wants(*a) {
                    accumulate(grads, *a, sign);
                }
            }
        }
        Ok(())
    }
}

fn add_channel_bias<F: Float>(out: &mut Tensor<F>, bias: &[F]) {
    let (_, c, h, w) = out.dims4().expect("rank 4");
    for (idx, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let b = bias[idx % c];
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<F: Float>(g: &Tensor<F>, c: usize) -> Result<Tensor<F>> {
    let (_, _, h, w) = g.dims4()?;
    let mut s = vec![F::zero(); c];
    for (idx, plane) in g.data().chunks_exact(h * w).enumerate() {
        s[idx % c] += plane.iter().copied().sum::<F>();
    }
    Tensor::from_vec(&[c], s)
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], v: Var, delta: Tensor<F>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += *d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Parameter gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a parameter leaf; `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(sum(out * probe))/d(param) against central differences for
    /// a graph-building closure with a single parameter tensor.
    fn check_op(shape: &[usize], build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p0 = rand_tensor(&mut rng, shape);
        let probe_shape = {
            let mut g = Graph::new();
            let p = g.param(p0.clone());
            let out = build(&mut g, p);
            g.value(out).shape().to_vec()
        };
        let probe = rand_tensor(&mut rng, &probe_shape);
        let objective = |p: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let mut g = Graph::new();
            let pv = g.param(p.clone());
            let out = build(&mut g, pv);
            let pr = g.input(probe.clone());
            let prod = g.mul(out, pr).unwrap();
            // sum(x) == numel * mean(|x - 0|) is not smooth; use l1 against a
            // huge offset so the absolute value never flips sign.
            let big = g.input(Tensor::full(&probe_shape, -1e2));
            let l = g.l1(prod, big).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).item(), grads.get(pv).cloned())
        };
        let (_, analytic) = objective(&p0);
        let analytic = analytic.expect("gradient reaches parameter");
        let h = 1e-5;
        for i in 0..p0.len() {
            let mut plus = p0.clone();
            plus.data_mut()[i] += h;
            let mut minus = p0.clone();
            minus.data_mut()[i] -= h;
            let fd = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
            let an = analytic.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "coord {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 5]);
        let xw = x.clone();
        check_op(&[2, 2, 4, 5], |g, p| {
            let wv = g.input(w.clone());
            g.conv2d(p, wv, None, 1).unwrap()
        });
        check_op(&[3, 2, 3, 3], |g, p| {
            let xv = g.input(xw.clone());
            g.conv2d(xv, p, None, 1).unwrap()
        });
        check_op(&[3], |g, p| {
            let xv = g.input(x.clone());
            let wv = g.input(w.clone());
            g.conv2d(xv, wv, Some(p), 1).unwrap()
        });
    }

    #[test]
    fn conv1x1_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_tensor(&mut rng, &[4, 3, 1, 1]);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        check_op(&[2, 3, 3, 3], |g, p| {
            let wv = g.input(w.clone());
            g.conv2d(p, wv, None, 0).unwrap()
        });
        check_op(&[4, 3, 1, 1], |g, p| {
            let xv = g.input(x.clone());
            g.conv2d(xv, p, None, 0).unwrap()
        });
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, pad) in [(4, 2, 1), (9, 3, 3)] {
            let w = rand_tensor(&mut rng, &[2, 3, k, k]);
            let x = rand_tensor(&mut rng, &[2, 2, 3, 2]);
            check_op(&[2, 2, 3, 2], |g, p| {
                let wv = g.input(w.clone());
                let out = g.conv_transpose2d(p, wv, None, s, pad).unwrap();
                assert_eq!(g.value(out).shape(), &[2, 3, 3 * s, 2 * s]);
                out
            });
            check_op(&[2, 3, k, k], |g, p| {
                let xv = g.input(x.clone());
                g.conv_transpose2d(xv, p, None, s, pad).unwrap()
            });
        }
    }

    #[test]
    fn elementwise_and_layout_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let other = rand_tensor(&mut rng, &[2, 8, 3, 3]);
        check_op(&[2, 8, 3, 3], |g, p| {
            let o = g.input(other.clone());
            let a = g.mul(p, o).unwrap();
            let b = g.sub(a, p).unwrap();
            let c = g.leaky_relu(b, 0.2);
            let d = g.sigmoid(c);
            let e = g.scale(d, 3.0);
            g.add(e, p).unwrap()
        });
        check_op(&[2, 8, 3, 3], |g, p| {
            let o = g.input(other.clone());
            let cat = g.concat(&[o, p, o]).unwrap();
            let n = g.narrow(cat, 5, 12).unwrap();
            g.pixel_shuffle(n, 2).unwrap()
        });
        check_op(&[2, 8, 3, 3], |g, p| g.resize(p, 6, 5).unwrap());
        check_op(&[2, 8, 6, 4], |g, p| g.resize(p, 3, 2).unwrap());
    }

    #[test]
    fn broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let x2 = x.clone();
        check_op(&[2, 3, 4, 4], |g, p| {
            let m = g.channel_mean(p).unwrap();
            let s = g.sigmoid(m);
            g.mul_channel(p, s).unwrap()
        });
        check_op(&[2, 1, 4, 4], |g, p| {
            let xv = g.input(x.clone());
            g.mul_spatial(xv, p).unwrap()
        });
        check_op(&[2, 3, 4, 4], |g, p| {
            let m = g.input(Tensor::full(&[2, 1, 4, 4], 0.3));
            let _ = &x2;
            g.mul_spatial(p, m).unwrap()
        });
    }

    #[test]
    fn pixel_shuffle_layout() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let x = g.input(Tensor::from_vec(&[1, 4, 1, 2], data).unwrap());
        let y = g.pixel_shuffle(x, 2).unwrap();
        // channel ch*4 + dy*2 + dx lands at (dy, 2*x + dx)
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]);
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let p = g.param(Tensor::full(&[1, 1, 2, 2], 2.0));
        let y = g.mul(x, p).unwrap();
        let t = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        let l = g.l1(y, t).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[0.25; 4]);
    }
}
