//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the record in reverse and returns gradients for every node that
//! depends on a trainable leaf. Graphs are built per forward pass and
//! discarded afterwards.

pub mod kernels;

use rustfft::num_complex::Complex;

pub use kernels::ConvSpec;
use kernels::{broadcast_binary, reduce_to};

use crate::spectral::{fft2_in_place, principal_phase};
use crate::tensor::{Shape, Tensor};
use crate::wavelet::{analysis_plane, synthesis_plane};
use crate::Scalar;

/// `(y0, x0, h, w)` of the tiles covering an `h×w` map, row-major; edge
/// tiles are smaller.
fn tiles(h: usize, w: usize, window: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for y0 in (0..h).step_by(window) {
        for x0 in (0..w).step_by(window) {
            out.push((y0, x0, window.min(h - y0), window.min(w - x0)));
        }
    }
    out
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, T),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Abs(Var),
    Silu(Var),
    Clamp(Var, T, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Concat(Vec<Var>),
    Slice(Var, usize),
    Upsample2(Var),
    AvgPool2(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        window: usize,
        probs: Vec<Vec<T>>,
    },
    Mean(Var),
    SumChannels(Var),
    MeanSpatial(Var),
    Idwt2([Var; 4]),
    Spectrum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record. Shape errors in graph construction are programming
/// errors and panic.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn wrt_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), f);
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.sqrt());
        self.push(value, Op::Sqrt(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs(x), &[x])
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(value, Op::Silu(x), &[x])
    }

    /// Clamps into `[lo, hi]`; gradient flows only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(value, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn clamp_min(&mut self, x: Var, lo: T) -> Var {
        self.clamp(x, lo, T::infinity())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let value = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, Op::Conv2d { x, w, b, spec }, &parents)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (value, means, rstds) =
            kernels::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups);
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            },
            &[x, gamma, beta],
        )
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let [n, _, h, w] = self.shape(parts[0]);
        let channels: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut value = Tensor::zeros([n, channels, h, w]);
        for b in 0..n {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.shape()[2..], [h, w], "concat spatial shape");
                for c in 0..src.shape()[1] {
                    value.plane_mut(b, offset + c).copy_from_slice(src.plane(b, c));
                }
                offset += src.shape()[1];
            }
        }
        self.push(value, Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let [n, _, h, w] = src.shape();
        let mut value = Tensor::zeros([n, len, h, w]);
        for b in 0..n {
            for c in 0..len {
                value.plane_mut(b, c).copy_from_slice(src.plane(b, start + c));
            }
        }
        self.push(value, Op::Slice(x, start), &[x])
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [n, c, h, w] = src.shape();
        let mut value = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for b in 0..n {
            for ch in 0..c {
                let s = src.plane(b, ch);
                let d = value.plane_mut(b, ch);
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                    }
                }
            }
        }
        self.push(value, Op::Upsample2(x), &[x])
    }

    /// 2×2 average pooling.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [n, c, h, w] = src.shape();
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut value = Tensor::zeros([n, c, oh, ow]);
        for b in 0..n {
            for ch in 0..c {
                let s = src.plane(b, ch);
                let d = value.plane_mut(b, ch);
                for y in 0..oh {
                    for xx in 0..ow {
                        d[y * ow + xx] = (s[2 * y * w + 2 * xx]
                            + s[2 * y * w + 2 * xx + 1]
                            + s[(2 * y + 1) * w + 2 * xx]
                            + s[(2 * y + 1) * w + 2 * xx + 1])
                            * quarter;
                    }
                }
            }
        }
        self.push(value, Op::AvgPool2(x), &[x])
    }

    /// Softmax attention of `q` positions over `k`/`v` positions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (value, probs) = kernels::attention_forward(self.value(q), self.value(k), self.value(v));
        self.push(value, Op::Attention { q, k, v, probs }, &[q, k, v])
    }

    /// Attention restricted to non-overlapping `window×window` tiles; `q`, `k`
    /// and `v` share spatial size. Equals [`Graph::attention`] when the whole
    /// map fits in one tile.
    pub fn windowed_attention(&mut self, q: Var, k: Var, v: Var, window: usize) -> Var {
        assert!(window > 0, "attention window");
        let [n, _, h, w] = self.shape(q);
        assert_eq!(self.shape(k)[2..], [h, w], "windowed attention key positions");
        assert_eq!(self.shape(v)[2..], [h, w], "windowed attention value positions");
        let cv = self.shape(v)[1];
        let mut value = Tensor::zeros([n, cv, h, w]);
        let mut probs = Vec::new();
        for (y0, x0, th, tw) in tiles(h, w, window) {
            let (out, p) = kernels::attention_forward(
                &kernels::crop(self.value(q), y0, x0, th, tw),
                &kernels::crop(self.value(k), y0, x0, th, tw),
                &kernels::crop(self.value(v), y0, x0, th, tw),
            );
            kernels::paste_add(&mut value, &out, y0, x0);
            probs.push(p);
        }
        self.push(value, Op::WindowAttention { q, k, v, window, probs }, &[q, k, v])
    }

    /// Mean of every element, as a `[1, 1, 1, 1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let m = src.data().iter().copied().sum::<T>() / T::from_usize(src.len()).unwrap();
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// `[n, c, h, w] → [n, 1, h, w]`.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [n, c, h, w] = src.shape();
        let mut value = Tensor::zeros([n, 1, h, w]);
        for b in 0..n {
            for ch in 0..c {
                for (d, &s) in value.plane_mut(b, 0).iter_mut().zip(src.plane(b, ch)) {
                    *d += s;
                }
            }
        }
        self.push(value, Op::SumChannels(x), &[x])
    }

    /// `[n, c, h, w] → [n, c, 1, 1]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [n, c, _, _] = src.shape();
        let count = T::from_usize(src.plane_len()).unwrap();
        let mut value = Tensor::zeros([n, c, 1, 1]);
        for b in 0..n {
            for ch in 0..c {
                value.data_mut()[b * c + ch] = src.plane(b, ch).iter().copied().sum::<T>() / count;
            }
        }
        self.push(value, Op::MeanSpatial(x), &[x])
    }

    /// One orthonormal Haar synthesis level from `(A, V, H, D)`.
    pub fn idwt2(&mut self, a: Var, v: Var, h: Var, d: Var) -> Var {
        let shape = self.shape(a);
        for other in [v, h, d] {
            assert_eq!(self.shape(other), shape, "idwt2 band shapes");
        }
        let [n, c, hh, ww] = shape;
        let mut value = Tensor::zeros([n, c, 2 * hh, 2 * ww]);
        for b in 0..n {
            for ch in 0..c {
                let dst = value.plane_mut(b, ch);
                synthesis_plane(
                    self.nodes[a.0].value.plane(b, ch),
                    self.nodes[v.0].value.plane(b, ch),
                    self.nodes[h.0].value.plane(b, ch),
                    self.nodes[d.0].value.plane(b, ch),
                    hh,
                    ww,
                    dst,
                );
            }
        }
        self.push(value, Op::Idwt2([a, v, h, d]), &[a, v, h, d])
    }

    /// Per-plane 2D DFT: `[n, c, h, w] → [n, 2c, h, w]`, amplitudes in
    /// channels `0..c` and principal phases in `c..2c`.
    pub fn spectrum(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [n, c, h, w] = src.shape();
        let mut value = Tensor::zeros([n, 2 * c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let spec = plane_spectrum(src.plane(b, ch), h, w);
                for (d, z) in value.plane_mut(b, ch).iter_mut().zip(&spec) {
                    *d = z.norm();
                }
                for (d, z) in value.plane_mut(b, c + ch).iter_mut().zip(&spec) {
                    *d = principal_phase(*z);
                }
            }
        }
        self.push(value, Op::Spectrum(x), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), [1, 1, 1, 1], "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to(g.clone(), self.shape(*a)));
                self.accumulate(grads, *b, reduce_to(g.clone(), self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to(g.clone(), self.shape(*a)));
                self.accumulate(grads, *b, reduce_to(g.map(|v| -v), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let ga = broadcast_binary(g, vb, |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(ga, va.shape()));
                }
                if self.nodes[b.0].needs_grad {
                    let gb = broadcast_binary(g, va, |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(gb, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let ga = broadcast_binary(g, vb, |x, y| x / y);
                    self.accumulate(grads, *a, reduce_to(ga, va.shape()));
                }
                if self.nodes[b.0].needs_grad {
                    // d(a/b)/db = -out / b
                    let t = broadcast_binary(g, out, |x, y| -x * y);
                    let gb = broadcast_binary(&t, vb, |x, y| x / y);
                    self.accumulate(grads, *b, reduce_to(gb, vb.shape()));
                }
            }
            Op::Affine(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Square(x) => {
                let gx = broadcast_binary(g, self.value(*x), |go, v| go * (v + v));
                self.accumulate(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let half = T::lit(0.5);
                let gx = broadcast_binary(g, out, |go, r| if r > T::zero() { go * half / r } else { T::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, broadcast_binary(g, out, |go, e| go * e));
            }
            Op::Abs(x) => {
                let gx = broadcast_binary(g, self.value(*x), |go, v| {
                    if v > T::zero() {
                        go
                    } else if v < T::zero() {
                        -go
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = broadcast_binary(g, self.value(*x), |go, v| {
                    let s = T::one() / (T::one() + (-v).exp());
                    go * s * (T::one() + v * (T::one() - s))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let gx = broadcast_binary(g, self.value(*x), |go, v| {
                    if v >= lo && v <= hi {
                        go
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, spec } => {
                let need_x = self.nodes[x.0].needs_grad;
                let (gx, gw, gb) = kernels::conv2d_backward(self.value(*x), self.value(*w), g, spec, need_x);
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *w, gw);
                if let Some(b) = b {
                    let shape = self.shape(*b);
                    self.accumulate(grads, *b, Tensor::from_vec(shape, gb.into_data()).unwrap());
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            } => {
                let (gx, gg, gb) =
                    kernels::group_norm_backward(self.value(*x), self.value(*gamma), *groups, means, rstds, g);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Tensor::zeros(shape);
                        for b in 0..shape[0] {
                            for c in 0..shape[1] {
                                gp.plane_mut(b, c).copy_from_slice(g.plane(b, offset + c));
                            }
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += shape[1];
                }
            }
            Op::Slice(x, start) => {
                let shape = self.shape(*x);
                let mut gx = Tensor::zeros(shape);
                for b in 0..shape[0] {
                    for c in 0..g.shape()[1] {
                        gx.plane_mut(b, start + c).copy_from_slice(g.plane(b, c));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample2(x) => {
                let shape = self.shape(*x);
                let [n, c, h, w] = shape;
                let mut gx = Tensor::zeros(shape);
                for b in 0..n {
                    for ch in 0..c {
                        let src = g.plane(b, ch);
                        let dst = gx.plane_mut(b, ch);
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool2(x) => {
                let shape = self.shape(*x);
                let [n, c, h, w] = shape;
                let ow = w / 2;
                let quarter = T::lit(0.25);
                let mut gx = Tensor::zeros(shape);
                for b in 0..n {
                    for ch in 0..c {
                        let src = g.plane(b, ch);
                        let dst = gx.plane_mut(b, ch);
                        for y in 0..(h / 2) * 2 {
                            for xx in 0..ow * 2 {
                                dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * quarter;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention { q, k, v, probs } => {
                let (gq, gk, gv) =
                    kernels::attention_backward(self.value(*q), self.value(*k), self.value(*v), probs, g);
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::WindowAttention { q, k, v, window, probs } => {
                let [_, _, h, w] = self.shape(*q);
                let mut gq = Tensor::zeros(self.shape(*q));
                let mut gk = Tensor::zeros(self.shape(*k));
                let mut gv = Tensor::zeros(self.shape(*v));
                for ((y0, x0, th, tw), p) in tiles(h, w, *window).into_iter().zip(probs) {
                    let (tq, tk, tv) = kernels::attention_backward(
                        &kernels::crop(self.value(*q), y0, x0, th, tw),
                        &kernels::crop(self.value(*k), y0, x0, th, tw),
                        &kernels::crop(self.value(*v), y0, x0, th, tw),
                        p,
                        &kernels::crop(g, y0, x0, th, tw),
                    );
                    kernels::paste_add(&mut gq, &tq, y0, x0);
                    kernels::paste_add(&mut gk, &tk, y0, x0);
                    kernels::paste_add(&mut gv, &tv, y0, x0);
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::Mean(x) => {
                let shape = self.shape(*x);
                let count = T::from_usize(shape.iter().product()).unwrap();
                self.accumulate(grads, *x, Tensor::full(shape, g.item() / count));
            }
            Op::SumChannels(x) => {
                let shape = self.shape(*x);
                let mut gx = Tensor::zeros(shape);
                for b in 0..shape[0] {
                    for c in 0..shape[1] {
                        gx.plane_mut(b, c).copy_from_slice(g.plane(b, 0));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MeanSpatial(x) => {
                let shape = self.shape(*x);
                let count = T::from_usize(shape[2] * shape[3]).unwrap();
                let mut gx = Tensor::zeros(shape);
                for b in 0..shape[0] {
                    for c in 0..shape[1] {
                        let v = g.data()[b * shape[1] + c] / count;
                        gx.plane_mut(b, c).fill(v);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Idwt2(bands) => {
                // Orthogonal synthesis: the adjoint is analysis.
                let shape = self.shape(bands[0]);
                let [n, c, h, w] = shape;
                let mut outs = [
                    Tensor::zeros(shape),
                    Tensor::zeros(shape),
                    Tensor::zeros(shape),
                    Tensor::zeros(shape),
                ];
                for b in 0..n {
                    for ch in 0..c {
                        let [ga, gv, gh, gd] = &mut outs;
                        analysis_plane(
                            g.plane(b, ch),
                            2 * h,
                            2 * w,
                            ga.plane_mut(b, ch),
                            gv.plane_mut(b, ch),
                            gh.plane_mut(b, ch),
                            gd.plane_mut(b, ch),
                        );
                    }
                }
                for (band, gb) in bands.iter().zip(outs) {
                    self.accumulate(grads, *band, gb);
                }
            }
            Op::Spectrum(x) => {
                let src = self.value(*x);
                let shape = src.shape();
                let [n, c, h, w] = shape;
                let mut gx = Tensor::zeros(shape);
                for b in 0..n {
                    for ch in 0..c {
                        let spec = plane_spectrum(src.plane(b, ch), h, w);
                        let g_amp = g.plane(b, ch);
                        let g_pha = g.plane(b, c + ch);
                        let mut buf: Vec<Complex<T>> = spec
                            .iter()
                            .zip(g_amp.iter().zip(g_pha))
                            .map(|(z, (&ga, &gp))| {
                                let m2 = z.norm_sqr();
                                if m2 == T::zero() {
                                    return Complex::new(T::zero(), T::zero());
                                }
                                let m = m2.sqrt();
                                let re = ga * z.re / m - gp * z.im / m2;
                                let im = ga * z.im / m + gp * z.re / m2;
                                Complex::new(re, im)
                            })
                            .collect();
                        // dL/dx = Re(unnormalized inverse DFT of dL/dRe + i·dL/dIm)
                        fft2_in_place(&mut buf, h, w, true);
                        for (d, z) in gx.plane_mut(b, ch).iter_mut().zip(&buf) {
                            *d = z.re;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

fn plane_spectrum<T: Scalar>(plane: &[T], h: usize, w: usize) -> Vec<Complex<T>> {
    let mut buf: Vec<Complex<T>> = plane.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2_in_place(&mut buf, h, w, false);
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckReport};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    fn assert_ok(report: GradCheckReport) {
        for t in &report.tensors {
            assert!(t.relative_error <= 1e-6, "{}: {:e}", t.name, t.relative_error);
        }
    }

    #[test]
    fn elementwise_ops() {
        let inputs = vec![("a".to_string(), random([2, 3, 2, 2], 1)), ("b".to_string(), random([2, 1, 1, 1], 2))];
        let report = check_gradients(&inputs, 1e-5, |g, v| {
            let b2 = g.affine(v[1], 1.0, 2.0);
            let s = g.add(v[0], v[1]);
            let m = g.mul(s, v[0]);
            let d = g.div(m, b2);
            let e = g.exp(d);
            let q = g.square(e);
            let sq = g.sqrt(q);
            let si = g.silu(sq);
            let sub = g.sub(si, v[0]);
            let ab = g.abs(sub);
            let cl = g.clamp(ab, 0.0, 1.5);
            g.mean(cl)
        });
        assert_ok(report);
    }

    #[test]
    fn structural_ops() {
        let inputs = vec![("x".to_string(), random([2, 4, 4, 4], 3))];
        let report = check_gradients(&inputs, 1e-5, |g, v| {
            let up = g.upsample2(v[0]);
            let pooled = g.avg_pool2(up);
            let a = g.slice_channels(pooled, 0, 2);
            let b = g.slice_channels(pooled, 2, 2);
            let cat = g.concat(&[b, a, v[0]]);
            let sc = g.sum_channels(cat);
            let ms = g.mean_spatial(v[0]);
            let mixed = g.mul(sc, ms);
            let sq = g.square(mixed);
            g.mean(sq)
        });
        assert_ok(report);
    }

    #[test]
    fn conv_norm_attention() {
        let inputs = vec![
            ("x".to_string(), random([2, 4, 4, 4], 4)),
            ("w".to_string(), random([4, 2, 3, 3], 5)),
            ("b".to_string(), random([1, 4, 1, 1], 6)),
            ("gamma".to_string(), random([1, 4, 1, 1], 7)),
            ("beta".to_string(), random([1, 4, 1, 1], 8)),
            ("k".to_string(), random([2, 4, 2, 2], 9)),
        ];
        let report = check_gradients(&inputs, 1e-5, |g, v| {
            let c = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::same(3).with_groups(2));
            let d = g.conv2d(c, v[1], None, ConvSpec::dilated(3, 2).with_groups(2));
            let s = g.conv2d(d, v[1], Some(v[2]), ConvSpec::same(3).with_groups(2).with_stride(2));
            let n = g.group_norm(v[0], v[3], v[4], 2);
            let a = g.attention(n, v[5], v[5]);
            let sum = g.add(a, v[0]);
            let p = g.avg_pool2(sum);
            let prod = g.mul(p, s);
            let sq = g.square(prod);
            g.mean(sq)
        });
        assert_ok(report);
    }

    #[test]
    fn windowed_attention_gradients_and_global_limit() {
        let inputs = vec![
            ("q".to_string(), random([2, 3, 5, 4], 30)),
            ("k".to_string(), random([2, 3, 5, 4], 31)),
            ("v".to_string(), random([2, 2, 5, 4], 32)),
        ];
        let report = check_gradients(&inputs, 1e-5, |g, v| {
            let a = g.windowed_attention(v[0], v[1], v[2], 2);
            let sq = g.square(a);
            g.mean(sq)
        });
        assert_ok(report);

        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let windowed = g.windowed_attention(vars[0], vars[1], vars[2], 8);
        let global = g.attention(vars[0], vars[1], vars[2]);
        assert!(g.value(windowed).max_abs_diff(g.value(global)) < 1e-14);
    }

    #[test]
    fn wavelet_and_spectrum() {
        let inputs = vec![
            ("a".to_string(), random([1, 2, 4, 4], 10)),
            ("v".to_string(), random([1, 2, 4, 4], 11)),
        ];
        let report = check_gradients(&inputs, 1e-6, |g, v| {
            let img = g.idwt2(v[0], v[1], v[0], v[1]);
            let s = g.spectrum(img);
            let t = g.square(s);
            g.mean(t)
        });
        assert_ok(report);
    }

    #[test]
    fn idwt2_matches_wavelet_module() {
        use crate::tensor::ImageTensor;
        let bands: Vec<_> = (0..4).map(|i| random([1, 3, 2, 2], 20 + i)).collect();
        let mut g = Graph::new();
        let vars: Vec<_> = bands.iter().map(|b| g.constant(b.clone())).collect();
        let out = g.idwt2(vars[0], vars[1], vars[2], vars[3]);
        let imgs: Vec<_> = bands.iter().map(|b| ImageTensor::from_tensor(b, 0).unwrap()).collect();
        let direct = crate::wavelet::idwt2(&imgs[0], &imgs[1], &imgs[2], &imgs[3]).unwrap();
        assert_eq!(g.value(out), &direct.to_tensor());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(c, x);
        let grads = g.backward(y);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
    }
}
