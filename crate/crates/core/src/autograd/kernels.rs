//! Forward and backward kernels for the heavier graph operations.

use crate::tensor::{Shape, Tensor};
use crate::scalar::{gemm, MatRef};
use crate::Scalar;

/// Convolution geometry. Kernels are square; padding is zero-fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, "same" padding for a `k×k` kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn dilated(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel / 2),
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

/// Range of output columns whose tap `k` lands inside `[0, input)`, and the
/// signed input offset of output column 0.
#[inline]
fn valid_range(input: usize, output: usize, k: usize, spec: &ConvSpec) -> (usize, usize, isize) {
    let offset = (k * spec.dilation) as isize - spec.padding as isize;
    let s = spec.stride as isize;
    // ox*s + offset >= 0  and  ox*s + offset <= input-1
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi_num = input as isize - 1 - offset;
    let hi = if hi_num < 0 { 0 } else { (hi_num / s + 1).min(output as isize) };
    (lo as usize, hi.max(lo) as usize, offset)
}

fn conv2d_forward_direct<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Tensor<T> {
    let [n_batch, cin, height, width] = x.shape();
    let [cout, cin_g, kh, kw] = w.shape();
    assert_eq!(cin_g * spec.groups, cin, "conv input channels");
    assert_eq!(cout % spec.groups, 0, "conv output channels");
    let cout_g = cout / spec.groups;
    let oh = spec.output_size(height, kh);
    let ow = spec.output_size(width, kw);
    let mut out = Tensor::zeros([n_batch, cout, oh, ow]);
    let wd = w.data();
    for n in 0..n_batch {
        for oc in 0..cout {
            let g = oc / cout_g;
            let out_plane = out.plane_mut(n, oc);
            if let Some(bias) = b {
                out_plane.fill(bias.data()[oc]);
            }
            for icl in 0..cin_g {
                let in_plane = x.plane(n, g * cin_g + icl);
                for ky in 0..kh {
                    let (oy_lo, oy_hi, y_off) = valid_range(height, oh, ky, spec);
                    for kx in 0..kw {
                        let wv = wd[((oc * cin_g + icl) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi, x_off) = valid_range(width, ow, kx, spec);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * spec.stride) as isize + y_off;
                            let in_row = &in_plane[iy as usize * width..(iy as usize + 1) * width];
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            if spec.stride == 1 {
                                let ix0 = (ox_lo as isize + x_off) as usize;
                                let len = ox_hi - ox_lo;
                                for (o, &i) in out_row[ox_lo..ox_hi].iter_mut().zip(&in_row[ix0..ix0 + len]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * spec.stride) as isize + x_off;
                                    out_row[ox] += wv * in_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_direct<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    spec: &ConvSpec,
    need_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n_batch, _, height, width] = x.shape();
    let [cout, cin_g, kh, kw] = w.shape();
    let cout_g = cout / spec.groups;
    let [_, _, oh, ow] = gout.shape();
    let mut gx = if need_x { Some(Tensor::zeros(x.shape())) } else { None };
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros([1, cout, 1, 1]);
    let wd = w.data();
    for n in 0..n_batch {
        for oc in 0..cout {
            let g = oc / cout_g;
            let gplane = gout.plane(n, oc);
            gb.data_mut()[oc] += gplane.iter().copied().sum::<T>();
            for icl in 0..cin_g {
                let ic = g * cin_g + icl;
                let in_plane = x.plane(n, ic);
                for ky in 0..kh {
                    let (oy_lo, oy_hi, y_off) = valid_range(height, oh, ky, spec);
                    for kx in 0..kw {
                        let widx = ((oc * cin_g + icl) * kh + ky) * kw + kx;
                        let wv = wd[widx];
                        let (ox_lo, ox_hi, x_off) = valid_range(width, ow, kx, spec);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * spec.stride) as isize + y_off) as usize;
                            let in_row = &in_plane[iy * width..(iy + 1) * width];
                            let g_row = &gplane[oy * ow..(oy + 1) * ow];
                            if spec.stride == 1 {
                                let ix0 = (ox_lo as isize + x_off) as usize;
                                let len = ox_hi - ox_lo;
                                for (&go, &i) in g_row[ox_lo..ox_hi].iter().zip(&in_row[ix0..ix0 + len]) {
                                    acc += go * i;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * spec.stride) as isize + x_off) as usize;
                                    acc += g_row[ox] * in_row[ix];
                                }
                            }
                        }
                        gw.data_mut()[widx] += acc;
                        if let Some(gx) = gx.as_mut() {
                            let gx_plane = gx.plane_mut(n, ic);
                            for oy in oy_lo..oy_hi {
                                let iy = ((oy * spec.stride) as isize + y_off) as usize;
                                let g_row = &gplane[oy * ow..(oy + 1) * ow];
                                let gx_row = &mut gx_plane[iy * width..(iy + 1) * width];
                                if spec.stride == 1 {
                                    let ix0 = (ox_lo as isize + x_off) as usize;
                                    let len = ox_hi - ox_lo;
                                    for (d, &go) in gx_row[ix0..ix0 + len].iter_mut().zip(&g_row[ox_lo..ox_hi]) {
                                        *d += wv * go;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = ((ox * spec.stride) as isize + x_off) as usize;
                                        gx_row[ix] += wv * g_row[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Dense convolutions go through im2col and a matrix product; depthwise and
/// very small ones use the direct loops.
fn use_gemm(w_shape: [usize; 4], groups: usize) -> bool {
    let [cout, cin_g, kh, kw] = w_shape;
    cout / groups >= 4 && cin_g * kh * kw >= 8
}

/// Unfolds group `g` of sample `n` into a `(cin_g·kh·kw) × (oh·ow)` matrix.
fn im2col<T: Scalar>(x: &Tensor<T>, n: usize, g: usize, kernel: (usize, usize, usize), out: (usize, usize), spec: &ConvSpec, cols: &mut [T]) {
    let [_, _, height, width] = x.shape();
    let (cin_g, kh, kw) = kernel;
    let (oh, ow) = out;
    let p = oh * ow;
    cols.fill(T::zero());
    for icl in 0..cin_g {
        let plane = x.plane(n, g * cin_g + icl);
        for ky in 0..kh {
            let (oy_lo, oy_hi, y_off) = valid_range(height, oh, ky, spec);
            for kx in 0..kw {
                let (ox_lo, ox_hi, x_off) = valid_range(width, ow, kx, spec);
                let row = &mut cols[((icl * kh + ky) * kw + kx) * p..][..p];
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * spec.stride) as isize + y_off) as usize;
                    let src = &plane[iy * width..(iy + 1) * width];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        dst[ox] = src[((ox * spec.stride) as isize + x_off) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into the input gradient.
fn col2im<T: Scalar>(cols: &[T], n: usize, g: usize, kernel: (usize, usize, usize), out: (usize, usize), spec: &ConvSpec, gx: &mut Tensor<T>) {
    let [_, _, height, width] = gx.shape();
    let (cin_g, kh, kw) = kernel;
    let (oh, ow) = out;
    let p = oh * ow;
    for icl in 0..cin_g {
        let plane = gx.plane_mut(n, g * cin_g + icl);
        for ky in 0..kh {
            let (oy_lo, oy_hi, y_off) = valid_range(height, oh, ky, spec);
            for kx in 0..kw {
                let (ox_lo, ox_hi, x_off) = valid_range(width, ow, kx, spec);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = &cols[((icl * kh + ky) * kw + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * spec.stride) as isize + y_off) as usize;
                    let dst = &mut plane[iy * width..(iy + 1) * width];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        dst[((ox * spec.stride) as isize + x_off) as usize] += src[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Tensor<T> {
    if !use_gemm(w.shape(), spec.groups) {
        return conv2d_forward_direct(x, w, b, spec);
    }
    let [n_batch, cin, height, width] = x.shape();
    let [cout, cin_g, kh, kw] = w.shape();
    assert_eq!(cin_g * spec.groups, cin, "conv input channels");
    assert_eq!(cout % spec.groups, 0, "conv output channels");
    let cout_g = cout / spec.groups;
    let (oh, ow) = (spec.output_size(height, kh), spec.output_size(width, kw));
    let (k, p) = (cin_g * kh * kw, oh * ow);
    let mut out = Tensor::zeros([n_batch, cout, oh, ow]);
    let mut cols = vec![T::zero(); k * p];
    for n in 0..n_batch {
        for g in 0..spec.groups {
            im2col(x, n, g, (cin_g, kh, kw), (oh, ow), spec, &mut cols);
            let wg = MatRef::row_major(&w.data()[g * cout_g * k..(g + 1) * cout_g * k], cout_g, k);
            let start = (n * cout + g * cout_g) * p;
            let dst = &mut out.data_mut()[start..start + cout_g * p];
            gemm(wg, MatRef::row_major(&cols, k, p), T::zero(), dst);
            if let Some(bias) = b {
                for (o, plane) in dst.chunks_exact_mut(p).enumerate() {
                    let bv = bias.data()[g * cout_g + o];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    spec: &ConvSpec,
    need_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    if !use_gemm(w.shape(), spec.groups) {
        return conv2d_backward_direct(x, w, gout, spec, need_x);
    }
    let n_batch = x.shape()[0];
    let [cout, cin_g, kh, kw] = w.shape();
    let cout_g = cout / spec.groups;
    let [_, _, oh, ow] = gout.shape();
    let (k, p) = (cin_g * kh * kw, oh * ow);
    let mut gx = if need_x { Some(Tensor::zeros(x.shape())) } else { None };
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros([1, cout, 1, 1]);
    let mut cols = vec![T::zero(); k * p];
    for n in 0..n_batch {
        for oc in 0..cout {
            gb.data_mut()[oc] += gout.plane(n, oc).iter().copied().sum::<T>();
        }
        for g in 0..spec.groups {
            let start = (n * cout + g * cout_g) * p;
            let gslice = &gout.data()[start..start + cout_g * p];
            im2col(x, n, g, (cin_g, kh, kw), (oh, ow), spec, &mut cols);
            let gw_g = &mut gw.data_mut()[g * cout_g * k..(g + 1) * cout_g * k];
            gemm(MatRef::row_major(gslice, cout_g, p), MatRef::transposed(&cols, k, p), T::one(), gw_g);
            if let Some(gx) = gx.as_mut() {
                let wg = &w.data()[g * cout_g * k..(g + 1) * cout_g * k];
                gemm(MatRef::transposed(wg, cout_g, k), MatRef::row_major(gslice, cout_g, p), T::zero(), &mut cols);
                col2im(&cols, n, g, (cin_g, kh, kw), (oh, ow), spec, gx);
            }
        }
    }
    (gx, gw, gb)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Returns the normalized output and per-`(n, group)` mean and inverse std.
pub fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n_batch, channels, _, _] = x.shape();
    assert_eq!(channels % groups, 0, "group norm channels");
    let cg = channels / groups;
    let plane = x.plane_len();
    let count = T::from_usize(cg * plane).unwrap();
    let eps = T::lit(GROUP_NORM_EPS);
    let mut out = Tensor::zeros(x.shape());
    let mut means = Vec::with_capacity(n_batch * groups);
    let mut rstds = Vec::with_capacity(n_batch * groups);
    for n in 0..n_batch {
        for g in 0..groups {
            let mut sum = T::zero();
            for c in g * cg..(g + 1) * cg {
                sum += x.plane(n, c).iter().copied().sum::<T>();
            }
            let mean = sum / count;
            let mut var = T::zero();
            for c in g * cg..(g + 1) * cg {
                var += x.plane(n, c).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
            }
            let rstd = T::one() / (var / count + eps).sqrt();
            for c in g * cg..(g + 1) * cg {
                let (ga, be) = (gamma.data()[c], beta.data()[c]);
                let src = x.plane(n, c);
                for (o, &v) in out.plane_mut(n, c).iter_mut().zip(src) {
                    *o = (v - mean) * rstd * ga + be;
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
    }
    (out, means, rstds)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    groups: usize,
    means: &[T],
    rstds: &[T],
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n_batch, channels, _, _] = x.shape();
    let cg = channels / groups;
    let plane = x.plane_len();
    let count = T::from_usize(cg * plane).unwrap();
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros(gamma.shape());
    let mut gbeta = Tensor::zeros(gamma.shape());
    for n in 0..n_batch {
        for g in 0..groups {
            let (mean, rstd) = (means[n * groups + g], rstds[n * groups + g]);
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for c in g * cg..(g + 1) * cg {
                let ga = gamma.data()[c];
                let mut gg = T::zero();
                let mut gb = T::zero();
                for (&v, &go) in x.plane(n, c).iter().zip(gout.plane(n, c)) {
                    let xhat = (v - mean) * rstd;
                    gg += go * xhat;
                    gb += go;
                    let d = go * ga;
                    sum_d += d;
                    sum_dx += d * xhat;
                }
                ggamma.data_mut()[c] += gg;
                gbeta.data_mut()[c] += gb;
            }
            let mean_d = sum_d / count;
            let mean_dx = sum_dx / count;
            for c in g * cg..(g + 1) * cg {
                let ga = gamma.data()[c];
                let src = x.plane(n, c);
                let go_plane = gout.plane(n, c);
                for ((dst, &v), &go) in gx.plane_mut(n, c).iter_mut().zip(src).zip(go_plane) {
                    let xhat = (v - mean) * rstd;
                    *dst = rstd * (go * ga - mean_d - xhat * mean_dx);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Single-head scaled dot-product attention over spatial positions.
///
/// `q: [n, c, hq, wq]`, `k: [n, c, hk, wk]`, `v: [n, cv, hk, wk]`; returns the
/// `[n, cv, hq, wq]` output and the row-stochastic weights `[n, pq, pk]`.
pub fn attention_forward<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let [n_batch, c, hq, wq] = q.shape();
    let [_, ck, hk, wk] = k.shape();
    let [_, cv, hv, wv] = v.shape();
    assert_eq!(c, ck, "attention query/key width");
    assert_eq!((hk, wk), (hv, wv), "attention key/value positions");
    let (pq, pk) = (hq * wq, hk * wk);
    let scale = T::one() / T::from_usize(c).unwrap().sqrt();
    let mut probs = vec![T::zero(); n_batch * pq * pk];
    let mut out = Tensor::zeros([n_batch, cv, hq, wq]);
    for n in 0..n_batch {
        let p = &mut probs[n * pq * pk..(n + 1) * pq * pk];
        let qn = &q.data()[n * c * pq..(n + 1) * c * pq];
        let kn = &k.data()[n * c * pk..(n + 1) * c * pk];
        let vn = &v.data()[n * cv * pk..(n + 1) * cv * pk];
        // S = Qᵀ K, with Q and K stored channel-major.
        gemm(MatRef::transposed(qn, c, pq), MatRef::row_major(kn, c, pk), T::zero(), p);
        for row in p.chunks_exact_mut(pk) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max) * scale;
            let mut total = T::zero();
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                total += *s;
            }
            let inv = T::one() / total;
            row.iter_mut().for_each(|s| *s *= inv);
        }
        let on = &mut out.data_mut()[n * cv * pq..(n + 1) * cv * pq];
        gemm(MatRef::row_major(vn, cv, pk), MatRef::transposed(p, pq, pk), T::zero(), on);
    }
    (out, probs)
}

/// Returns `(grad_q, grad_k, grad_v)`.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n_batch, c, hq, wq] = q.shape();
    let [_, _, hk, wk] = k.shape();
    let cv = v.shape()[1];
    let (pq, pk) = (hq * wq, hk * wk);
    let scale = T::one() / T::from_usize(c).unwrap().sqrt();
    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gv = Tensor::zeros(v.shape());
    let mut dp = vec![T::zero(); pq * pk];
    for n in 0..n_batch {
        let p = &probs[n * pq * pk..(n + 1) * pq * pk];
        let qn = &q.data()[n * c * pq..(n + 1) * c * pq];
        let kn = &k.data()[n * c * pk..(n + 1) * c * pk];
        let vn = &v.data()[n * cv * pk..(n + 1) * cv * pk];
        let gn = &gout.data()[n * cv * pq..(n + 1) * cv * pq];
        gemm(MatRef::transposed(gn, cv, pq), MatRef::row_major(vn, cv, pk), T::zero(), &mut dp);
        gemm(
            MatRef::row_major(gn, cv, pq),
            MatRef::row_major(p, pq, pk),
            T::zero(),
            &mut gv.data_mut()[n * cv * pk..(n + 1) * cv * pk],
        );
        // dS = P ⊙ (dP − rowsum(P ⊙ dP)), scaled into the logits.
        for (prow, drow) in p.chunks_exact(pk).zip(dp.chunks_exact_mut(pk)) {
            let inner: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pij) in drow.iter_mut().zip(prow) {
                *d = pij * (*d - inner) * scale;
            }
        }
        gemm(
            MatRef::row_major(kn, c, pk),
            MatRef::transposed(&dp, pq, pk),
            T::zero(),
            &mut gq.data_mut()[n * c * pq..(n + 1) * c * pq],
        );
        gemm(
            MatRef::row_major(qn, c, pq),
            MatRef::row_major(&dp, pq, pk),
            T::zero(),
            &mut gk.data_mut()[n * c * pk..(n + 1) * c * pk],
        );
    }
    (gq, gk, gv)
}

/// Spatial sub-block `[y0, y0 + h) × [x0, x0 + w)` of every plane.
pub fn crop<T: Scalar>(x: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let [n, c, _, src_w] = x.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[(y0 + y) * src_w + x0..(y0 + y) * src_w + x0 + w]);
            }
        }
    }
    out
}

/// Adds `block` into `dst` at spatial offset `(y0, x0)`.
pub fn paste_add<T: Scalar>(dst: &mut Tensor<T>, block: &Tensor<T>, y0: usize, x0: usize) {
    let [n, c, h, w] = block.shape();
    let dst_w = dst.shape()[3];
    for b in 0..n {
        for ch in 0..c {
            let src = block.plane(b, ch);
            let d = dst.plane_mut(b, ch);
            for y in 0..h {
                for (o, &v) in d[(y0 + y) * dst_w + x0..(y0 + y) * dst_w + x0 + w].iter_mut().zip(&src[y * w..(y + 1) * w]) {
                    *o += v;
                }
            }
        }
    }
}

/// Output shape of a broadcasting binary op; dimensions must match or be 1.
pub fn broadcast_shape(a: Shape, b: Shape) -> Shape {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("incompatible broadcast shapes {a:?} and {b:?}"),
        };
    }
    out
}

fn strides(shape: Shape, out: Shape) -> [usize; 4] {
    let dense = [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1];
    let mut s = [0; 4];
    for d in 0..4 {
        s[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { dense[d] };
    }
    s
}

pub fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape(), data).unwrap();
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = strides(a.shape(), out_shape);
    let sb = strides(b.shape(), out_shape);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    let (ad, bd) = (a.data(), b.data());
    for n in 0..out_shape[0] {
        for c in 0..out_shape[1] {
            for y in 0..out_shape[2] {
                let abase = n * sa[0] + c * sa[1] + y * sa[2];
                let bbase = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out_shape[3] {
                    data.push(f(ad[abase + x * sa[3]], bd[bbase + x * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(out_shape, data).unwrap()
}

/// Sums `g` down to `shape` over broadcast dimensions.
pub fn reduce_to<T: Scalar>(g: Tensor<T>, shape: Shape) -> Tensor<T> {
    if g.shape() == shape {
        return g;
    }
    let gs = g.shape();
    let st = strides(shape, gs);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let gd = g.data();
    let mut i = 0;
    for n in 0..gs[0] {
        for c in 0..gs[1] {
            for y in 0..gs[2] {
                let base = n * st[0] + c * st[1] + y * st[2];
                for x in 0..gs[3] {
                    od[base + x * st[3]] += gd[i];
                    i += 1;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: Shape, seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| (((i as u64 + 1) * (seed * 2 + 7919)) % 1009) as f64 / 504.5 - 1.0).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        let cases = [
            ([2, 6, 9, 7], [8, 6, 3, 3], ConvSpec::same(3)),
            ([1, 4, 10, 10], [8, 4, 3, 3], ConvSpec::same(3).with_stride(2)),
            ([1, 8, 8, 8], [8, 4, 3, 3], ConvSpec::dilated(3, 2).with_groups(2)),
            ([2, 16, 5, 5], [4, 16, 1, 1], ConvSpec::same(1)),
        ];
        for (i, (xs, ws, spec)) in cases.into_iter().enumerate() {
            assert!(use_gemm(ws, spec.groups));
            let x = pseudo(xs, i as u64);
            let w = pseudo(ws, 10 + i as u64);
            let b = pseudo([1, ws[0], 1, 1], 20 + i as u64);
            let fast = conv2d_forward(&x, &w, Some(&b), &spec);
            let slow = conv2d_forward_direct(&x, &w, Some(&b), &spec);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
            let gout = pseudo(fast.shape(), 30 + i as u64);
            let (gx, gw, gb) = conv2d_backward(&x, &w, &gout, &spec, true);
            let (gx2, gw2, gb2) = conv2d_backward_direct(&x, &w, &gout, &spec, true);
            assert!(gx.unwrap().max_abs_diff(&gx2.unwrap()) < 1e-12);
            assert!(gw.max_abs_diff(&gw2) < 1e-12);
            assert!(gb.max_abs_diff(&gb2) < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d_forward(&x, &w, None, &ConvSpec::same(3));
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // Direct definition with explicit bounds checks.
        let x = Tensor::from_vec([1, 2, 5, 6], (0..60).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::from_vec([4, 1, 3, 3], (0..36).map(|v| (v as f64 * 0.11).cos()).collect()).unwrap();
        for spec in [
            ConvSpec::same(3).with_groups(2),
            ConvSpec::dilated(3, 2).with_groups(2),
            ConvSpec::same(3).with_groups(2).with_stride(2),
        ] {
            let y = conv2d_forward(&x, &w, None, &spec);
            let [_, _, oh, ow] = y.shape();
            for oc in 0..4 {
                let ic = oc / 2;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    acc += w.data()[oc * 9 + ky * 3 + kx] * x.plane(0, ic)[iy as usize * 6 + ix as usize];
                                }
                            }
                        }
                        assert!((y.plane(0, oc)[oy * ow + ox] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn broadcasting_and_reduction() {
        let a = Tensor::from_vec([2, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let b = Tensor::from_vec([2, 1, 1, 1], vec![10.0, 100.0]).unwrap();
        let s = broadcast_binary(&a, &b, |x, y| x + y);
        assert_eq!(s.data(), &[11.0, 12.0, 13.0, 14.0, 105.0, 106.0, 107.0, 108.0]);
        let r = reduce_to(a, [2, 1, 1, 1]);
        assert_eq!(r.data(), &[10.0, 26.0]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let q = Tensor::from_vec([1, 2, 2, 2], (0..8).map(|v| v as f64 * 0.1).collect()).unwrap();
        let k = Tensor::from_vec([1, 2, 1, 3], (0..6).map(|v| v as f64 * -0.2).collect()).unwrap();
        let v = Tensor::from_vec([1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let (out, p) = attention_forward(&q, &k, &v);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(out.data().iter().all(|&o| (o - 1.0).abs() < 1e-12));
    }
}
