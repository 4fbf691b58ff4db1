//! Forward and backward kernels on `[C, N, H, W]` tensors.
//!
//! Every kernel is a plain function of tensors so the tape and the eager
//! executor share one implementation.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{Shape, Tensor};

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if size + 2 * pad < kernel || stride == 0 {
        return Err(shape_err(format!("extent {size} too small for kernel {kernel} pad {pad}")));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub ci: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: Shape, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Self {
            ci: x.c(),
            n: x.n(),
            h: x.h(),
            w: x.w(),
            kh,
            kw,
            stride,
            pad,
            ho: conv_out_extent(x.h(), kh, stride, pad)?,
            wo: conv_out_extent(x.w(), kw, stride, pad)?,
        })
    }

    fn rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let cols = g.cols();
    let mut col = vec![S::zero(); g.rows() * cols];
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(c * g.n + n) * g.h * g.w..(c * g.n + n + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut dst_row[(n * g.ho + oy) * g.wo..(n * g.ho + oy + 1) * g.wo];
                        if g.stride == 1 {
                            let lo = g.pad.saturating_sub(kx);
                            let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo);
                            if lo < hi {
                                let off = lo + kx - g.pad;
                                dst[lo..hi].copy_from_slice(&src_row[off..off + hi - lo]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<S: Scalar>(col: &[S], g: &ConvGeom, dx: &mut [S]) {
    let cols = g.cols();
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut dx[(c * g.n + n) * g.h * g.w..(c * g.n + n + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let src = &src_row[(n * g.ho + oy) * g.wo..(n * g.ho + oy + 1) * g.wo];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_weight(w: Shape, co: usize, ci: usize, kh: usize, kw: usize, what: &str) -> Result<()> {
    if w.0 != [co, ci, kh, kw] {
        return Err(shape_err(format!("{what}: weight {w}, expected [{co}, {ci}, {kh}, {kw}]")));
    }
    Ok(())
}

fn check_bias(b: Option<&Tensor<impl Scalar>>, co: usize) -> Result<()> {
    if let Some(b) = b {
        if b.len() != co {
            return Err(shape_err(format!("bias of {} values for {co} channels", b.len())));
        }
    }
    Ok(())
}

/// Dense 2-D convolution, weight `[co, ci, kh, kw]`.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    let ws = w.shape();
    let g = ConvGeom::new(x.shape(), ws.h(), ws.w(), stride, pad)?;
    let co = ws.c();
    check_weight(ws, co, g.ci, g.kh, g.kw, "conv2d")?;
    check_bias(b, co)?;
    let out_shape = Shape::new(co, g.n, g.ho, g.wo);
    let mut out = vec![S::zero(); out_shape.numel()];
    if g.kh == 1 && g.kw == 1 && stride == 1 && pad == 0 {
        gemm(MatRef::new(w.data(), co, g.ci), MatRef::new(x.data(), g.ci, g.cols()), &mut out, false);
    } else {
        let col = im2col(x.data(), &g);
        gemm(MatRef::new(w.data(), co, g.rows()), MatRef::new(&col, g.rows(), g.cols()), &mut out, false);
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, b.data(), g.cols());
    }
    Tensor::from_vec(out_shape, out)
}

fn add_channel_bias<S: Scalar>(out: &mut [S], bias: &[S], plane: usize) {
    for (chunk, &bv) in out.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += bv);
    }
}

fn channel_sums<S: Scalar>(dy: &Tensor<S>) -> Tensor<S> {
    let p = dy.shape().plane();
    Tensor::vector(dy.data().chunks_exact(p).map(|c| c.iter().copied().sum()).collect())
}

pub struct ConvGrads<S> {
    pub dx: Option<Tensor<S>>,
    pub dw: Option<Tensor<S>>,
    pub db: Option<Tensor<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> ConvGrads<S> {
    let ws = w.shape();
    let g = ConvGeom::new(x.shape(), ws.h(), ws.w(), stride, pad).expect("geometry validated on forward");
    let co = ws.c();
    let pointwise = g.kh == 1 && g.kw == 1 && stride == 1 && pad == 0;
    let col = if need.1 && !pointwise { Some(im2col(x.data(), &g)) } else { None };
    let dw = need.1.then(|| {
        let mut dw = vec![S::zero(); ws.numel()];
        let b = match &col {
            Some(col) => MatRef::new(col, g.rows(), g.cols()),
            None => MatRef::new(x.data(), g.ci, g.cols()),
        };
        gemm(MatRef::new(dy.data(), co, g.cols()), b.t(), &mut dw, false);
        Tensor::from_vec(ws, dw).expect("weight shape")
    });
    let dx = need.0.then(|| {
        let mut dx = vec![S::zero(); x.len()];
        if pointwise {
            gemm(MatRef::new(w.data(), co, g.ci).t(), MatRef::new(dy.data(), co, g.cols()), &mut dx, false);
        } else {
            let mut dcol = vec![S::zero(); g.rows() * g.cols()];
            gemm(MatRef::new(w.data(), co, g.rows()).t(), MatRef::new(dy.data(), co, g.cols()), &mut dcol, false);
            col2im(&dcol, &g, &mut dx);
        }
        Tensor::from_vec(x.shape(), dx).expect("input shape")
    });
    let db = need.2.then(|| channel_sums(dy));
    ConvGrads { dx, dw, db }
}

/// 1×1 convolution over the implicit channel concatenation of `xs`,
/// weight `[co, Σci, 1, 1]`. The concatenation is never materialised.
pub fn pointwise<S: Scalar>(xs: &[&Tensor<S>], w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let first = xs.first().ok_or_else(|| shape_err("pointwise over no inputs".into()))?.shape();
    let ci_total: usize = xs.iter().map(|x| x.shape().c()).sum();
    for x in xs {
        let s = x.shape();
        if (s.n(), s.h(), s.w()) != (first.n(), first.h(), first.w()) {
            return Err(shape_err(format!("pointwise inputs {first} and {s} differ spatially")));
        }
    }
    let co = w.shape().c();
    check_weight(w.shape(), co, ci_total, 1, 1, "pointwise")?;
    check_bias(b, co)?;
    let plane = first.plane();
    let mut out = vec![S::zero(); co * plane];
    let mut off = 0;
    for (i, x) in xs.iter().enumerate() {
        let c = x.shape().c();
        gemm(MatRef::columns(w.data(), co, ci_total, off, c), MatRef::new(x.data(), c, plane), &mut out, i > 0);
        off += c;
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, b.data(), plane);
    }
    Tensor::from_vec(first.with_c(co), out)
}

pub fn pointwise_backward<S: Scalar>(
    xs: &[&Tensor<S>],
    w: &Tensor<S>,
    dy: &Tensor<S>,
    need_x: &[bool],
    need_w: bool,
    need_b: bool,
) -> (Vec<Option<Tensor<S>>>, Option<Tensor<S>>, Option<Tensor<S>>) {
    let co = w.shape().c();
    let ci_total = w.shape().n();
    let plane = dy.shape().plane();
    let mut dxs = Vec::with_capacity(xs.len());
    let mut dw = need_w.then(|| vec![S::zero(); co * ci_total]);
    let mut off = 0;
    for (i, x) in xs.iter().enumerate() {
        let c = x.shape().c();
        if need_x[i] {
            let mut dx = vec![S::zero(); c * plane];
            gemm(MatRef::columns(w.data(), co, ci_total, off, c).t(), MatRef::new(dy.data(), co, plane), &mut dx, false);
            dxs.push(Some(Tensor::from_vec(x.shape(), dx).expect("input shape")));
        } else {
            dxs.push(None);
        }
        if let Some(dw) = dw.as_mut() {
            // dW[:, off..off+c] = dY · Xᵀ, written through a strided block
            let mut block = vec![S::zero(); co * c];
            gemm(MatRef::new(dy.data(), co, plane), MatRef::new(x.data(), c, plane).t(), &mut block, false);
            for r in 0..co {
                dw[r * ci_total + off..r * ci_total + off + c].copy_from_slice(&block[r * c..(r + 1) * c]);
            }
        }
        off += c;
    }
    let dw = dw.map(|d| Tensor::from_vec(w.shape(), d).expect("weight shape"));
    let db = need_b.then(|| channel_sums(dy));
    (dxs, dw, db)
}

/// Depthwise 3×3 convolution, stride 1, zero padding 1, weight `[c, 1, 3, 3]`.
pub fn depthwise3x3<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    check_weight(w.shape(), s.c(), 1, 3, 3, "depthwise")?;
    let (h, wd) = (s.h(), s.w());
    let hw = h * wd;
    let mut out = vec![S::zero(); s.numel()];
    for c in 0..s.c() {
        let k = &w.data()[c * 9..c * 9 + 9];
        for n in 0..s.n() {
            let base = (c * s.n() + n) * hw;
            let src = &x.data()[base..base + hw];
            let dst = &mut out[base..base + hw];
            dw_plane_forward(src, dst, k, h, wd);
        }
    }
    Tensor::from_vec(s, out)
}

#[inline]
fn tap_range(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { len.saturating_sub(d as usize) } else { len };
    (lo, hi.max(lo))
}

fn dw_plane_forward<S: Scalar>(src: &[S], dst: &mut [S], k: &[S], h: usize, w: usize) {
    for ky in 0..3 {
        let dy = ky as isize - 1;
        let (y0, y1) = tap_range(h, dy);
        for kx in 0..3 {
            let dx = kx as isize - 1;
            let (x0, x1) = tap_range(w, dx);
            let kv = k[ky * 3 + kx];
            for oy in y0..y1 {
                let iy = (oy as isize + dy) as usize;
                let srow = &src[iy * w..iy * w + w];
                let drow = &mut dst[oy * w..oy * w + w];
                let ix0 = (x0 as isize + dx) as usize;
                for (d, &sv) in drow[x0..x1].iter_mut().zip(&srow[ix0..ix0 + (x1 - x0)]) {
                    *d += kv * sv;
                }
            }
        }
    }
}

pub fn depthwise3x3_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<S>>, Option<Tensor<S>>) {
    let s = x.shape();
    let (h, wd) = (s.h(), s.w());
    let hw = h * wd;
    let mut dx = need_x.then(|| vec![S::zero(); s.numel()]);
    let mut dwt = need_w.then(|| vec![S::zero(); w.len()]);
    for c in 0..s.c() {
        let k = &w.data()[c * 9..c * 9 + 9];
        for n in 0..s.n() {
            let base = (c * s.n() + n) * hw;
            let g = &dy.data()[base..base + hw];
            let xin = &x.data()[base..base + hw];
            for ky in 0..3 {
                let ddy = ky as isize - 1;
                let (y0, y1) = tap_range(h, ddy);
                for kx in 0..3 {
                    let ddx = kx as isize - 1;
                    let (x0, x1) = tap_range(wd, ddx);
                    let ix0 = (x0 as isize + ddx) as usize;
                    let len = x1 - x0;
                    let kv = k[ky * 3 + kx];
                    let mut acc = S::zero();
                    for oy in y0..y1 {
                        let iy = (oy as isize + ddy) as usize;
                        let grow = &g[oy * wd + x0..oy * wd + x0 + len];
                        if let Some(dx) = dx.as_mut() {
                            let drow = &mut dx[base + iy * wd + ix0..base + iy * wd + ix0 + len];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += kv * gv;
                            }
                        }
                        if dwt.is_some() {
                            let xrow = &xin[iy * wd + ix0..iy * wd + ix0 + len];
                            acc += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<S>();
                        }
                    }
                    if let Some(dwt) = dwt.as_mut() {
                        dwt[c * 9 + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor::from_vec(s, d).expect("input shape")),
        dwt.map(|d| Tensor::from_vec(w.shape(), d).expect("weight shape")),
    )
}

/// Per-channel batch statistics used by training-mode normalisation.
#[derive(Clone, Debug)]
pub struct BnStats<S> {
    pub mean: Vec<S>,
    /// Biased variance (normalisation uses it directly).
    pub var: Vec<S>,
    /// Number of elements each statistic was taken over.
    pub count: usize,
}

impl<S: Scalar> BnStats<S> {
    /// Unbiased variance for running-average updates.
    pub fn unbiased_var(&self) -> Vec<S> {
        let m = self.count as f64;
        let k = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        self.var.iter().map(|&v| v * S::lit(k)).collect()
    }
}

pub fn batch_stats<S: Scalar>(x: &Tensor<S>) -> BnStats<S> {
    let p = x.shape().plane();
    let mut mean = Vec::with_capacity(x.shape().c());
    let mut var = Vec::with_capacity(x.shape().c());
    for ch in x.data().chunks_exact(p) {
        let m = ch.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / p as f64;
        let v = ch.iter().map(|v| (v.to_f64_lossy() - m).powi(2)).sum::<f64>() / p as f64;
        mean.push(S::lit(m));
        var.push(S::lit(v));
    }
    BnStats { mean, var, count: p }
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel.
pub fn affine_normalize<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>, mean: &[S], inv_std: &[S]) -> Result<Tensor<S>> {
    let c = x.shape().c();
    if gamma.len() != c || beta.len() != c || mean.len() != c || inv_std.len() != c {
        return Err(shape_err(format!("normalisation parameters do not match {c} channels")));
    }
    let p = x.shape().plane();
    let mut out = x.clone();
    for (ch, plane) in out.data_mut().chunks_exact_mut(p).enumerate() {
        let scale = gamma.data()[ch] * inv_std[ch];
        let shift = beta.data()[ch] - mean[ch] * scale;
        plane.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    Ok(out)
}

pub fn inv_std<S: Scalar>(var: &[S], eps: S) -> Vec<S> {
    var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect()
}

/// Backward of training-mode normalisation (batch statistics depend on x).
pub fn bn_train_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    mean: &[S],
    inv_std: &[S],
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let p = x.shape().plane();
    let m = S::lit(p as f64);
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = Vec::with_capacity(gamma.len());
    let mut dbeta = Vec::with_capacity(gamma.len());
    for ch in 0..x.shape().c() {
        let xs = &x.data()[ch * p..(ch + 1) * p];
        let gs = &dy.data()[ch * p..(ch + 1) * p];
        let (mu, is) = (mean[ch], inv_std[ch]);
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        for (&xv, &gv) in xs.iter().zip(gs) {
            sum_g += gv;
            sum_gx += gv * (xv - mu) * is;
        }
        dgamma.push(sum_gx);
        dbeta.push(sum_g);
        let k = gamma.data()[ch] * is / m;
        for ((d, &xv), &gv) in dx[ch * p..(ch + 1) * p].iter_mut().zip(xs).zip(gs) {
            let xhat = (xv - mu) * is;
            *d = k * (m * gv - sum_g - xhat * sum_gx);
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).expect("shape"),
        Tensor::vector(dgamma).reshape(gamma.shape()).expect("gamma shape"),
        Tensor::vector(dbeta).reshape(gamma.shape()).expect("beta shape"),
    )
}

/// Backward of normalisation with fixed statistics.
pub fn bn_fixed_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    mean: &[S],
    inv_std: &[S],
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let p = x.shape().plane();
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = Vec::new();
    let mut dbeta = Vec::new();
    for ch in 0..x.shape().c() {
        let xs = &x.data()[ch * p..(ch + 1) * p];
        let gs = &dy.data()[ch * p..(ch + 1) * p];
        let k = gamma.data()[ch] * inv_std[ch];
        let mut sg = S::zero();
        let mut sgx = S::zero();
        for ((d, &xv), &gv) in dx[ch * p..(ch + 1) * p].iter_mut().zip(xs).zip(gs) {
            *d = k * gv;
            sg += gv;
            sgx += gv * (xv - mean[ch]) * inv_std[ch];
        }
        dgamma.push(sgx);
        dbeta.push(sg);
    }
    (
        Tensor::from_vec(x.shape(), dx).expect("shape"),
        Tensor::vector(dgamma).reshape(gamma.shape()).expect("gamma shape"),
        Tensor::vector(dbeta).reshape(gamma.shape()).expect("beta shape"),
    )
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let data = y.data().iter().zip(dy.data()).map(|(&o, &g)| if o > S::zero() { g } else { S::zero() }).collect();
    Tensor::from_vec(y.shape(), data).expect("shape")
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("add {} and {}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    let hw = s.h() * s.w();
    let k = S::lit(1.0 / hw as f64);
    let data = x.data().chunks_exact(hw).map(|c| c.iter().copied().sum::<S>() * k).collect();
    Tensor::from_vec(Shape::new(s.c(), s.n(), 1, 1), data).expect("shape")
}

pub fn global_avg_pool_backward<S: Scalar>(x_shape: Shape, dy: &Tensor<S>) -> Tensor<S> {
    let hw = x_shape.h() * x_shape.w();
    let k = S::lit(1.0 / hw as f64);
    let mut out = Vec::with_capacity(x_shape.numel());
    for &g in dy.data() {
        out.extend(std::iter::repeat_n(g * k, hw));
    }
    Tensor::from_vec(x_shape, out).expect("shape")
}

/// Per-sample flatten in `(c, y, x)` order: returns a `[F, N]` row-major matrix.
fn flatten_samples<S: Scalar>(x: &Tensor<S>) -> Vec<S> {
    let s = x.shape();
    let (n, hw) = (s.n(), s.h() * s.w());
    let f = s.c() * hw;
    let mut m = vec![S::zero(); f * n];
    for c in 0..s.c() {
        for b in 0..n {
            let src = &x.data()[(c * n + b) * hw..(c * n + b + 1) * hw];
            for (i, &v) in src.iter().enumerate() {
                m[(c * hw + i) * n + b] = v;
            }
        }
    }
    m
}

fn unflatten_samples<S: Scalar>(m: &[S], shape: Shape) -> Tensor<S> {
    let (n, hw) = (shape.n(), shape.h() * shape.w());
    let mut out = vec![S::zero(); shape.numel()];
    for c in 0..shape.c() {
        for b in 0..n {
            let dst = &mut out[(c * n + b) * hw..(c * n + b + 1) * hw];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = m[(c * hw + i) * n + b];
            }
        }
    }
    Tensor::from_vec(shape, out).expect("shape")
}

/// Fixed linear map of each flattened sample: `[F] -> [D]`, matrix `[D, F, 1, 1]`.
pub fn project<S: Scalar>(x: &Tensor<S>, matrix: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    let f = s.c() * s.h() * s.w();
    let d = matrix.shape().c();
    if matrix.shape().n() != f {
        return Err(shape_err(format!("projection {} cannot take flatten dim {f}", matrix.shape())));
    }
    let xm = flatten_samples(x);
    let mut out = vec![S::zero(); d * s.n()];
    gemm(MatRef::new(matrix.data(), d, f), MatRef::new(&xm, f, s.n()), &mut out, false);
    Tensor::from_vec(Shape::new(d, s.n(), 1, 1), out)
}

pub fn project_backward<S: Scalar>(x_shape: Shape, matrix: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let f = x_shape.c() * x_shape.h() * x_shape.w();
    let d = matrix.shape().c();
    let mut dm = vec![S::zero(); f * x_shape.n()];
    gemm(MatRef::new(matrix.data(), d, f).t(), MatRef::new(dy.data(), d, x_shape.n()), &mut dm, false);
    unflatten_samples(&dm, x_shape)
}

fn require_vectors<S: Scalar>(x: &Tensor<S>, what: &str) -> Result<()> {
    let s = x.shape();
    if s.h() != 1 || s.w() != 1 {
        return Err(shape_err(format!("{what} expects [C, N, 1, 1], got {s}")));
    }
    Ok(())
}

/// Per-sample L2 normalisation of `[C, N, 1, 1]`; norms below `floor` are
/// replaced by `floor`. Returns the output and the raw norms.
pub fn l2_normalize<S: Scalar>(x: &Tensor<S>, floor: S) -> Result<(Tensor<S>, Vec<S>)> {
    require_vectors(x, "l2_normalize")?;
    let (c, n) = (x.shape().c(), x.shape().n());
    let norms: Vec<S> = (0..n).map(|b| (0..c).map(|k| x.data()[k * n + b].powi(2)).sum::<S>().sqrt()).collect();
    let mut out = x.clone();
    for k in 0..c {
        for b in 0..n {
            out.data_mut()[k * n + b] = x.data()[k * n + b] / norms[b].max(floor);
        }
    }
    Ok((out, norms))
}

pub fn l2_normalize_backward<S: Scalar>(y: &Tensor<S>, norms: &[S], floor: S, dy: &Tensor<S>) -> Tensor<S> {
    let (c, n) = (y.shape().c(), y.shape().n());
    let mut dx = vec![S::zero(); y.len()];
    for b in 0..n {
        if norms[b] > floor {
            let dot: S = (0..c).map(|k| y.data()[k * n + b] * dy.data()[k * n + b]).sum();
            for k in 0..c {
                dx[k * n + b] = (dy.data()[k * n + b] - y.data()[k * n + b] * dot) / norms[b];
            }
        } else {
            for k in 0..c {
                dx[k * n + b] = dy.data()[k * n + b] / floor;
            }
        }
    }
    Tensor::from_vec(y.shape(), dx).expect("shape")
}

/// Per-sample squared Euclidean distance of `[C, N, 1, 1]` pairs -> `[1, N, 1, 1]`.
pub fn sq_dist<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    require_vectors(a, "sq_dist")?;
    if a.shape() != b.shape() {
        return Err(shape_err(format!("sq_dist {} vs {}", a.shape(), b.shape())));
    }
    let (c, n) = (a.shape().c(), a.shape().n());
    let data = (0..n).map(|s| (0..c).map(|k| (a.data()[k * n + s] - b.data()[k * n + s]).powi(2)).sum()).collect();
    Tensor::from_vec(Shape::new(1, n, 1, 1), data)
}

pub fn softmax_columns<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let (k, n) = (logits.shape().c(), logits.shape().n());
    let mut p = logits.clone();
    for b in 0..n {
        let m = (0..k).map(|i| logits.data()[i * n + b]).fold(S::neg_infinity(), S::max);
        let z: S = (0..k).map(|i| (logits.data()[i * n + b] - m).exp()).sum();
        for i in 0..k {
            p.data_mut()[i * n + b] = (logits.data()[i * n + b] - m).exp() / z;
        }
    }
    p
}

/// Per-sample softmax cross-entropy of `[K, N, 1, 1]` logits.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
    require_vectors(logits, "cross_entropy")?;
    let (k, n) = (logits.shape().c(), logits.shape().n());
    if labels.len() != n {
        return Err(shape_err(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidParameter(format!("class label {bad} outside {k} classes")));
    }
    let probs = softmax_columns(logits);
    let data = labels.iter().enumerate().map(|(b, &l)| -probs.data()[l * n + b].max(S::min_positive_value()).ln()).collect();
    Ok((Tensor::from_vec(Shape::new(1, n, 1, 1), data)?, probs))
}

pub fn cross_entropy_backward<S: Scalar>(probs: &Tensor<S>, labels: &[usize], dy: &Tensor<S>) -> Tensor<S> {
    let n = probs.shape().n();
    let mut dx = probs.clone();
    for (i, v) in dx.data_mut().iter_mut().enumerate() {
        let (k, b) = (i / n, i % n);
        let onehot = if labels[b] == k { S::one() } else { S::zero() };
        *v = (*v - onehot) * dy.data()[b];
    }
    dx
}

/// Mean of `sqrt(d² + eps²)` over all elements, accumulated as `eps` plus
/// the mean excess `d² / (sqrt(d² + eps²) + eps)` so that equal inputs give
/// exactly `eps`.
pub fn charbonnier<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, eps: S) -> Result<S> {
    if pred.shape() != target.shape() {
        return Err(shape_err(format!("charbonnier {} vs {}", pred.shape(), target.shape())));
    }
    let e = eps.to_f64_lossy();
    let excess: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t).to_f64_lossy();
            d * d / ((d * d + e * e).sqrt() + e)
        })
        .sum();
    Ok(S::lit(e + excess / pred.len() as f64))
}

pub fn charbonnier_backward<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, eps: S, g: S) -> Tensor<S> {
    let e2 = eps * eps;
    let k = g / S::lit(pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            k * d / (d * d + e2).sqrt()
        })
        .collect();
    Tensor::from_vec(pred.shape(), data).expect("shape")
}

/// Mean squared difference plus `eps²`.
pub fn recovery_literal<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, eps: S) -> Result<S> {
    if pred.shape() != target.shape() {
        return Err(shape_err(format!("recovery {} vs {}", pred.shape(), target.shape())));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).to_f64_lossy().powi(2)).sum();
    Ok(S::lit(sum / pred.len() as f64) + eps * eps)
}

pub fn recovery_literal_backward<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, g: S) -> Tensor<S> {
    let k = S::lit(2.0) * g / S::lit(pred.len() as f64);
    let data = pred.data().iter().zip(target.data()).map(|(&p, &t)| k * (p - t)).collect();
    Tensor::from_vec(pred.shape(), data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_vec(shape, (0..shape.numel()).map(f).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let s = x.shape();
        let ws = w.shape();
        let ho = (s.h() + 2 * pad - ws.h()) / stride + 1;
        let wo = (s.w() + 2 * pad - ws.w()) / stride + 1;
        let mut out = Tensor::zeros(Shape::new(ws.c(), s.n(), ho, wo));
        for o in 0..ws.c() {
            for n in 0..s.n() {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..s.c() {
                            for ky in 0..ws.h() {
                                for kx in 0..ws.w() {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h() && (ix as usize) < s.w() {
                                        acc += w.at(o, c, ky, kx) * x.at(c, n, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let i = out.index(o, n, oy, ox);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_strides_and_padding() {
        let x = t(Shape::new(3, 2, 7, 6), |i| ((i * 37) % 11) as f64 / 11.0 - 0.4);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 2, 0)] {
            let w = t(Shape::new(4, 3, k, k), |i| ((i * 13) % 7) as f64 / 7.0 - 0.5);
            let got = conv2d(&x, &w, None, s, p).unwrap();
            let want = conv_naive(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "k{k} s{s} p{p}");
        }
    }

    #[test]
    fn depthwise_matches_grouped_naive() {
        let x = t(Shape::new(2, 2, 5, 4), |i| ((i * 29) % 13) as f64 / 13.0);
        let w = t(Shape::new(2, 1, 3, 3), |i| i as f64 / 10.0 - 0.8);
        let got = depthwise3x3(&x, &w).unwrap();
        for c in 0..2 {
            let xc = Tensor::from_vec(Shape::new(1, 2, 5, 4), x.channel(c).to_vec()).unwrap();
            let wc = Tensor::from_vec(Shape::new(1, 1, 3, 3), w.data()[c * 9..c * 9 + 9].to_vec()).unwrap();
            let want = conv_naive(&xc, &wc, 1, 1);
            let diff = got.channel(c).iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn pointwise_equals_conv_over_concat() {
        let a = t(Shape::new(2, 2, 3, 3), |i| (i as f64 * 0.37).sin());
        let b = t(Shape::new(3, 2, 3, 3), |i| (i as f64 * 0.11).cos());
        let w = t(Shape::new(4, 5, 1, 1), |i| i as f64 / 20.0 - 0.3);
        let bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]);
        let got = pointwise(&[&a, &b], &w, Some(&bias)).unwrap();
        let cat = Tensor::concat(&[&a, &b]).unwrap();
        let want = conv2d(&cat, &w, Some(&bias), 1, 0).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn bn_output_is_standardised() {
        let x = t(Shape::new(2, 3, 2, 2), |i| (i * i) as f64 * 0.1);
        let st = batch_stats(&x);
        let inv = inv_std(&st.var, 0.0);
        let y = affine_normalize(&x, &Tensor::vector(vec![1.0, 1.0]), &Tensor::vector(vec![0.0, 0.0]), &st.mean, &inv).unwrap();
        let st2 = batch_stats(&y);
        for c in 0..2 {
            assert!(st2.mean[c].abs() < 1e-12);
            assert!((st2.var[c] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let logits = Tensor::<f64>::zeros(Shape::new(3, 2, 1, 1));
        let (l, _) = cross_entropy(&logits, &[0, 2]).unwrap();
        for v in l.data() {
            assert!((v - 3f64.ln()).abs() < 1e-12);
        }
        assert!(cross_entropy(&logits, &[3, 0]).is_err());
    }
}
