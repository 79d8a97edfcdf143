//! Numeric kernels for single-sample `[C, H, W]` tensors: im2col
//! convolutions, transposed convolutions, reflect-padded blurring and
//! separable linear resampling. Each forward kernel has a matching
//! backward kernel used by the autograd tape.

use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Geometry of a 2-D convolution over a `[channels, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(Self { channels, h, w, kh, kw, stride, pad, oh, ow })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_same(&self) -> bool {
        self.stride == 1 && self.kh % 2 == 1 && self.kw == self.kh && 2 * self.pad + 1 == self.kh
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for kernel column `j`.
    fn col_span(&self, j: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(j).div_ceil(s).min(self.ow);
        let end = (self.w + self.pad) as isize - j as isize;
        let hi = if end <= 0 { 0 } else { (end as usize).div_ceil(s) };
        (lo, hi.clamp(lo, self.ow))
    }
}

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * n);
    let st = g.stride;
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let (lo, hi) = g.col_span(j);
                let row = ((c * g.kh + i) * g.kw + j) * n;
                let dst = &mut cols[row..row + n];
                for oy in 0..g.oh {
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * st + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || hi == lo {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    let s0 = lo * st + j - g.pad;
                    if st == 1 {
                        d[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                    } else {
                        for (k, v) in d[lo..hi].iter_mut().enumerate() {
                            *v = src[s0 + k * st];
                        }
                    }
                }
            }
        }
    }
}

/// Patch-per-row lowering: `rows` is `[col_cols, col_rows]`, the transpose
/// of [`im2col`]. Weight gradients contract over output pixels, which is the
/// contiguous axis here.
pub fn im2row<T: Scalar>(x: &[T], g: &ConvGeom, rows: &mut [T]) {
    let kk = g.col_rows();
    debug_assert_eq!(rows.len(), kk * g.col_cols());
    let (kh, kw, st) = (g.kh, g.kw, g.stride);
    // Offsets of every tap relative to the patch origin, for patches that
    // lie fully inside the input.
    let offsets: Vec<usize> = (0..g.channels)
        .flat_map(|c| (0..kh).flat_map(move |i| (0..kw).map(move |j| (c * g.h + i) * g.w + j)))
        .collect();
    let inside = |o: usize, n: usize, k: usize| o * st >= g.pad && o * st + k <= n + g.pad;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut rows[(oy * g.ow + ox) * kk..][..kk];
            if inside(oy, g.h, kh) && inside(ox, g.w, kw) {
                let base = &x[(oy * st - g.pad) * g.w + ox * st - g.pad..];
                for (d, &o) in row.iter_mut().zip(&offsets) {
                    *d = base[o];
                }
                continue;
            }
            let x0 = (ox * st) as isize - g.pad as isize;
            let jlo = (-x0).clamp(0, kw as isize) as usize;
            let jhi = (g.w as isize - x0).clamp(jlo as isize, kw as isize) as usize;
            for c in 0..g.channels {
                let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                for i in 0..kh {
                    let d = &mut row[(c * kh + i) * kw..][..kw];
                    let iy = (oy * st + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || jhi == jlo {
                        d.fill(T::zero());
                        continue;
                    }
                    let s0 = iy as usize * g.w;
                    d[..jlo].fill(T::zero());
                    d[jhi..].fill(T::zero());
                    let a = (x0 + jlo as isize) as usize;
                    d[jlo..jhi].copy_from_slice(&plane[s0 + a..s0 + a + jhi - jlo]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `x`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let n = g.col_cols();
    let st = g.stride;
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let (lo, hi) = g.col_span(j);
                if hi == lo {
                    continue;
                }
                let row = ((c * g.kh + i) * g.kw + j) * n;
                let src = &cols[row..row + n];
                for oy in 0..g.oh {
                    let iy = (oy * st + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let d0 = lo * st + j - g.pad;
                    if st == 1 {
                        for (d, &v) in dst[d0..d0 + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (k, &v) in s.iter().enumerate() {
                            dst[d0 + k * st] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output channels at or below which same-size convolutions skip im2col.
const DIRECT_MAX_OUT: usize = 4;

/// Valid output span `[lo, hi)` along an axis of length `n` for tap `i`
/// of a stride-1 same convolution.
fn same_span(i: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(i).min(n);
    let hi = (n + pad).saturating_sub(i).clamp(lo, n);
    (lo, hi)
}

/// Tap-by-tap stride-1 same convolution accumulating into `out`.
fn direct_same_forward<T: Scalar>(x: &[T], wmat: MatRef<'_, T>, g: &ConvGeom, out: &mut [T]) {
    let (h, w, k, p) = (g.h, g.w, g.kh, g.pad);
    for o in 0..wmat.rows {
        let op = &mut out[o * h * w..(o + 1) * h * w];
        for c in 0..g.channels {
            let xp = &x[c * h * w..(c + 1) * h * w];
            for i in 0..k {
                let (ylo, yhi) = same_span(i, p, h);
                for j in 0..k {
                    let (xlo, xhi) = same_span(j, p, w);
                    let wv = wmat.data[o * wmat.rs + ((c * k + i) * k + j) * wmat.cs];
                    for y in ylo..yhi {
                        let src = &xp[(y + i - p) * w + xlo + j - p..(y + i - p) * w + xhi + j - p];
                        for (d, &v) in op[y * w + xlo..y * w + xhi].iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`direct_same_forward`]: returns `dw` and optionally `dx`.
fn direct_same_backward<T: Scalar>(
    x: &[T],
    wmat: MatRef<'_, T>,
    g: &ConvGeom,
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let (h, w, k, p) = (g.h, g.w, g.kh, g.pad);
    let co = wmat.rows;
    let mut dw = vec![T::zero(); co * g.col_rows()];
    let mut dx = need_dx.then(|| vec![T::zero(); g.channels * h * w]);
    for o in 0..co {
        let dp = &dout[o * h * w..(o + 1) * h * w];
        for c in 0..g.channels {
            let xp = &x[c * h * w..(c + 1) * h * w];
            for i in 0..k {
                let (ylo, yhi) = same_span(i, p, h);
                for j in 0..k {
                    let (xlo, xhi) = same_span(j, p, w);
                    let r = (c * k + i) * k + j;
                    let wv = wmat.data[o * wmat.rs + r * wmat.cs];
                    let mut acc = T::zero();
                    for y in ylo..yhi {
                        let s0 = (y + i - p) * w + xlo + j - p;
                        let drow = &dp[y * w + xlo..y * w + xhi];
                        acc += dot(drow, &xp[s0..s0 + xhi - xlo]);
                        if let Some(dx) = dx.as_mut() {
                            let dst = &mut dx[c * h * w + s0..c * h * w + s0 + xhi - xlo];
                            for (d, &v) in dst.iter_mut().zip(drow) {
                                *d += wv * v;
                            }
                        }
                    }
                    dw[o * g.col_rows() + r] = acc;
                }
            }
        }
    }
    (dx, dw)
}

/// Dot product with eight independent accumulators so it vectorises.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

fn use_direct(g: &ConvGeom, co: usize) -> bool {
    g.is_same() && co <= DIRECT_MAX_OUT
}

fn lowered<'a, T: Scalar>(x: &'a [T], g: &ConvGeom, buf: &'a mut Vec<T>) -> &'a [T] {
    if g.is_pointwise() {
        x
    } else {
        buf.resize(g.col_rows() * g.col_cols(), T::zero());
        im2col(x, g, buf);
        buf
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut out[o * plane..(o + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(dout: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels).map(|o| dout[o * plane..(o + 1) * plane].iter().copied().sum()).collect()
}

/// Zero-padded cross-correlation. `w` is `[co, ci, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (ci, h, wd) = x.dims3();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be 4-d");
    assert_eq!(ws[1], ci, "conv weight expects {} input channels, got {ci}", ws[1]);
    let co = ws[0];
    let ld = ws[1] * ws[2] * ws[3];
    let g = ConvGeom::new(ci, h, wd, ws[2], ws[3], stride, pad).expect("input smaller than kernel");
    let wmat = MatRef::with_ld(w.data(), co, g.col_rows(), ld);
    let mut out = Tensor::zeros(&[co, g.oh, g.ow]);
    conv2d_into(x.data(), wmat, &g, out.data_mut());
    if let Some(b) = bias {
        add_bias(out.data_mut(), b.data(), g.oh * g.ow);
    }
    out
}

/// Convolution with an arbitrary `[co, col_rows]` weight view (the view may
/// be a column slice of a wider weight matrix).
pub fn conv2d_into<T: Scalar>(x: &[T], wmat: MatRef<'_, T>, g: &ConvGeom, out: &mut [T]) {
    if use_direct(g, wmat.rows) {
        out.fill(T::zero());
        return direct_same_forward(x, wmat, g, out);
    }
    let mut buf = Vec::new();
    let cols = lowered(x, g, &mut buf);
    gemm(T::one(), wmat, MatRef::new(cols, g.col_rows(), g.col_cols()), T::zero(), out);
}

/// Gradients of [`conv2d`]; `dw` is `[co, col_rows]` matching the view used
/// in the forward pass.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    wmat: MatRef<'_, T>,
    g: &ConvGeom,
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let co = wmat.rows;
    if use_direct(g, co) {
        return direct_same_backward(x, wmat, g, dout, need_dx);
    }
    let n = g.col_cols();
    let mut rows = vec![T::zero(); n * g.col_rows()];
    im2row(x, g, &mut rows);
    let dmat = MatRef::new(dout, co, n);
    let mut dw = vec![T::zero(); co * g.col_rows()];
    gemm(T::one(), dmat, MatRef::new(&rows, n, g.col_rows()), T::zero(), &mut dw);
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); g.channels * g.h * g.w];
        if g.is_pointwise() {
            gemm(T::one(), wmat.t(), dmat, T::zero(), &mut dx);
        } else if g.is_same() && co <= g.channels {
            // Same-size stride-1 conv: dx is a conv of dout with the flipped,
            // transposed kernel, which lowers `co` rather than `ci` channels.
            let (kh, kw) = (g.kh, g.kw);
            let mut wf = vec![T::zero(); g.channels * co * kh * kw];
            for o in 0..co {
                for c in 0..g.channels {
                    for i in 0..kh {
                        for j in 0..kw {
                            wf[((c * co + o) * kh + kh - 1 - i) * kw + kw - 1 - j] =
                                wmat.data[o * wmat.rs + ((c * kh + i) * kw + j) * wmat.cs];
                        }
                    }
                }
            }
            let gt = ConvGeom::new(co, g.oh, g.ow, kh, kw, 1, g.pad).expect("same geometry");
            conv2d_into(dout, MatRef::new(&wf, g.channels, gt.col_rows()), &gt, &mut dx);
        } else {
            let mut dcols = vec![T::zero(); g.col_rows() * n];
            gemm(T::one(), wmat.t(), dmat, T::zero(), &mut dcols);
            col2im(&dcols, g, &mut dx);
        }
        dx
    });
    (dx, dw)
}

pub fn conv_bias_grad<T: Scalar>(dout: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = dout.dims3();
    Tensor::from_vec(&[c], bias_grad(dout.data(), c, h * w))
}

/// Output geometry of a transposed convolution, expressed as the forward
/// convolution it is the adjoint of.
pub fn conv_transpose_geom(
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ConvGeom {
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let g = ConvGeom::new(co, oh, ow, kh, kw, stride, pad).expect("invalid transposed geometry");
    debug_assert_eq!((g.oh, g.ow), (h, w));
    g
}

/// Transposed convolution. `w` is `[ci, co, kh, kw]`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (ci, h, wd) = x.dims3();
    let ws = w.shape();
    assert_eq!(ws[0], ci, "transposed conv channel mismatch");
    let co = ws[1];
    let g = conv_transpose_geom(co, h, wd, ws[2], ws[3], stride, pad);
    let wmat = MatRef::new(w.data(), ci, g.col_rows());
    let mut cols = vec![T::zero(); g.col_rows() * h * wd];
    gemm(T::one(), wmat.t(), MatRef::new(x.data(), ci, h * wd), T::zero(), &mut cols);
    let mut out = Tensor::zeros(&[co, g.h, g.w]);
    col2im(&cols, &g, out.data_mut());
    if let Some(b) = bias {
        add_bias(out.data_mut(), b.data(), g.h * g.w);
    }
    out
}

/// Gradients of [`conv_transpose2d`] with respect to input and weight.
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let (ci, h, wd) = x.dims3();
    let ws = w.shape();
    let g = conv_transpose_geom(ws[1], h, wd, ws[2], ws[3], stride, pad);
    let n = h * wd;
    let mut drows = vec![T::zero(); n * g.col_rows()];
    im2row(dout.data(), &g, &mut drows);
    let mut dw = Tensor::zeros(ws);
    gemm(T::one(), MatRef::new(x.data(), ci, n), MatRef::new(&drows, n, g.col_rows()), T::zero(), dw.data_mut());
    let dx = need_dx.then(|| {
        let mut dcols = drows;
        im2col(dout.data(), &g, &mut dcols);
        let mut dx = Tensor::zeros(&[ci, h, wd]);
        let dcm = MatRef::new(&dcols, g.col_rows(), n);
        gemm(T::one(), MatRef::new(w.data(), ci, g.col_rows()), dcm, T::zero(), dx.data_mut());
        dx
    });
    (dx, dw)
}

/// Output rows `[lo, hi)` whose tap `i` lands inside an axis of length `n`.
fn tap_span(i: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(i).min(n);
    let hi = ((n + pad) as isize - i as isize).clamp(lo as isize, n as isize) as usize;
    (lo, hi)
}

/// Stride-1 zero-padded convolution of the stretched map `stretch(v, h, w)`.
/// `w_full` is `[co, cin_total, kh, kw]`; the stretched channels are
/// `cin_total - v.len() .. cin_total`. Accumulates into `out`.
#[allow(clippy::too_many_arguments)]
pub fn stretch_conv_accumulate<T: Scalar>(
    v: &[T],
    w_full: &[T],
    co: usize,
    cin_total: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    pad: usize,
    out: &mut [T],
) {
    let d = v.len();
    let off = cin_total - d;
    for o in 0..co {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        for i in 0..kh {
            let (ylo, yhi) = tap_span(i, pad, h);
            for j in 0..kw {
                let (xlo, xhi) = tap_span(j, pad, w);
                let mut tap = T::zero();
                for (dd, &vv) in v.iter().enumerate() {
                    tap += w_full[((o * cin_total + off + dd) * kh + i) * kw + j] * vv;
                }
                for y in ylo..yhi {
                    for val in &mut plane[y * w + xlo..y * w + xhi] {
                        *val += tap;
                    }
                }
            }
        }
    }
}

/// Backward of [`stretch_conv_accumulate`]. Returns `dv` and adds the
/// weight gradient for the stretched channels into `dw_full`.
#[allow(clippy::too_many_arguments)]
pub fn stretch_conv_backward<T: Scalar>(
    v: &[T],
    w_full: &[T],
    co: usize,
    cin_total: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    pad: usize,
    dout: &[T],
    dw_full: &mut [T],
) -> Vec<T> {
    let d = v.len();
    let off = cin_total - d;
    let mut dv = vec![T::zero(); d];
    for o in 0..co {
        let plane = &dout[o * h * w..(o + 1) * h * w];
        for i in 0..kh {
            let (ylo, yhi) = tap_span(i, pad, h);
            for j in 0..kw {
                let (xlo, xhi) = tap_span(j, pad, w);
                let mut dtap = T::zero();
                for y in ylo..yhi {
                    dtap += plane[y * w + xlo..y * w + xhi].iter().copied().sum::<T>();
                }
                for dd in 0..d {
                    let idx = ((o * cin_total + off + dd) * kh + i) * kw + j;
                    dw_full[idx] += v[dd] * dtap;
                    dv[dd] += w_full[idx] * dtap;
                }
            }
        }
    }
    dv
}

/// Mirror index without edge repetition (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(p: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let q = p.rem_euclid(period);
    (if q >= n as isize { period - q } else { q }) as usize
}

fn reflect_pad<T: Scalar>(plane: &[T], h: usize, w: usize, r: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = vec![T::zero(); ph * pw];
    let cols: Vec<usize> = (0..pw).map(|q| reflect_index(q as isize - r as isize, w)).collect();
    for p in 0..ph {
        let src = &plane[reflect_index(p as isize - r as isize, h) * w..][..w];
        for (dst, &c) in out[p * pw..(p + 1) * pw].iter_mut().zip(&cols) {
            *dst = src[c];
        }
    }
    out
}

fn kernel_side(len: usize) -> usize {
    let k = (len as f64).sqrt().round() as usize;
    assert_eq!(k * k, len, "kernel is not square");
    assert_eq!(k % 2, 1, "kernel side must be odd");
    k
}

/// Convolution of every channel with a `k x k` kernel (true convolution,
/// i.e. correlation with the flipped kernel), reflect padding, same size.
pub fn blur_reflect<T: Scalar>(x: &Tensor<T>, kernel: &[T]) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let k = kernel_side(kernel.len());
    let r = k / 2;
    let pw = w + 2 * r;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let xp = reflect_pad(x.channel(ch), h, w, r);
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let orow = &mut dst[y * w..(y + 1) * w];
            for i in 0..k {
                let prow = &xp[(y + i) * pw..(y + i + 1) * pw];
                for j in 0..k {
                    let kv = kernel[(k - 1 - i) * k + (k - 1 - j)];
                    for (o, &p) in orow.iter_mut().zip(&prow[j..j + w]) {
                        *o += kv * p;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`blur_reflect`] with respect to the image and the kernel.
pub fn blur_reflect_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &[T],
    dout: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Vec<T>) {
    let (c, h, w) = x.dims3();
    let k = kernel_side(kernel.len());
    let r = k / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut dk = vec![T::zero(); k * k];
    let mut dx = need_dx.then(|| Tensor::zeros(&[c, h, w]));
    for ch in 0..c {
        let xp = reflect_pad(x.channel(ch), h, w, r);
        let g = dout.channel(ch);
        let mut dxp = if need_dx { vec![T::zero(); ph * pw] } else { Vec::new() };
        for y in 0..h {
            let grow = &g[y * w..(y + 1) * w];
            for i in 0..k {
                let prow = &xp[(y + i) * pw..(y + i + 1) * pw];
                for j in 0..k {
                    let flip = (k - 1 - i) * k + (k - 1 - j);
                    let mut acc = T::zero();
                    for (&gv, &p) in grow.iter().zip(&prow[j..j + w]) {
                        acc += gv * p;
                    }
                    dk[flip] += acc;
                    if need_dx {
                        let kv = kernel[flip];
                        let drow = &mut dxp[(y + i) * pw + j..(y + i) * pw + j + w];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += kv * gv;
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let plane = &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w];
            for p in 0..ph {
                let sy = reflect_index(p as isize - r as isize, h);
                for q in 0..pw {
                    let sx = reflect_index(q as isize - r as isize, w);
                    plane[sy * w + sx] += dxp[p * pw + q];
                }
            }
        }
    }
    (dx, dk)
}

/// Separable linear resampling: each channel `X` maps to `R X C^T` with
/// `rows = R` (`[oh, h]`) and `cols = C` (`[ow, w]`).
pub fn resample<T: Scalar>(x: &Tensor<T>, rows: &Tensor<T>, cols: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let (oh, ow) = (rows.shape()[0], cols.shape()[0]);
    assert_eq!(rows.shape()[1], h, "row resampler does not match image height");
    assert_eq!(cols.shape()[1], w, "column resampler does not match image width");
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut tmp = vec![T::zero(); h * ow];
    for ch in 0..c {
        gemm(T::one(), MatRef::new(x.channel(ch), h, w), MatRef::new(cols.data(), ow, w).t(), T::zero(), &mut tmp);
        let dst = &mut out.data_mut()[ch * oh * ow..(ch + 1) * oh * ow];
        gemm(T::one(), MatRef::new(rows.data(), oh, h), MatRef::new(&tmp, h, ow), T::zero(), dst);
    }
    out
}

pub fn resample_backward<T: Scalar>(dout: &Tensor<T>, rows: &Tensor<T>, cols: &Tensor<T>) -> Tensor<T> {
    let (c, oh, ow) = dout.dims3();
    let (h, w) = (rows.shape()[1], cols.shape()[1]);
    let mut dx = Tensor::zeros(&[c, h, w]);
    let mut tmp = vec![T::zero(); h * ow];
    for ch in 0..c {
        gemm(T::one(), MatRef::new(rows.data(), oh, h).t(), MatRef::new(dout.channel(ch), oh, ow), T::zero(), &mut tmp);
        let dst = &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w];
        gemm(T::one(), MatRef::new(&tmp, h, ow), MatRef::new(cols.data(), ow, w), T::zero(), dst);
    }
    dx
}
