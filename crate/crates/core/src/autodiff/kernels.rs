//! Numeric kernels behind the tape operations. Inner products accumulate in
//! `f64` regardless of the element type.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

pub(crate) fn from_f64<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

/// Output extent of a sliding window.
pub(crate) fn window_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let op = "conv2d";
        if input.len() != 4 {
            return Err(Error::shape(op, format!("input must be [N,C,H,W], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::shape(
                op,
                format!("kernel must be [C_out,C_in,kh,kw], got {kernel:?}"),
            ));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape(
                op,
                format!("input channels (dim 1) = {} but kernel expects C_in = {}", input[1], kernel[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(op, "stride must be at least 1"));
        }
        let oh = window_out(input[2], kernel[2], stride, pad).ok_or_else(|| {
            Error::shape(
                op,
                format!("kernel height {} exceeds padded input height {}", kernel[2], input[2] + 2 * pad),
            )
        })?;
        let ow = window_out(input[3], kernel[3], stride, pad).ok_or_else(|| {
            Error::shape(
                op,
                format!("kernel width {} exceeds padded input width {}", kernel[3], input[3] + 2 * pad),
            )
        })?;
        Ok(Self {
            n: input[0],
            cin: input[1],
            h: input[2],
            w: input[3],
            cout: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }
}

/// Writes the transposed column matrix `[positions, patch]` of one sample.
fn im2col_t<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [f64]) {
    let k = g.patch();
    let pad = g.pad as isize;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * k..][..k];
            let mut idx = 0;
            for c in 0..g.cin {
                let plane = &x[c * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let row_ok = iy >= 0 && (iy as usize) < g.h;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        row[idx] = if row_ok && ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize].as_f64()
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-adds a transposed column matrix back onto one input sample.
fn col2im_t(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let k = g.patch();
    let pad = g.pad as isize;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * k..][..k];
            let mut idx = 0;
            for c in 0..g.cin {
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let row_ok = iy >= 0 && (iy as usize) < g.h;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if row_ok && ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let k = g.patch();
    let p = g.positions();
    let wf = to_f64(w);
    let mut cols = vec![0.0f64; p * k];
    let mut out = vec![T::zero(); g.n * g.cout * p];
    for n in 0..g.n {
        im2col_t(&x[n * g.in_sample()..][..g.in_sample()], g, &mut cols);
        for co in 0..g.cout {
            let wr = &wf[co * k..][..k];
            let bias = b.map_or(0.0, |b| b[co].as_f64());
            let o = &mut out[(n * g.cout + co) * p..][..p];
            for (pi, slot) in o.iter_mut().enumerate() {
                *slot = T::from_f64(dot(wr, &cols[pi * k..][..k]) + bias);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let k = g.patch();
    let p = g.positions();
    let wf = to_f64(w);
    let mut cols = vec![0.0f64; p * k];
    let mut gcols = vec![0.0f64; if need_x { p * k } else { 0 }];
    let mut gw = vec![0.0f64; if need_w { g.cout * k } else { 0 }];
    let mut gb = vec![0.0f64; if need_b { g.cout } else { 0 }];
    let mut gx = vec![0.0f64; if need_x { g.n * g.in_sample() } else { 0 }];
    for n in 0..g.n {
        let go = &grad_out[n * g.cout * p..][..g.cout * p];
        if need_w {
            im2col_t(&x[n * g.in_sample()..][..g.in_sample()], g, &mut cols);
        }
        if need_w || need_b {
            for co in 0..g.cout {
                for pi in 0..p {
                    let gv = go[co * p + pi].as_f64();
                    if gv == 0.0 {
                        continue;
                    }
                    if need_w {
                        axpy(gv, &cols[pi * k..][..k], &mut gw[co * k..][..k]);
                    }
                    if need_b {
                        gb[co] += gv;
                    }
                }
            }
        }
        if need_x {
            gcols.iter_mut().for_each(|v| *v = 0.0);
            for pi in 0..p {
                let row = &mut gcols[pi * k..][..k];
                for co in 0..g.cout {
                    let gv = go[co * p + pi].as_f64();
                    if gv != 0.0 {
                        axpy(gv, &wf[co * k..][..k], row);
                    }
                }
            }
            col2im_t(&gcols, g, &mut gx[n * g.in_sample()..][..g.in_sample()]);
        }
    }
    ConvGrads {
        input: need_x.then(|| from_f64(&gx)),
        kernel: need_w.then(|| from_f64(&gw)),
        bias: need_b.then(|| from_f64(&gb)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let op = "max_pool2d";
        if input.len() != 4 {
            return Err(Error::shape(op, format!("input must be [N,C,H,W], got {input:?}")));
        }
        if stride == 0 {
            return Err(Error::shape(op, "stride must be at least 1"));
        }
        if 2 * pad > kernel {
            return Err(Error::shape(op, format!("pad {pad} exceeds half the kernel {kernel}")));
        }
        let oh = window_out(input[2], kernel, stride, pad).ok_or_else(|| {
            Error::shape(op, format!("kernel {kernel} exceeds padded input height {}", input[2] + 2 * pad))
        })?;
        let ow = window_out(input[3], kernel, stride, pad).ok_or_else(|| {
            Error::shape(op, format!("kernel {kernel} exceeds padded input width {}", input[3] + 2 * pad))
        })?;
        Ok(Self {
            n: input[0],
            c: input[1],
            h: input[2],
            w: input[3],
            kernel,
            stride,
            pad,
            oh,
            ow,
        })
    }
}

/// Per-window maximum. Ties go to the first element in row-major order.
pub(crate) fn max_pool_forward<T: Real>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let planes = g.n * g.c;
    let mut out = Vec::with_capacity(planes * g.oh * g.ow);
    let mut arg = Vec::with_capacity(planes * g.oh * g.ow);
    let pad = g.pad as isize;
    for plane in 0..planes {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let idx = base + iy as usize * g.w + ix as usize;
                        let v = x[idx];
                        if best.map_or(true, |(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                // pad <= kernel/2 guarantees at least one in-bounds element
                let (v, idx) = best.expect("window has an in-bounds element");
                out.push(v);
                arg.push(idx);
            }
        }
    }
    (out, arg)
}

/// A region of a feature map, in whole cells, with exclusive upper bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiRegion {
    pub batch: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

/// Quantized max pooling of each region into `out_h x out_w` bins.
pub(crate) fn roi_pool_forward<T: Real>(
    x: &[T],
    shape: &[usize],
    rois: &[RoiRegion],
    out_h: usize,
    out_w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let mut out = Vec::with_capacity(rois.len() * c * out_h * out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for roi in rois {
        let ys = bin_edges(roi.y0, roi.y1, out_h, h);
        let xs = bin_edges(roi.x0, roi.x1, out_w, w);
        for ch in 0..c {
            let base = (roi.batch * c + ch) * h * w;
            for &(ya, yb) in &ys {
                for &(xa, xb) in &xs {
                    let mut best: Option<(T, usize)> = None;
                    for yy in ya..yb {
                        for xx in xa..xb {
                            let idx = base + yy * w + xx;
                            if best.map_or(true, |(b, _)| x[idx] > b) {
                                best = Some((x[idx], idx));
                            }
                        }
                    }
                    let (v, idx) = best.expect("bins are non-empty");
                    out.push(v);
                    arg.push(idx);
                }
            }
        }
    }
    (out, arg)
}

/// Bin boundaries along one axis: bin `b` covers
/// `[start + floor(b*len/bins), start + ceil((b+1)*len/bins))`. A bin that
/// quantizes to nothing falls back to the nearest single cell.
pub(crate) fn bin_edges(start: usize, end: usize, bins: usize, limit: usize) -> Vec<(usize, usize)> {
    let len = end.saturating_sub(start);
    (0..bins)
        .map(|b| {
            let a = (start + (b * len) / bins).min(limit);
            let z = (start + ((b + 1) * len).div_ceil(bins)).min(limit);
            if z > a {
                (a, z)
            } else {
                let cell = a.min(limit.saturating_sub(1));
                (cell, cell + 1)
            }
        })
        .collect()
}
