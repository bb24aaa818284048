//! Convolution kernels: forward, input-adjoint and weight-gradient, in 2-D
//! and 3-D (leading temporal axis).
//!
//! All three directions reduce to one GEMM per chunk of output pixels via
//! im2col/col2im. The GEMM backend partitions output only and never splits
//! the reduction axis, so results are bitwise identical for any thread count.
//!
//! Layouts: inputs `[h, w, c]` / `[t, h, w, c]`, kernels `[kh, kw, c_in, c_out]`
//! / `[kt, kh, kw, c_in, c_out]`, all row-major.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; every kernel tap reads inside the input.
    Valid,
    /// Output extent is `ceil(in / stride)`; zero-pads as evenly as possible,
    /// extra pixel on the trailing side.
    Same,
    /// Fixed symmetric padding on both sides of each spatial axis.
    Explicit(usize),
}

static GEMM_THREADS: AtomicUsize = AtomicUsize::new(0);

/// Caps the threads used inside GEMM calls. `0` means "hardware default".
/// Results do not depend on this value.
pub fn set_gemm_threads(n: usize) {
    GEMM_THREADS.store(n, Ordering::Relaxed);
}

fn gemm_parallelism() -> gemm::Parallelism {
    let n = GEMM_THREADS.load(Ordering::Relaxed);
    let n = if n == 0 {
        std::thread::available_parallelism().map(|v| v.get()).unwrap_or(1)
    } else {
        n
    };
    if n <= 1 {
        gemm::Parallelism::None
    } else {
        gemm::Parallelism::Rayon(n)
    }
}

/// `c[m,n] (+)= a[m,k] · b[k,n]` on row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            if accumulate { 1.0 } else { 0.0 },
            1.0,
            false,
            false,
            false,
            gemm_parallelism(),
        );
    }
}

fn axis_out(extent: usize, eff_k: usize, stride: usize, before: usize, after: usize) -> usize {
    (extent + before + after - eff_k) / stride + 1
}

fn axis_pads(pad: Padding, extent: usize, eff_k: usize, stride: usize) -> (usize, usize) {
    match pad {
        Padding::Valid => (0, 0),
        Padding::Explicit(p) => (p, p),
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + eff_k).saturating_sub(extent);
            (total / 2, total - total / 2)
        }
    }
}

/// Resolved 2-D convolution geometry.
#[derive(Debug, Clone)]
pub struct Geom2d {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_c: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geom2d {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Geom2d> {
        if input_shape.len() != 3 {
            return Err(Error::shape("conv2d", format!("input must be [h,w,c], got {input_shape:?}")));
        }
        if kernel_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [kh,kw,c_in,c_out], got {kernel_shape:?}"),
            ));
        }
        if stride < 1 || dilation < 1 {
            return Err(Error::Config(format!(
                "conv2d stride and dilation must be >= 1, got stride={stride} dilation={dilation}"
            )));
        }
        let (in_h, in_w, in_c) = (input_shape[0], input_shape[1], input_shape[2]);
        let (kh, kw, kc, out_c) = (kernel_shape[0], kernel_shape[1], kernel_shape[2], kernel_shape[3]);
        if input_shape.iter().any(|&e| e == 0) || kernel_shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("conv2d", "zero extent".to_string()));
        }
        if kc != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_c} channels but kernel expects {kc} (kernel {kernel_shape:?}, input {input_shape:?})"),
            ));
        }
        let eff_kh = dilation * (kh - 1) + 1;
        let eff_kw = dilation * (kw - 1) + 1;
        let (pad_top, pad_bottom) = axis_pads(padding, in_h, eff_kh, stride);
        let (pad_left, pad_right) = axis_pads(padding, in_w, eff_kw, stride);
        if in_h + pad_top + pad_bottom < eff_kh || in_w + pad_left + pad_right < eff_kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {in_h}x{in_w} smaller than effective kernel {eff_kh}x{eff_kw}"),
            ));
        }
        Ok(Geom2d {
            in_h,
            in_w,
            in_c,
            kh,
            kw,
            out_c,
            stride,
            dilation,
            pad_top,
            pad_left,
            out_h: axis_out(in_h, eff_kh, stride, pad_top, pad_bottom),
            out_w: axis_out(in_w, eff_kw, stride, pad_left, pad_right),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.out_h, self.out_w, self.out_c]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.in_h, self.in_w, self.in_c]
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }
}

const CHUNK_ROWS: usize = 512;

/// Gathers im2col rows `rows.start..rows.end` (output-pixel indices) into `patch`.
fn im2col_2d(x: &[f64], g: &Geom2d, row_start: usize, row_end: usize, patch: &mut [f64]) {
    let k = g.patch_len();
    let row_c = g.in_c;
    for r in row_start..row_end {
        let oy = r / g.out_w;
        let ox = r % g.out_w;
        let base = (r - row_start) * k;
        let mut p = base;
        for ky in 0..g.kh {
            let y = (oy * g.stride + ky * g.dilation) as isize - g.pad_top as isize;
            if y < 0 || y >= g.in_h as isize {
                patch[p..p + g.kw * row_c].fill(0.0);
                p += g.kw * row_c;
                continue;
            }
            let yoff = y as usize * g.in_w;
            for kx in 0..g.kw {
                let xx = (ox * g.stride + kx * g.dilation) as isize - g.pad_left as isize;
                if xx < 0 || xx >= g.in_w as isize {
                    patch[p..p + row_c].fill(0.0);
                } else {
                    let src = (yoff + xx as usize) * row_c;
                    patch[p..p + row_c].copy_from_slice(&x[src..src + row_c]);
                }
                p += row_c;
            }
        }
    }
}

/// Scatters im2col-layout gradients back onto the input grid (adds).
fn col2im_2d(cols: &[f64], g: &Geom2d, row_start: usize, row_end: usize, gx: &mut [f64]) {
    let k = g.patch_len();
    let row_c = g.in_c;
    for r in row_start..row_end {
        let oy = r / g.out_w;
        let ox = r % g.out_w;
        let base = (r - row_start) * k;
        let mut p = base;
        for ky in 0..g.kh {
            let y = (oy * g.stride + ky * g.dilation) as isize - g.pad_top as isize;
            if y < 0 || y >= g.in_h as isize {
                p += g.kw * row_c;
                continue;
            }
            let yoff = y as usize * g.in_w;
            for kx in 0..g.kw {
                let xx = (ox * g.stride + kx * g.dilation) as isize - g.pad_left as isize;
                if xx >= 0 && xx < g.in_w as isize {
                    let dst = (yoff + xx as usize) * row_c;
                    for c in 0..row_c {
                        gx[dst + c] += cols[p + c];
                    }
                }
                p += row_c;
            }
        }
    }
}

fn is_identity_gather_2d(g: &Geom2d) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad_top == 0 && g.pad_left == 0
}

/// Cross-correlation of `x` with `w` (plus optional per-channel bias).
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &Geom2d) -> Tensor {
    let mut out = Tensor::zeros(&g.out_shape());
    let rows = g.out_h * g.out_w;
    let k = g.patch_len();
    if is_identity_gather_2d(g) {
        // 1x1 stride-1 convolution: the input already is the patch matrix.
        dgemm(
            rows, k, g.out_c,
            x.data(), k as isize, 1,
            w.data(), g.out_c as isize, 1,
            out.data_mut(), false,
        );
    } else {
        let mut patch = vec![0.0f64; CHUNK_ROWS.min(rows) * k];
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + CHUNK_ROWS).min(rows);
            im2col_2d(x.data(), g, r0, r1, &mut patch);
            dgemm(
                r1 - r0, k, g.out_c,
                &patch, k as isize, 1,
                w.data(), g.out_c as isize, 1,
                &mut out.data_mut()[r0 * g.out_c..r1 * g.out_c], false,
            );
            r0 = r1;
        }
    }
    if let Some(b) = bias {
        debug_assert_eq!(b.numel(), g.out_c);
        let bd = b.data();
        for row in out.data_mut().chunks_exact_mut(g.out_c) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
    }
    out
}

/// Adjoint of [`conv2d_forward`] in its input: maps output-shaped `gout`
/// back to an input-shaped tensor. Satisfies `<conv(x), y> = <x, adjoint(y)>`.
pub fn conv2d_input_grad(w: &Tensor, gout: &Tensor, g: &Geom2d) -> Tensor {
    let mut gx = Tensor::zeros(&g.in_shape());
    let rows = g.out_h * g.out_w;
    let k = g.patch_len();
    if is_identity_gather_2d(g) {
        dgemm(
            rows, g.out_c, k,
            gout.data(), g.out_c as isize, 1,
            w.data(), 1, g.out_c as isize,
            gx.data_mut(), false,
        );
        return gx;
    }
    let mut cols = vec![0.0f64; CHUNK_ROWS.min(rows) * k];
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + CHUNK_ROWS).min(rows);
        // cols = gout_rows · w^T
        dgemm(
            r1 - r0, g.out_c, k,
            &gout.data()[r0 * g.out_c..r1 * g.out_c], g.out_c as isize, 1,
            w.data(), 1, g.out_c as isize,
            &mut cols[..(r1 - r0) * k], false,
        );
        col2im_2d(&cols, g, r0, r1, gx.data_mut());
        r0 = r1;
    }
    gx
}

/// Gradient of a scalar loss in the kernel: `d loss / d w` given the
/// forward input `x` and the output gradient `gout`.
pub fn conv2d_weight_grad(x: &Tensor, gout: &Tensor, g: &Geom2d) -> Tensor {
    let mut gw = Tensor::zeros(&[g.kh, g.kw, g.in_c, g.out_c]);
    let rows = g.out_h * g.out_w;
    let k = g.patch_len();
    if is_identity_gather_2d(g) {
        dgemm(
            k, rows, g.out_c,
            x.data(), 1, k as isize,
            gout.data(), g.out_c as isize, 1,
            gw.data_mut(), false,
        );
        return gw;
    }
    let mut patch = vec![0.0f64; CHUNK_ROWS.min(rows) * k];
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + CHUNK_ROWS).min(rows);
        im2col_2d(x.data(), g, r0, r1, &mut patch);
        // gw += patch^T · gout_rows
        dgemm(
            k, r1 - r0, g.out_c,
            &patch, 1, k as isize,
            &gout.data()[r0 * g.out_c..r1 * g.out_c], g.out_c as isize, 1,
            gw.data_mut(), true,
        );
        r0 = r1;
    }
    gw
}

/// Per-output-channel sum of `gout` (bias gradient).
pub fn bias_grad(gout: &Tensor, out_c: usize) -> Tensor {
    let mut b = Tensor::zeros(&[out_c]);
    let bd = b.data_mut();
    for row in gout.data().chunks_exact(out_c) {
        for (acc, &v) in bd.iter_mut().zip(row) {
            *acc += v;
        }
    }
    b
}

/// Resolved 3-D convolution geometry. The temporal axis leads, is never
/// padded, and has its own stride.
#[derive(Debug, Clone)]
pub struct Geom3d {
    pub in_t: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_c: usize,
    pub t_stride: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_t: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geom3d {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        spatial_stride: usize,
        temporal_stride: usize,
        padding: Padding,
    ) -> Result<Geom3d> {
        if input_shape.len() != 4 {
            return Err(Error::shape("conv3d", format!("input must be [t,h,w,c], got {input_shape:?}")));
        }
        if kernel_shape.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("kernel must be [kt,kh,kw,c_in,c_out], got {kernel_shape:?}"),
            ));
        }
        if spatial_stride < 1 || temporal_stride < 1 {
            return Err(Error::Config("conv3d strides must be >= 1".to_string()));
        }
        let (in_t, in_h, in_w, in_c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (kt, kh, kw, kc, out_c) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
            kernel_shape[4],
        );
        if input_shape.iter().any(|&e| e == 0) || kernel_shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("conv3d", "zero extent".to_string()));
        }
        if kc != in_c {
            return Err(Error::shape(
                "conv3d",
                format!("input has {in_c} channels but kernel expects {kc}"),
            ));
        }
        if in_t < kt {
            return Err(Error::shape(
                "conv3d",
                format!("temporal extent {in_t} smaller than temporal kernel {kt} (no temporal padding)"),
            ));
        }
        let (pad_top, pad_bottom) = axis_pads(padding, in_h, kh, spatial_stride);
        let (pad_left, pad_right) = axis_pads(padding, in_w, kw, spatial_stride);
        if in_h + pad_top + pad_bottom < kh || in_w + pad_left + pad_right < kw {
            return Err(Error::shape("conv3d", "input smaller than kernel".to_string()));
        }
        Ok(Geom3d {
            in_t,
            in_h,
            in_w,
            in_c,
            kt,
            kh,
            kw,
            out_c,
            t_stride: temporal_stride,
            stride: spatial_stride,
            pad_top,
            pad_left,
            out_t: (in_t - kt) / temporal_stride + 1,
            out_h: axis_out(in_h, kh, spatial_stride, pad_top, pad_bottom),
            out_w: axis_out(in_w, kw, spatial_stride, pad_left, pad_right),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.out_t, self.out_h, self.out_w, self.out_c]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.in_t, self.in_h, self.in_w, self.in_c]
    }

    fn patch_len(&self) -> usize {
        self.kt * self.kh * self.kw * self.in_c
    }
}

fn im2col_3d(x: &[f64], g: &Geom3d, row_start: usize, row_end: usize, patch: &mut [f64]) {
    let k = g.patch_len();
    let c = g.in_c;
    let plane = g.in_h * g.in_w;
    for r in row_start..row_end {
        let ot = r / (g.out_h * g.out_w);
        let rem = r % (g.out_h * g.out_w);
        let oy = rem / g.out_w;
        let ox = rem % g.out_w;
        let mut p = (r - row_start) * k;
        for kt in 0..g.kt {
            let t = ot * g.t_stride + kt;
            let toff = t * plane;
            for ky in 0..g.kh {
                let y = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if y < 0 || y >= g.in_h as isize {
                    patch[p..p + g.kw * c].fill(0.0);
                    p += g.kw * c;
                    continue;
                }
                let yoff = toff + y as usize * g.in_w;
                for kx in 0..g.kw {
                    let xx = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if xx < 0 || xx >= g.in_w as isize {
                        patch[p..p + c].fill(0.0);
                    } else {
                        let src = (yoff + xx as usize) * c;
                        patch[p..p + c].copy_from_slice(&x[src..src + c]);
                    }
                    p += c;
                }
            }
        }
    }
}

fn col2im_3d(cols: &[f64], g: &Geom3d, row_start: usize, row_end: usize, gx: &mut [f64]) {
    let k = g.patch_len();
    let c = g.in_c;
    let plane = g.in_h * g.in_w;
    for r in row_start..row_end {
        let ot = r / (g.out_h * g.out_w);
        let rem = r % (g.out_h * g.out_w);
        let oy = rem / g.out_w;
        let ox = rem % g.out_w;
        let mut p = (r - row_start) * k;
        for kt in 0..g.kt {
            let t = ot * g.t_stride + kt;
            let toff = t * plane;
            for ky in 0..g.kh {
                let y = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if y < 0 || y >= g.in_h as isize {
                    p += g.kw * c;
                    continue;
                }
                let yoff = toff + y as usize * g.in_w;
                for kx in 0..g.kw {
                    let xx = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if xx >= 0 && xx < g.in_w as isize {
                        let dst = (yoff + xx as usize) * c;
                        for ci in 0..c {
                            gx[dst + ci] += cols[p + ci];
                        }
                    }
                    p += c;
                }
            }
        }
    }
}

pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &Geom3d) -> Tensor {
    let mut out = Tensor::zeros(&g.out_shape());
    let rows = g.out_t * g.out_h * g.out_w;
    let k = g.patch_len();
    let mut patch = vec![0.0f64; CHUNK_ROWS.min(rows) * k];
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + CHUNK_ROWS).min(rows);
        im2col_3d(x.data(), g, r0, r1, &mut patch);
        dgemm(
            r1 - r0, k, g.out_c,
            &patch, k as isize, 1,
            w.data(), g.out_c as isize, 1,
            &mut out.data_mut()[r0 * g.out_c..r1 * g.out_c], false,
        );
        r0 = r1;
    }
    if let Some(b) = bias {
        let bd = b.data();
        for row in out.data_mut().chunks_exact_mut(g.out_c) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
    }
    out
}

pub fn conv3d_input_grad(w: &Tensor, gout: &Tensor, g: &Geom3d) -> Tensor {
    let mut gx = Tensor::zeros(&g.in_shape());
    let rows = g.out_t * g.out_h * g.out_w;
    let k = g.patch_len();
    let mut cols = vec![0.0f64; CHUNK_ROWS.min(rows) * k];
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + CHUNK_ROWS).min(rows);
        dgemm(
            r1 - r0, g.out_c, k,
            &gout.data()[r0 * g.out_c..r1 * g.out_c], g.out_c as isize, 1,
            w.data(), 1, g.out_c as isize,
            &mut cols[..(r1 - r0) * k], false,
        );
        col2im_3d(&cols, g, r0, r1, gx.data_mut());
        r0 = r1;
    }
    gx
}

pub fn conv3d_weight_grad(x: &Tensor, gout: &Tensor, g: &Geom3d) -> Tensor {
    let mut gw = Tensor::zeros(&[g.kt, g.kh, g.kw, g.in_c, g.out_c]);
    let rows = g.out_t * g.out_h * g.out_w;
    let k = g.patch_len();
    let mut patch = vec![0.0f64; CHUNK_ROWS.min(rows) * k];
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + CHUNK_ROWS).min(rows);
        im2col_3d(x.data(), g, r0, r1, &mut patch);
        dgemm(
            k, r1 - r0, g.out_c,
            &patch, 1, k as isize,
            &gout.data()[r0 * g.out_c..r1 * g.out_c], g.out_c as isize, 1,
            gw.data_mut(), true,
        );
        r0 = r1;
    }
    gw
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Naive sliding-window cross-correlation, the independent oracle.
    fn naive_conv2d(x: &Tensor, w: &Tensor, g: &Geom2d) -> Tensor {
        let mut out = Tensor::zeros(&g.out_shape());
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for oc in 0..g.out_c {
                    let mut acc = 0.0;
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let y = (oy * g.stride + ky * g.dilation) as isize - g.pad_top as isize;
                            let xx = (ox * g.stride + kx * g.dilation) as isize - g.pad_left as isize;
                            if y < 0 || y >= g.in_h as isize || xx < 0 || xx >= g.in_w as isize {
                                continue;
                            }
                            for ci in 0..g.in_c {
                                acc += x.at(&[y as usize, xx as usize, ci]) * w.at(&[ky, kx, ci, oc]);
                            }
                        }
                    }
                    out.set(&[oy, ox, oc], acc);
                }
            }
        }
        out
    }

    fn naive_conv3d(x: &Tensor, w: &Tensor, g: &Geom3d) -> Tensor {
        let mut out = Tensor::zeros(&g.out_shape());
        for ot in 0..g.out_t {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for oc in 0..g.out_c {
                        let mut acc = 0.0;
                        for kt in 0..g.kt {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let t = ot * g.t_stride + kt;
                                    let y = (oy * g.stride + ky) as isize - g.pad_top as isize;
                                    let xx = (ox * g.stride + kx) as isize - g.pad_left as isize;
                                    if y < 0 || y >= g.in_h as isize || xx < 0 || xx >= g.in_w as isize {
                                        continue;
                                    }
                                    for ci in 0..g.in_c {
                                        acc += x.at(&[t, y as usize, xx as usize, ci])
                                            * w.at(&[kt, ky, kx, ci, oc]);
                                    }
                                }
                            }
                        }
                        out.set(&[ot, oy, ox, oc], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_3x3_valid_sums_to_nine() {
        let x = Tensor::full(&[3, 3, 1], 1.0);
        let w = Tensor::full(&[3, 3, 1, 1], 1.0);
        let g = Geom2d::resolve(x.shape(), w.shape(), 1, 1, Padding::Valid).unwrap();
        let y = conv2d_forward(&x, &w, None, &g);
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.scalar_value(), 9.0);
    }

    #[test]
    fn identity_1x1_kernel_preserves_input() {
        let mut rng = crate::rng::stream(1, "conv-id");
        let x = randn(&[4, 5, 1], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let g = Geom2d::resolve(x.shape(), w.shape(), 1, 1, Padding::Valid).unwrap();
        let y = conv2d_forward(&x, &w, None, &g);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn random_conv2d_matches_naive_oracle() {
        let mut rng = crate::rng::stream(2, "conv-oracle");
        let x = randn(&[5, 5, 2], &mut rng);
        let w = randn(&[3, 3, 2, 3], &mut rng);
        for pad in [Padding::Valid, Padding::Same, Padding::Explicit(1)] {
            for stride in [1, 2] {
                let g = Geom2d::resolve(x.shape(), w.shape(), stride, 1, pad).unwrap();
                let fast = conv2d_forward(&x, &w, None, &g);
                let slow = naive_conv2d(&x, &w, &g);
                for (a, b) in fast.data().iter().zip(slow.data()) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b} (pad {pad:?} stride {stride})");
                }
            }
        }
    }

    #[test]
    fn dilated_conv2d_matches_naive_oracle() {
        let mut rng = crate::rng::stream(3, "conv-dilated");
        let x = randn(&[9, 9, 2], &mut rng);
        let w = randn(&[3, 3, 2, 2], &mut rng);
        for dilation in [2, 4] {
            let g = Geom2d::resolve(x.shape(), w.shape(), 1, dilation, Padding::Same).unwrap();
            assert_eq!(g.out_h, 9);
            let fast = conv2d_forward(&x, &w, None, &g);
            let slow = naive_conv2d(&x, &w, &g);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_padding_preserves_extent_at_stride_1() {
        let x = Tensor::zeros(&[7, 11, 3]);
        let w = Tensor::zeros(&[3, 3, 3, 5]);
        let g = Geom2d::resolve(x.shape(), w.shape(), 1, 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w), (7, 11));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::zeros(&[4, 4, 3]);
        let w = Tensor::zeros(&[3, 3, 2, 5]);
        let err = Geom2d::resolve(x.shape(), w.shape(), 1, 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn adjoint_identity_conv2d() {
        // <conv(x), y> == <x, adjoint(y)> on random tensors.
        let mut rng = crate::rng::stream(4, "conv-adjoint");
        for (stride, pad) in [(1, Padding::Same), (2, Padding::Same), (2, Padding::Valid), (1, Padding::Explicit(1))] {
            let x = randn(&[6, 6, 3], &mut rng);
            let w = randn(&[3, 3, 3, 4], &mut rng);
            let g = Geom2d::resolve(x.shape(), w.shape(), stride, 1, pad).unwrap();
            let cx = conv2d_forward(&x, &w, None, &g);
            let y = randn(cx.shape(), &mut rng);
            let aty = conv2d_input_grad(&w, &y, &g);
            let lhs = cx.dot(&y);
            let rhs = x.dot(&aty);
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn weight_grad_matches_finite_difference() {
        let mut rng = crate::rng::stream(5, "conv-wgrad");
        let x = randn(&[5, 5, 2], &mut rng);
        let mut w = randn(&[3, 3, 2, 2], &mut rng);
        let g = Geom2d::resolve(x.shape(), w.shape(), 2, 1, Padding::Same).unwrap();
        let gout = randn(&Geom2d::out_shape(&g), &mut rng);
        let gw = conv2d_weight_grad(&x, &gout, &g);
        let h = 1e-6;
        for idx in [0usize, 7, 13, gw.numel() - 1] {
            let orig = w.data()[idx];
            w.data_mut()[idx] = orig + h;
            let up = conv2d_forward(&x, &w, None, &g).dot(&gout);
            w.data_mut()[idx] = orig - h;
            let dn = conv2d_forward(&x, &w, None, &g).dot(&gout);
            w.data_mut()[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((gw.data()[idx] - fd).abs() < 1e-6, "{} vs {}", gw.data()[idx], fd);
        }
    }

    #[test]
    fn conv3d_temporal_extent_shrinks_without_padding() {
        let x = Tensor::zeros(&[6, 8, 8, 1]);
        let w = Tensor::zeros(&[2, 4, 4, 1, 4]);
        let g = Geom3d::resolve(x.shape(), w.shape(), 2, 1, Padding::Explicit(1)).unwrap();
        assert_eq!(g.out_t, 5);
        assert_eq!((g.out_h, g.out_w), (4, 4));
    }

    #[test]
    fn conv3d_all_ones_cube() {
        let x = Tensor::full(&[2, 2, 2, 1], 1.0);
        let w = Tensor::full(&[2, 2, 2, 1, 1], 1.0);
        let g = Geom3d::resolve(x.shape(), w.shape(), 1, 1, Padding::Valid).unwrap();
        let y = conv3d_forward(&x, &w, None, &g);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.scalar_value(), 8.0);
    }

    #[test]
    fn conv3d_rejects_short_temporal_extent() {
        let x = Tensor::zeros(&[1, 8, 8, 1]);
        let w = Tensor::zeros(&[2, 4, 4, 1, 4]);
        assert!(Geom3d::resolve(x.shape(), w.shape(), 2, 1, Padding::Same).is_err());
    }

    #[test]
    fn random_conv3d_matches_naive_oracle() {
        let mut rng = crate::rng::stream(6, "conv3d-oracle");
        let x = randn(&[4, 6, 6, 2], &mut rng);
        let w = randn(&[2, 3, 3, 2, 3], &mut rng);
        let g = Geom3d::resolve(x.shape(), w.shape(), 2, 1, Padding::Same).unwrap();
        let fast = conv3d_forward(&x, &w, None, &g);
        let slow = naive_conv3d(&x, &w, &g);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity_conv3d() {
        let mut rng = crate::rng::stream(7, "conv3d-adjoint");
        let x = randn(&[5, 6, 6, 2], &mut rng);
        let w = randn(&[2, 4, 4, 2, 3], &mut rng);
        let g = Geom3d::resolve(x.shape(), w.shape(), 2, 1, Padding::Explicit(1)).unwrap();
        let cx = conv3d_forward(&x, &w, None, &g);
        let y = randn(cx.shape(), &mut rng);
        let aty = conv3d_input_grad(&w, &y, &g);
        assert!((cx.dot(&y) - x.dot(&aty)).abs() < 1e-10);
    }

    #[test]
    fn gemm_thread_count_does_not_change_bits() {
        let mut rng = crate::rng::stream(8, "conv-threads");
        let x = randn(&[16, 16, 8], &mut rng);
        let w = randn(&[3, 3, 8, 16], &mut rng);
        let g = Geom2d::resolve(x.shape(), w.shape(), 1, 1, Padding::Same).unwrap();
        set_gemm_threads(1);
        let a = conv2d_forward(&x, &w, None, &g);
        set_gemm_threads(4);
        let b = conv2d_forward(&x, &w, None, &g);
        set_gemm_threads(0);
        assert_eq!(a.data(), b.data());
    }
}
