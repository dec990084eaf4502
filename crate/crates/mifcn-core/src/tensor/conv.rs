//! Dilated 2-D convolution in the true convolution orientation (kernel
//! flipped relative to cross-correlation) with same-size zero padding.
//!
//! Layouts are row major throughout: inputs `[Cin, H, W]`, kernels
//! `[Cout, Cin, k, k]`, biases `[Cout]`, outputs `[Cout, H, W]`.
//! With radius `r = (k-1)/2` and dilation `d`, an output pixel is
//!
//! ```text
//! out(o, y, x) = bias(o) + sum over ci, u, v of
//!                in(ci, y - d*(u-r), x - d*(v-r)) * ker(o, ci, u, v)
//! ```
//!
//! where reads outside the image contribute zero, so spatial size is
//! preserved for every odd `k` and any `d >= 1`.
//!
//! The 3x3 path fuses all nine taps per (output channel, input channel,
//! row) triple and keeps the output row in cache, which is what makes
//! whole-B-scan inference cheap; the generic path is tap-by-tap. Both
//! produce identical results up to summation order.

use super::Tensor;
use crate::error::{Error, Result};

/// Kernel size and dilation of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    kernel_size: usize,
    dilation: usize,
}

impl ConvSpec {
    /// `kernel_size` must be odd (so padding can center the kernel) and
    /// `dilation` at least 1.
    pub fn new(kernel_size: usize, dilation: usize) -> Result<ConvSpec> {
        if kernel_size == 0 || kernel_size % 2 == 0 {
            return Err(Error::Domain(format!(
                "kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        if dilation == 0 {
            return Err(Error::Domain("dilation must be at least 1".into()));
        }
        Ok(ConvSpec { kernel_size, dilation })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Implicit zero padding per side that keeps output size equal to input.
    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) * self.dilation / 2
    }
}

struct ConvShapes {
    cout: usize,
    cin: usize,
    h: usize,
    w: usize,
}

fn check_shapes(input: &Tensor, kernels: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<ConvShapes> {
    let ishape = input.shape();
    if ishape.len() != 3 {
        return Err(Error::Shape(format!(
            "conv input must be [channels, height, width], got {ishape:?}"
        )));
    }
    let kshape = kernels.shape();
    if kshape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv kernels must be [out, in, k, k], got {kshape:?}"
        )));
    }
    let k = spec.kernel_size();
    if kshape[2] != k || kshape[3] != k {
        return Err(Error::Shape(format!(
            "kernel tensor is {kshape:?} but spec says kernel size {k}"
        )));
    }
    if kshape[1] != ishape[0] {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels, input has {}",
            kshape[1], ishape[0]
        )));
    }
    if bias.shape() != [kshape[0]] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            kshape[0]
        )));
    }
    if ishape[1] == 0 || ishape[2] == 0 {
        return Err(Error::Shape("conv input has an empty spatial dimension".into()));
    }
    Ok(ConvShapes { cout: kshape[0], cin: ishape[0], h: ishape[1], w: ishape[2] })
}

/// Dilated convolution with per-channel bias; output is `[Cout, H, W]`.
pub fn conv2d_dilated(input: &Tensor, kernels: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let s = check_shapes(input, kernels, bias, spec)?;
    let mut out = Tensor::zeros(&[s.cout, s.h, s.w]);
    match spec.kernel_size() {
        1 => conv_k1(input, kernels, bias, &s, &mut out),
        3 => conv_k3(input, kernels, bias, spec.dilation(), &s, &mut out),
        _ => conv_generic(input, kernels, bias, spec, &s, &mut out),
    }
    Ok(out)
}

/// 1x1 kernels reduce to a per-pixel linear map across channels.
fn conv_k1(input: &Tensor, kernels: &Tensor, bias: &Tensor, s: &ConvShapes, out: &mut Tensor) {
    let plane = s.h * s.w;
    let idata = input.data();
    let kdata = kernels.data();
    let odata = out.data_mut();
    for o in 0..s.cout {
        let dst = &mut odata[o * plane..(o + 1) * plane];
        dst.fill(bias.data()[o]);
        for ci in 0..s.cin {
            let weight = kdata[o * s.cin + ci];
            let src = &idata[ci * plane..(ci + 1) * plane];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += weight * v;
            }
        }
    }
}

/// 3x3 path: per (o, ci, y) all nine taps are applied to one output row.
fn conv_k3(input: &Tensor, kernels: &Tensor, bias: &Tensor, dilation: usize, s: &ConvShapes, out: &mut Tensor) {
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    let d = dilation;
    let idata = input.data();
    let kdata = kernels.data();
    let odata = out.data_mut();
    // Interior columns where both x-d and x+d stay inside the row.
    let (int_lo, int_hi) = if w > 2 * d { (d, w - d) } else { (0, 0) };
    for o in 0..s.cout {
        let oplane = &mut odata[o * plane..(o + 1) * plane];
        oplane.fill(bias.data()[o]);
        for ci in 0..s.cin {
            let kb = &kdata[(o * s.cin + ci) * 9..(o * s.cin + ci) * 9 + 9];
            let iplane = &idata[ci * plane..(ci + 1) * plane];
            for y in 0..h {
                let dst = &mut oplane[y * w..(y + 1) * w];
                for u in 0..3usize {
                    // Row u of the kernel reads input row y - d*(u-1):
                    // u=0 looks one dilation step below, u=2 one above.
                    let iy = y as isize - d as isize * (u as isize - 1);
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                    let (w0, w1, w2) = (kb[u * 3], kb[u * 3 + 1], kb[u * 3 + 2]);
                    if int_hi > int_lo {
                        // Column tap v=0 reads x+d, v=2 reads x-d.
                        let a = &irow[int_lo + d..int_hi + d];
                        let b = &irow[int_lo..int_hi];
                        let c = &irow[int_lo - d..int_hi - d];
                        let mid = &mut dst[int_lo..int_hi];
                        for i in 0..mid.len() {
                            mid[i] += w0 * a[i] + w1 * b[i] + w2 * c[i];
                        }
                    }
                    for x in (0..int_lo.min(w)).chain(int_hi.max(int_lo)..w) {
                        let mut acc = w1 * irow[x];
                        if x + d < w {
                            acc += w0 * irow[x + d];
                        }
                        if x >= d {
                            acc += w2 * irow[x - d];
                        }
                        dst[x] += acc;
                    }
                }
            }
        }
    }
}

/// Any odd kernel size, one tap at a time with explicit bound clipping.
fn conv_generic(input: &Tensor, kernels: &Tensor, bias: &Tensor, spec: ConvSpec, s: &ConvShapes, out: &mut Tensor) {
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    let k = spec.kernel_size();
    let r = (k - 1) as isize / 2;
    let d = spec.dilation() as isize;
    let idata = input.data();
    let kdata = kernels.data();
    let odata = out.data_mut();
    for o in 0..s.cout {
        let oplane = &mut odata[o * plane..(o + 1) * plane];
        oplane.fill(bias.data()[o]);
        for ci in 0..s.cin {
            let iplane = &idata[ci * plane..(ci + 1) * plane];
            for u in 0..k {
                for v in 0..k {
                    let weight = kdata[((o * s.cin + ci) * k + u) * k + v];
                    if weight == 0.0 {
                        continue;
                    }
                    // Output (y, x) reads input (y - dy, x - dx).
                    let dy = d * (u as isize - r);
                    let dx = d * (v as isize - r);
                    for y in 0..h as isize {
                        let iy = y - dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_lo = dx.max(0) as usize;
                        let x_hi = ((w as isize + dx).min(w as isize)).max(0) as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        let dst = &mut oplane[y as usize * w + x_lo..y as usize * w + x_hi];
                        let src_start = (x_lo as isize - dx) as usize;
                        let src = &iplane[iy as usize * w + src_start..iy as usize * w + src_start + dst.len()];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += weight * sv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the convolution output with respect to its input.
///
/// `grad_out` is `[Cout, H, W]`; the result has shape `[Cin, H, W]` with
/// `Cin` taken from the kernel tensor.
pub fn conv2d_grad_input(grad_out: &Tensor, kernels: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let gshape = grad_out.shape();
    let kshape = kernels.shape();
    if gshape.len() != 3 || kshape.len() != 4 {
        return Err(Error::Shape(format!(
            "grad_input expects grad [out, h, w] and kernels [out, in, k, k], got {gshape:?} and {kshape:?}"
        )));
    }
    let k = spec.kernel_size();
    if kshape[2] != k || kshape[3] != k || kshape[0] != gshape[0] {
        return Err(Error::Shape(format!(
            "kernels {kshape:?} inconsistent with grad {gshape:?} and kernel size {k}"
        )));
    }
    let (cout, cin, h, w) = (kshape[0], kshape[1], gshape[1], gshape[2]);
    let plane = h * w;
    let r = (k - 1) as isize / 2;
    let d = spec.dilation() as isize;
    let mut gin = Tensor::zeros(&[cin, h, w]);
    let gdata = grad_out.data();
    let kdata = kernels.data();
    let idata = gin.data_mut();
    for o in 0..cout {
        let gplane = &gdata[o * plane..(o + 1) * plane];
        for ci in 0..cin {
            let iplane = &mut idata[ci * plane..(ci + 1) * plane];
            for u in 0..k {
                for v in 0..k {
                    let weight = kdata[((o * cin + ci) * k + u) * k + v];
                    if weight == 0.0 {
                        continue;
                    }
                    // Forward read at offset (-dy, -dx) scatters back at (+dy, +dx):
                    // d in(ci, s) collects grad_out(o, s + d*(u-r), s + d*(v-r)).
                    let dy = d * (u as isize - r);
                    let dx = d * (v as isize - r);
                    for sy in 0..h as isize {
                        let gy = sy + dy;
                        if gy < 0 || gy >= h as isize {
                            continue;
                        }
                        let sx_lo = (-dx).max(0) as usize;
                        let sx_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                        if sx_lo >= sx_hi {
                            continue;
                        }
                        let dst = &mut iplane[sy as usize * w + sx_lo..sy as usize * w + sx_hi];
                        let src_start = (sx_lo as isize + dx) as usize;
                        let src = &gplane[gy as usize * w + src_start..gy as usize * w + src_start + dst.len()];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += weight * sv;
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Gradient with respect to the kernel taps, shape `[Cout, Cin, k, k]`.
pub fn conv2d_grad_kernels(grad_out: &Tensor, input: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let gshape = grad_out.shape();
    let ishape = input.shape();
    if gshape.len() != 3 || ishape.len() != 3 || gshape[1..] != ishape[1..] {
        return Err(Error::Shape(format!(
            "grad_kernels expects matching [*, h, w] tensors, got {gshape:?} and {ishape:?}"
        )));
    }
    let k = spec.kernel_size();
    let (cout, cin, h, w) = (gshape[0], ishape[0], gshape[1], gshape[2]);
    let plane = h * w;
    let r = (k - 1) as isize / 2;
    let d = spec.dilation() as isize;
    let mut gk = Tensor::zeros(&[cout, cin, k, k]);
    let gdata = grad_out.data();
    let idata = input.data();
    let kdata = gk.data_mut();
    for o in 0..cout {
        let gplane = &gdata[o * plane..(o + 1) * plane];
        for ci in 0..cin {
            let iplane = &idata[ci * plane..(ci + 1) * plane];
            for u in 0..k {
                for v in 0..k {
                    let dy = d * (u as isize - r);
                    let dx = d * (v as isize - r);
                    let mut acc = 0.0;
                    for y in 0..h as isize {
                        let iy = y - dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_lo = dx.max(0) as usize;
                        let x_hi = ((w as isize + dx).min(w as isize)).max(0) as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        let g = &gplane[y as usize * w + x_lo..y as usize * w + x_hi];
                        let src_start = (x_lo as isize - dx) as usize;
                        let src = &iplane[iy as usize * w + src_start..iy as usize * w + src_start + g.len()];
                        acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                    kdata[((o * cin + ci) * k + u) * k + v] = acc;
                }
            }
        }
    }
    Ok(gk)
}

/// Gradient with respect to the bias: per-channel sum of `grad_out`.
pub fn conv2d_grad_bias(grad_out: &Tensor) -> Result<Tensor> {
    let gshape = grad_out.shape();
    if gshape.len() != 3 {
        return Err(Error::Shape(format!(
            "grad_bias expects grad of shape [out, h, w], got {gshape:?}"
        )));
    }
    let plane = gshape[1] * gshape[2];
    let data = grad_out.data();
    let sums = (0..gshape[0])
        .map(|o| data[o * plane..(o + 1) * plane].iter().sum())
        .collect();
    Tensor::from_vec(&[gshape[0]], sums)
}
