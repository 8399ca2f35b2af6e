//! Patch extraction for kernel-4, stride-2 convolutions without padding.

use super::Real;

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;

/// Output side of a convolution over `side` pixels; `None` if the kernel does
/// not fit.
pub fn conv_out(side: usize) -> Option<usize> {
    (side >= KERNEL).then(|| (side - KERNEL) / STRIDE + 1)
}

/// Output side of the transposed convolution over `side` pixels.
pub fn deconv_out(side: usize) -> usize {
    (side.max(1) - 1) * STRIDE + KERNEL
}

/// `[c, h, w]` image to `[c * 16, oh * ow]` patch columns. Pixels beyond the
/// last full stride are never read.
pub(crate) fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize, dst: &mut [T]) {
    debug_assert_eq!(src.len(), c * h * w);
    debug_assert_eq!(dst.len(), c * KERNEL * KERNEL * oh * ow);
    let p = oh * ow;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ch * KERNEL + ky) * KERNEL + kx;
                let out = &mut dst[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let line = &plane[(oy * STRIDE + ky) * w..];
                    for ox in 0..ow {
                        out[oy * ow + ox] = line[ox * STRIDE + kx];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back onto an image,
/// accumulating overlaps into `dst`.
pub(crate) fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize, dst: &mut [T]) {
    debug_assert_eq!(dst.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * KERNEL * KERNEL * oh * ow);
    let p = oh * ow;
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ch * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let base = (oy * STRIDE + ky) * w + kx;
                    for ox in 0..ow {
                        plane[base + ox * STRIDE] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}
