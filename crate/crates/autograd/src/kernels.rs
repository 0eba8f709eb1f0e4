//! Raw spatial kernels shared by the forward and backward passes.

use crate::Scalar;

/// Geometry of a 2d convolution over one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && kernel >= 1);
        assert!(
            height + 2 * pad >= kernel && width + 2 * pad >= kernel,
            "kernel {kernel} larger than padded input {height}x{width}"
        );
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` along one axis whose input index is in bounds
    /// for kernel offset `k`.
    fn valid_range(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        // input = o * stride + k - pad must be in [0, in_len)
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((in_len as isize - off) + s - 1) / s;
        let lo = lo.clamp(0, out_len as isize) as usize;
        let hi = hi.clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let p = g.cols();
    for c in 0..g.channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            let (ylo, yhi) = g.valid_range(ki, g.out_h, h);
            for kj in 0..k {
                let (xlo, xhi) = g.valid_range(kj, g.out_w, w);
                let row = &mut col[((c * k + ki) * k + kj) * p..][..p];
                for oy in 0..g.out_h {
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < ylo || oy >= yhi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = xlo + kj - g.pad;
                        dst[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column buffer back to image layout (adjoint of [`im2col`]).
pub(crate) fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let p = g.cols();
    for c in 0..g.channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            let (ylo, yhi) = g.valid_range(ki, g.out_h, h);
            for kj in 0..k {
                let (xlo, xhi) = g.valid_range(kj, g.out_w, w);
                let row = &col[((c * k + ki) * k + kj) * p..][..p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    if g.stride == 1 {
                        let start = xlo + kj - g.pad;
                        for (d, &s) in dst[start..start + (xhi - xlo)].iter_mut().zip(&src[xlo..xhi]) {
                            *d += s;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst[ox * g.stride + kj - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Sum over the in-bounds 3x3 neighbourhood of every pixel of an `h x w` plane.
pub(crate) fn box3_sum<T: Scalar>(x: &[T], h: usize, w: usize, out: &mut [T], tmp: &mut Vec<T>) {
    tmp.clear();
    tmp.resize(h * w, T::zero());
    for i in 0..h {
        let r = &x[i * w..(i + 1) * w];
        let t = &mut tmp[i * w..(i + 1) * w];
        for j in 0..w {
            let mut s = r[j];
            if j > 0 {
                s += r[j - 1];
            }
            if j + 1 < w {
                s += r[j + 1];
            }
            t[j] = s;
        }
    }
    for i in 0..h {
        for j in 0..w {
            let mut s = tmp[i * w + j];
            if i > 0 {
                s += tmp[(i - 1) * w + j];
            }
            if i + 1 < h {
                s += tmp[(i + 1) * w + j];
            }
            out[i * w + j] = s;
        }
    }
}

/// Number of in-bounds pixels in the 3x3 window centred at `(i, j)`.
#[inline]
pub(crate) fn box3_count(i: usize, j: usize, h: usize, w: usize) -> usize {
    let rows = 1 + usize::from(i > 0) + usize::from(i + 1 < h);
    let cols = 1 + usize::from(j > 0) + usize::from(j + 1 < w);
    rows * cols
}
