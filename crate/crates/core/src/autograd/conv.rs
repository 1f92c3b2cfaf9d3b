//! im2col-based 2D convolution kernels shared by the forward and reverse
//! passes of `Conv2d` and `ConvTranspose2d`.

use crate::error::{Error, Result};
use crate::scalar::{matmul, MatRef, Scalar};

/// Geometry of a strided, zero-padded square-kernel convolution mapping
/// `in_c x in_h x in_w` to `out_c x out_h x out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn conv(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("kernel and stride must be positive"));
        }
        let span_h = in_h + 2 * padding;
        let span_w = in_w + 2 * padding;
        if span_h < kernel || span_w < kernel {
            return Err(Error::invalid(format!("kernel {kernel} larger than padded input {in_h}x{in_w}")));
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h: (span_h - kernel) / stride + 1,
            out_w: (span_w - kernel) / stride + 1,
            kernel,
            stride,
            padding,
        })
    }

    /// Rows of the im2col matrix: `in_c * k * k`.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_pixels()
    }

    /// Calls `f(col_start, input_start, len)` for every run of in-bounds
    /// taps along an output row. Consecutive taps of a run are adjacent in
    /// the column matrix and `stride` apart in the input.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let npix = self.out_pixels();
        for c in 0..self.in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    // ox is valid when 0 <= ox * s + kx - p < in_w
                    let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
                    let hi = if self.in_w + p > kx { (self.in_w + p - kx).div_ceil(s).min(self.out_w) } else { 0 };
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= self.in_h {
                            continue;
                        }
                        let in_row = (c * self.in_h + iy - p) * self.in_w;
                        f(row * npix + oy * self.out_w + lo, in_row + lo * s + kx - p, hi - lo);
                    }
                }
            }
        }
    }

    /// Unfolds one example into a `patch_len x out_pixels` matrix.
    pub fn im2col<T: Scalar>(&self, input: &[T], cols: &mut [T]) {
        assert_eq!(input.len(), self.in_len());
        cols[..self.patch_len() * self.out_pixels()].fill(T::zero());
        let s = self.stride;
        self.for_each_run(|dst, src, len| {
            let d = &mut cols[dst..dst + len];
            if s == 1 {
                d.copy_from_slice(&input[src..src + len]);
            } else {
                for (o, &i) in d.iter_mut().zip(input[src..].iter().step_by(s)) {
                    *o = i;
                }
            }
        });
    }

    /// Folds a `patch_len x out_pixels` matrix back, accumulating into `out`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], out: &mut [T]) {
        assert_eq!(out.len(), self.in_len());
        let s = self.stride;
        self.for_each_run(|dst, src, len| {
            for (o, &c) in out[src..].iter_mut().step_by(s).zip(&cols[dst..dst + len]) {
                *o += c;
            }
        });
    }
}

/// Forward convolution of one example: `out = W * im2col(x) + b`.
pub(crate) fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T], cols: &mut [T], out: &mut [T]) {
    g.im2col(x, cols);
    let npix = g.out_pixels();
    for (c, row) in out.chunks_mut(npix).enumerate() {
        row.fill(b[c]);
    }
    matmul(T::one(), MatRef::new(w, g.out_c, g.patch_len()), MatRef::new(cols, g.patch_len(), npix), T::one(), out);
}

/// Transposed convolution of one example. `g` is the geometry of the
/// adjoint convolution (output space -> input space), so `g.in_*` describes
/// this layer's output and `g.out_*` its input. Weight layout is
/// `in_c x out_c x k x k` of the transposed layer, i.e. `g.out_c x patch_len`.
pub(crate) fn conv_transpose_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    b: &[T],
    cols: &mut [T],
    out: &mut [T],
) {
    let npix = g.out_pixels();
    matmul(T::one(), MatRef::new(w, g.out_c, g.patch_len()).t(), MatRef::new(x, g.out_c, npix), T::zero(), cols);
    let plane = g.in_h * g.in_w;
    for (c, row) in out.chunks_mut(plane).enumerate() {
        row.fill(b[c]);
    }
    g.col2im(cols, out);
}
