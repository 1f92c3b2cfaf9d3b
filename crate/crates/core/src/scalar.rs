//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Models and attacks are written once against [`Scalar`] and instantiated
//! for `f32` (training and inference) and `f64` (finite-difference oracles).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Complementary error function.
    fn erfc(self) -> Self;

    /// `c = alpha * a * b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must lie
    /// inside the corresponding buffer. [`matmul`] checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Converts an `f64` literal, panicking only for unrepresentable values.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

/// Treats subnormal `f32` operands and results as zero on this thread until
/// dropped. Saturated sigmoid/GELU units feed subnormals into the GEMMs, and
/// each one costs a microcode assist on x86.
struct FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    fn enter() -> Self {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        const FTZ: u32 = 1 << 15;
        const DAZ: u32 = 1 << 6;
        // SAFETY: SSE is part of the x86-64 baseline; only the two
        // subnormal-handling bits change.
        unsafe {
            let saved = _mm_getcsr();
            _mm_setcsr(saved | FTZ | DAZ);
            Self { saved }
        }
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn enter() -> Self {
        Self {}
    }
}

impl Drop for FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    fn drop(&mut self) {
        // SAFETY: restores the value read in `enter`.
        unsafe { std::arch::x86_64::_mm_setcsr(self.saved) }
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn drop(&mut self) {}
}

impl Scalar for f32 {
    #[inline]
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        let _ftz = FlushSubnormals::enter();
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    #[inline]
    fn erfc(self) -> Self {
        libm::erfc(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` view over `data`.
    pub(crate) fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub(crate) fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c = alpha * a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub(crate) fn matmul<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len());
    // SAFETY: all reachable indices were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul(1.0, MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // (a^T)^T b == a b
        let mut c2 = vec![0.0; 8];
        matmul(1.0, MatRef::new(&a, 2, 3).t().t(), MatRef::new(&b, 3, 4), 0.0, &mut c2);
        assert_eq!(c, c2);
        // accumulate with beta = 1
        matmul(1.0, MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), 1.0, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn erfc_endpoints() {
        assert_eq!(Scalar::erfc(0.0f64), 1.0);
        assert!((Scalar::erfc(10.0f32)).abs() < 1e-30);
        assert!((Scalar::erfc(-10.0f64) - 2.0).abs() < 1e-15);
    }
}
