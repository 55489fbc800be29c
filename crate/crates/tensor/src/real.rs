use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Floating point element type of a tensor. Implemented for `f32` and `f64`.
pub trait Real:
    Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c += a · b` on strided row-major views (`a` is m×k, `b` is k×n).
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], a_strides: (isize, isize), b: &[Self], b_strides: (isize, isize), c: &mut [Self]);
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], (rsa, csa): (isize, isize), b: &[Self], (rsb, csb): (isize, isize), c: &mut [Self]) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: the asserts above bound every index the strides can reach.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1);
        }
    }

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], (rsa, csa): (isize, isize), b: &[Self], (rsb, csb): (isize, isize), c: &mut [Self]) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: the asserts above bound every index the strides can reach.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1);
        }
    }

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
