// Kernels shared by the forward and backward passes. Matrix products go
// through a packed GEMM whose blocking depends only on the operand shapes, so
// results are reproducible run to run; the scalar loops run in a fixed order.

use crate::Real;

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out);
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (1, k as isize), out);
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn matmul_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(k, m, n, a, (1, k as isize), b, (n as isize, 1), out);
}

/// Dot product with four interleaved partial sums combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let d_inner = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * d_inner
}

/// `x·ln x` with the convention 0·ln 0 = 0.
#[inline]
pub(crate) fn xlogx<T: Real>(x: T) -> T {
    if x > T::zero() {
        x * x.ln()
    } else {
        T::zero()
    }
}

/// Jensen-Shannon divergence of two rows, natural log, given each row's
/// precomputed `Σ x ln x` so a pair costs one logarithm per entry.
pub(crate) fn js_rows_with<T: Real>(p: &[T], q: &[T], hp: T, hq: T) -> T {
    let half = T::lit(0.5);
    let mut mix = T::zero();
    for (&a, &b) in p.iter().zip(q) {
        mix += xlogx(half * (a + b));
    }
    half * (hp + hq) - mix
}

/// Numerically stable log-sum-exp over the entries selected by `keep`.
pub(crate) fn log_sum_exp<T: Real>(row: &[T], keep: impl Fn(usize) -> bool) -> T {
    let mut max = T::neg_infinity();
    for (k, &v) in row.iter().enumerate() {
        if keep(k) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return max;
    }
    let mut sum = T::zero();
    for (k, &v) in row.iter().enumerate() {
        if keep(k) {
            sum += (v - max).exp();
        }
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_on_odd_lengths() {
        for len in [0usize, 1, 3, 4, 7, 9] {
            let a: Vec<f64> = (0..len).map(|i| i as f64 + 0.5).collect();
            let b: Vec<f64> = (0..len).map(|i| 1.0 - i as f64).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_skips_excluded() {
        let row = [0.0f64, 1000.0, 0.0];
        let v = log_sum_exp(&row, |k| k != 1);
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }
}
