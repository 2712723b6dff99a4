//! Row-major matrix products backed by `matrixmultiply`.
//!
//! All kernels accumulate into `c`; callers zero it when they want a plain
//! product. Generic over the element type so the exact-integer forward of
//! quantized layers can run in `f64` when `f32` would lose integer exactness.
//! For a given machine and shape the reduction order is fixed, so repeated
//! products are bit-identical.

pub trait Scalar:
    Copy + Default + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self>
{
    /// `c += a·b` with explicit row/column strides (in elements).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    );
}

macro_rules! scalar_impl {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                // SAFETY: callers pass slices of at least `m·k`, `k·n` and
                // `m·n` elements laid out according to the given strides.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        1.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

scalar_impl!(f32, matrixmultiply::sgemm);
scalar_impl!(f64, matrixmultiply::dgemm);

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "matmul_nn buffer sizes"
    );
    T::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(
        a.len() >= m * k && b.len() >= n * k && c.len() >= m * n,
        "matmul_nt buffer sizes"
    );
    T::gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(
        a.len() >= k * m && b.len() >= k * n && c.len() >= m * n,
        "matmul_tn buffer sizes"
    );
    T::gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, c);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn three_layouts_agree_with_naive() {
        let (m, k, n) = (5, 19, 7);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 13) as f64) - 6.0).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        matmul_nn(m, k, n, &a, &b, &mut c);
        assert_eq!(c, want);

        let bt = transpose(k, n, &b);
        let mut c = vec![0.0; m * n];
        matmul_nt(m, k, n, &a, &bt, &mut c);
        assert_eq!(c, want);

        let at = transpose(m, k, &a);
        let mut c = vec![0.0; m * n];
        matmul_tn(m, k, n, &at, &b, &mut c);
        assert_eq!(c, want);
    }
}
