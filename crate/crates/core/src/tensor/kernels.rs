// Row-major dense kernels shared by the eager helpers and the graph.

/// `c[m,n] = op(a)·op(b)` through `matrixmultiply`, with explicit element
/// strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: every index the kernel touches, `i·rs + j·cs` for `i < rows`
    // and `j < cols`, lies inside the slices by the shape contracts of the
    // callers, and `c` is a fresh `m·n` buffer with row stride `n`.
    unsafe {
        matrixmultiply::dgemm(
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert!(a.len() == m * k && b.len() == k * n);
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1)
}

/// `a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert!(a.len() == m * k && b.len() == n * k);
    gemm(m, k, n, a, k as isize, 1, b, 1, k as isize)
}

/// `a[k,m]ᵀ · b[k,n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert!(a.len() == k * m && b.len() == k * n);
    gemm(m, k, n, a, 1, m as isize, b, n as isize, 1)
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 4x3
        let bt = transpose(&b, 4, 3);
        assert_eq!(matmul_nt(&a, &b, 2, 3, 4), matmul(&a, &bt, 2, 3, 4));
        let at = transpose(&a, 2, 3); // 3x2
        let c: Vec<f64> = (0..8).map(|v| v as f64 * 0.5).collect(); // 2x4
        let lhs = matmul_tn(&a, &c, 2, 3, 4);
        let rhs = matmul(&at, &c, 3, 2, 4);
        for (x, y) in lhs.iter().zip(&rhs) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
