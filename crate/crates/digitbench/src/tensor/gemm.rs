//! f64 GEMM wrapper. Transposed reads are handled through strides so no
//! operand is ever materialized transposed. Large products are row-split
//! into two fixed halves executed via `rayon::join`; the split points depend
//! only on the shape, so results are identical for any thread count.

const SPLIT_MIN_ROWS: usize = 64;
const SPLIT_MIN_INNER: usize = 32_768;

/// `c = alpha * A' * B' + beta * c` where `A'` is `a` read as an `m x k`
/// matrix (stored `k x m` when `ta`) and `B'` is `b` read as `k x n`
/// (stored `n x k` when `tb`). `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };

    if m >= SPLIT_MIN_ROWS && k * n >= SPLIT_MIN_INNER {
        let half = m / 2;
        let (c0, c1) = c.split_at_mut(half * n);
        let a_ptr = a.as_ptr();
        let a1 = unsafe { a_ptr.offset(half as isize * rsa) };
        rayon::join(
            || unsafe {
                matrixmultiply::dgemm(
                    half,
                    k,
                    n,
                    alpha,
                    a_ptr,
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c0.as_mut_ptr(),
                    n as isize,
                    1,
                );
            },
            || unsafe {
                matrixmultiply::dgemm(
                    m - half,
                    k,
                    n,
                    alpha,
                    a1,
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c1.as_mut_ptr(),
                    n as isize,
                    1,
                );
            },
        );
    } else {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
        let bt = |p: usize, j: usize| if tb { b[j * k + p] } else { b[p * n + j] };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += at(i, p) * bt(p, j);
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matches_naive_for_all_flag_combos() {
        let (m, k, n) = (5, 4, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * -0.21 + 1.0).collect();
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, 1.0, &a, ta, &b, tb, 0.0, &mut c);
            let want = naive(m, k, n, &a, ta, &b, tb);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y} (ta={ta} tb={tb})");
            }
        }
    }

    #[test]
    fn split_path_matches_unsplit() {
        let (m, k, n) = (128, 96, 80);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 31 % 17) as f64) - 8.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 11) as f64) - 5.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, false, &b, false, 0.0, &mut c);
        let want = naive(m, k, n, &a, false, &b, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn beta_accumulates() {
        let mut c = vec![1.0; 4];
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![2.0, 0.0, 0.0, 2.0];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c, vec![3.0, 1.0, 1.0, 3.0]);
    }
}
