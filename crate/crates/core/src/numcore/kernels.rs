//! Matrix kernels over raw row-major slices. Accumulation order is fixed by
//! the loop structure; the eight-lane dot product sums lanes in a fixed
//! pattern so it vectorizes without becoming order-dependent.

use super::Scalar;

/// Dot product with eight fixed accumulator lanes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 8;
    let mut acc = [T::zero(); 8];
    for c in 0..chunks {
        let aa = &a[c * 8..c * 8 + 8];
        let bb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += aa[l] * bb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

const MR: usize = 4;
const NR: usize = 16;

/// Register-tiled `c += A·b` where `A[i][p] = a[i·rs + p·cs]`. Every entry of
/// `c` accumulates its `k` products in increasing `p`, so the result does
/// not depend on the tiling.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T]) {
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        let mut j0 = 0;
        while j0 + NR <= n {
            if mr == MR {
                let mut acc = [[T::zero(); NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                }
                for p in 0..k {
                    let bb: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                    for (r, row) in acc.iter_mut().enumerate() {
                        let s = a[(i0 + r) * rs + p * cs];
                        for l in 0..NR {
                            row[l] += s * bb[l];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            } else {
                for r in 0..mr {
                    let mut acc = [T::zero(); NR];
                    acc.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                    for p in 0..k {
                        let s = a[(i0 + r) * rs + p * cs];
                        let bb = &b[p * n + j0..p * n + j0 + NR];
                        for l in 0..NR {
                            acc[l] += s * bb[l];
                        }
                    }
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(&acc);
                }
            }
            j0 += NR;
        }
        if j0 < n {
            for r in 0..mr {
                let crow = &mut c[(i0 + r) * n + j0..(i0 + r) * n + n];
                for p in 0..k {
                    let s = a[(i0 + r) * rs + p * cs];
                    for (cv, &bv) in crow.iter_mut().zip(&b[p * n + j0..p * n + n]) {
                        *cv += s * bv;
                    }
                }
            }
        }
        i0 += MR;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm_strided(m, k, n, a, k, 1, b, c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    gemm_strided(m, k, n, a, 1, m, b, c);
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

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn all_variants_agree_with_naive() {
        let (m, k, n) = (5, 13, 7);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 17 % 7) as f64) * 0.5 - 1.0).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        assert_eq!(c, want);

        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c);
        assert_eq!(c, want);

        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c);
        assert_eq!(c, want);
    }

    #[test]
    fn dot_handles_tails() {
        for n in 0..20 {
            let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let want: f64 = a.iter().map(|x| x * x).sum();
            assert_eq!(dot(&a, &a), want);
        }
    }
}
