//! Small row-major GEMM used by the conv and dense ops.
//!
//! Accumulation over the shared dimension always runs in ascending order for
//! each output element, so results are bit-identical for any thread count.

use super::Scalar;
use crate::parallel;

/// Rows of B kept hot per pass; bounds the working set to roughly L2 size.
const K_BLOCK: usize = 256;

/// c (m x n) = a (m x k) * b (k x n), overwriting `c`. Parallel over row
/// chunks of `c` when the `parallel` feature is active.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    matmul_acc(a, b, m, k, n, c, false)
}

/// Like [`matmul`] but with `accumulate: true` adds into `c` instead of
/// overwriting. Each output element is still accumulated in ascending-k
/// order, so accumulation stays deterministic.
pub fn matmul_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let chunk_rows = (m / 32).clamp(8, 512).min(m.max(1));
    parallel::for_chunks_mut(c, chunk_rows * n, |chunk_idx, c_chunk| {
        let row0 = chunk_idx * chunk_rows;
        let rows = c_chunk.len() / n;
        gemm_rows(a, b, k, n, row0, rows, c_chunk, accumulate);
    });
}

/// Sequential GEMM with optional accumulation into `c`; the building block
/// the parallel front end chunks over, and the baseline the bench suite
/// compares against.
pub fn matmul_seq<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_rows(a, b, k, n, 0, m, c, accumulate);
}

fn gemm_rows<T: Scalar>(
    a: &[T],
    b: &[T],
    k: usize,
    n: usize,
    row0: usize,
    rows: usize,
    c_chunk: &mut [T],
    accumulate: bool,
) {
    if !accumulate {
        c_chunk.iter_mut().for_each(|v| *v = T::zero());
    }
    let mut k_start = 0;
    while k_start < k {
        let k_end = (k_start + K_BLOCK).min(k);
        for i in 0..rows {
            let a_row = &a[(row0 + i) * k..(row0 + i) * k + k];
            let c_row = &mut c_chunk[i * n..(i + 1) * n];
            for kk in k_start..k_end {
                let a_ik = a_row[kk];
                if a_ik == T::zero() {
                    continue;
                }
                let b_row = &b[kk * n..kk * n + n];
                for (cv, bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_ik * *bv;
                }
            }
        }
        k_start = k_end;
    }
}

/// out (cols x rows) = transpose of a (rows x cols).
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    #[test]
    fn matmul_matches_naive_loop() {
        let (m, k, n) = (7, 300, 13);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }

        let mut c2 = vec![0.0; m * n];
        matmul_seq(&a, &b, m, k, n, &mut c2, false);
        assert_eq!(c, c2, "parallel and sequential paths must agree bit-for-bit");
    }

    #[test]
    fn matmul_seq_accumulates() {
        let a = [1.0f64, 2.0];
        let b = [3.0f64, 4.0];
        let mut c = vec![10.0f64];
        matmul_seq(&a, &b, 1, 2, 1, &mut c, true);
        assert_eq!(c[0], 10.0 + 3.0 + 8.0);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f64> = (0..12).map(|x| x as f64).collect();
        let mut t = vec![0.0; 12];
        let mut back = vec![0.0; 12];
        transpose(&a, 3, 4, &mut t);
        transpose(&t, 4, 3, &mut back);
        assert_eq!(a, back);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 4.0);
        assert_eq!(t[3 * 4 - 1], 11.0);
    }
}
