//! Raw f32 kernels over row-major slices.
//!
//! Work is split across threads by output row only. Every output element is
//! produced by the same sequential reduction regardless of thread count, so
//! results are bit-identical between single- and multi-threaded runs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

static MAX_THREADS: AtomicUsize = AtomicUsize::new(0);
static ENV_THREADS: OnceLock<usize> = OnceLock::new();

/// Rows below this count are never split.
const MIN_ROWS_PER_THREAD: usize = 16;

fn env_threads() -> usize {
    *ENV_THREADS.get_or_init(|| {
        let hw = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        match std::env::var("ATSC_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
        {
            Some(n) if n >= 1 => n.min(hw),
            _ => hw,
        }
    })
}

/// Caps kernel worker threads for the whole process. `0` restores the
/// default (`ATSC_THREADS`, else available parallelism).
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n, Ordering::Relaxed);
}

pub fn max_threads() -> usize {
    match MAX_THREADS.load(Ordering::Relaxed) {
        0 => env_threads(),
        n => n,
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`.
pub fn gemm_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let threads = max_threads().min(m / MIN_ROWS_PER_THREAD).max(1);
    if threads == 1 || m * k * n < 1 << 16 {
        gemm_rows(a, b, c, k, n);
        return;
    }
    let rows_per = m.div_ceil(threads);
    std::thread::scope(|s| {
        for (a_chunk, c_chunk) in a.chunks(rows_per * k).zip(c.chunks_mut(rows_per * n)) {
            s.spawn(move || gemm_rows(a_chunk, b, c_chunk, k, n));
        }
    });
}

fn gemm_rows(a: &[f32], b: &[f32], c: &mut [f32], k: usize, n: usize) {
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (p, &aip) in a_row.iter().enumerate() {
            // Exact zeros (masked attention weights) contribute nothing.
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    transpose_into(src, &mut out, rows, cols);
    out
}

pub fn transpose_into(src: &[f32], dst: &mut [f32], rows: usize, cols: usize) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_acc(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn threaded_gemm_is_bit_identical() {
        let (m, k, n) = (128, 64, 96);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut serial = vec![0.0; m * n];
        gemm_rows(&a, &b, &mut serial, k, n);
        let rows_per = m.div_ceil(4);
        let mut split = vec![0.0; m * n];
        let b = &b;
        std::thread::scope(|s| {
            for (ac, cc) in a.chunks(rows_per * k).zip(split.chunks_mut(rows_per * n)) {
                s.spawn(move || gemm_rows(ac, b, cc, k, n));
            }
        });
        assert_eq!(serial, split);
    }

    #[test]
    fn transpose_round_trip() {
        let src: Vec<f32> = (0..35).map(|i| i as f32).collect();
        let t = transpose(&src, 5, 7);
        assert_eq!(t[1], 7.0);
        assert_eq!(transpose(&t, 7, 5), src);
    }
}
