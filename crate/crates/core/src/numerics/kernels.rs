//! Dense matrix-multiply kernels.
//!
//! Every output element is accumulated over the shared axis in increasing
//! index order regardless of vector width or thread count, so results are
//! bitwise reproducible.

use rayon::prelude::*;

use super::tensor::Real;

const PAR_THRESHOLD: usize = 1 << 18;

#[inline(always)]
fn nn_body<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[p, :] += sum_i a[i, p] * b[i, :]` for the row range of `c` handed in.
#[inline(always)]
fn tn_body<T: Real>(a: &[T], b: &[T], c: &mut [T], p0: usize, m: usize, k: usize, n: usize) {
    let rows = c.len() / n;
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (r, c_row) in c.chunks_exact_mut(n).enumerate().take(rows) {
            let av = a_row[p0 + r];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn nn_avx2<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    nn_body(a, b, c, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tn_avx2<T: Real>(a: &[T], b: &[T], c: &mut [T], p0: usize, m: usize, k: usize, n: usize) {
    tn_body(a, b, c, p0, m, k, n)
}

#[inline]
fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        use std::sync::OnceLock;
        static AVX2: OnceLock<bool> = OnceLock::new();
        *AVX2.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn nn_dispatch<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: feature presence checked at runtime.
        unsafe { nn_avx2(a, b, c, k, n) };
        return;
    }
    nn_body(a, b, c, k, n)
}

fn tn_dispatch<T: Real>(a: &[T], b: &[T], c: &mut [T], p0: usize, m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: feature presence checked at runtime.
        unsafe { tn_avx2(a, b, c, p0, m, k, n) };
        return;
    }
    tn_body(a, b, c, p0, m, k, n)
}

fn chunk_rows(rows: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    rows.div_ceil(threads * 4).max(1)
}

/// `c += a · b` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n >= PAR_THRESHOLD && m > 1 && rayon::current_num_threads() > 1 {
        let rows = chunk_rows(m);
        c.par_chunks_mut(rows * n)
            .zip(a.par_chunks(rows * k))
            .for_each(|(c_blk, a_blk)| nn_dispatch(a_blk, b, c_blk, k, n));
    } else {
        nn_dispatch(a, b, c, k, n);
    }
}

/// `c += aᵀ · b` with `a: [m, k]`, `b: [m, n]`, `c: [k, n]`.
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if m * k * n >= PAR_THRESHOLD && k > 1 && rayon::current_num_threads() > 1 {
        let rows = chunk_rows(k);
        c.par_chunks_mut(rows * n)
            .enumerate()
            .for_each(|(blk, c_blk)| tn_dispatch(a, b, c_blk, blk * rows, m, k, n));
    } else {
        tn_dispatch(a, b, c, 0, m, k, n);
    }
}

/// `c += a · bᵀ` with `a: [m, k]`, `b: [n, k]`, `c: [m, n]`.
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
