//! GEMM microkernels for the convolution lowering.
//!
//! The stride-1 convolution is expressed as `C[M,N] = A[M,K] * B[K,N]` where
//! row `k` of `B` is a shifted window into a zero-padded volume. `B` is
//! therefore passed as one pointer per row ("virtual im2col"): rows are
//! contiguous along `N` but start at arbitrary addresses, so nothing is
//! materialized. On AVX-512 hardware a native kernel processes 8x48 output
//! tiles; anywhere else the rows are packed into a scratch buffer and handed
//! to `matrixmultiply`.
//!
//! Safety: callers guarantee every row pointer is readable over the column
//! range, which the padded-volume layout in `conv.rs` establishes.

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::*;

pub fn avx512_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        is_x86_feature_detected!("avx512f")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// C[M,N] = A[M,K] . B where B row `k` is `b_rows[k][..n]`.
/// C rows are `ldc` apart; A is row-major contiguous `[M, K]`.
///
/// # Safety
/// `a` holds `m * k` values, every `b_rows[i]` is readable for `n` values,
/// and `c` is writable for `(m - 1) * ldc + n` values.
pub unsafe fn gemm_nn_rows(
    m: usize,
    k: usize,
    n: usize,
    a: *const f32,
    b_rows: &[*const f32],
    c: *mut f32,
    ldc: usize,
) {
    debug_assert_eq!(b_rows.len(), k);
    #[cfg(target_arch = "x86_64")]
    if avx512_available() {
        gemm_nn_rows_avx512(m, k, n, a, b_rows, c, ldc);
        return;
    }
    gemm_nn_rows_fallback(m, k, n, a, b_rows, c, ldc);
}

/// C[M,N] += A . B^T over a shared fast axis: `C[m,n] += sum_p A[m,p] B[n,p]`,
/// with A rows `lda` apart, B row `n` given by `b_rows[n]`, C row-major `[M, N]`.
///
/// # Safety
/// `a` spans `(m - 1) * lda + p` values, each `b_rows[i]` is readable for `p`
/// values, and `c` holds `m * n` values.
pub unsafe fn gemm_nt_rows_acc(
    m: usize,
    n: usize,
    p: usize,
    a: *const f32,
    lda: usize,
    b_rows: &[*const f32],
    c: *mut f32,
) {
    debug_assert_eq!(b_rows.len(), n);
    #[cfg(target_arch = "x86_64")]
    if avx512_available() {
        gemm_nt_rows_acc_avx512(m, n, p, a, lda, b_rows, c);
        return;
    }
    gemm_nt_rows_acc_fallback(m, n, p, a, lda, b_rows, c);
}

// ── portable fallbacks ───────────────────────────────────────────────

unsafe fn gemm_nn_rows_fallback(
    m: usize,
    k: usize,
    n: usize,
    a: *const f32,
    b_rows: &[*const f32],
    c: *mut f32,
    ldc: usize,
) {
    // pack the virtual rows and let matrixmultiply do the arithmetic
    let mut packed = vec![0.0f32; k * n];
    for (row, &src) in packed.chunks_exact_mut(n).zip(b_rows) {
        row.copy_from_slice(std::slice::from_raw_parts(src, n));
    }
    matrixmultiply::sgemm(
        m,
        k,
        n,
        1.0,
        a,
        k as isize,
        1,
        packed.as_ptr(),
        n as isize,
        1,
        0.0,
        c,
        ldc as isize,
        1,
    );
}

unsafe fn gemm_nt_rows_acc_fallback(
    m: usize,
    n: usize,
    p: usize,
    a: *const f32,
    lda: usize,
    b_rows: &[*const f32],
    c: *mut f32,
) {
    for mi in 0..m {
        let a_row = std::slice::from_raw_parts(a.add(mi * lda), p);
        for ni in 0..n {
            let b_row = std::slice::from_raw_parts(b_rows[ni], p);
            let mut acc = 0.0f32;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c.add(mi * n + ni) += acc;
        }
    }
}

// ── AVX-512 kernels ──────────────────────────────────────────────────

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_nn_rows_avx512(
    m: usize,
    k: usize,
    n: usize,
    a: *const f32,
    b_rows: &[*const f32],
    c: *mut f32,
    ldc: usize,
) {
    const MR: usize = 8;
    const NR: usize = 48; // 3 zmm registers
    let mut j = 0;
    while j < n {
        let nb = (n - j).min(NR);
        let mask0: __mmask16 = mask16(nb);
        let mask1: __mmask16 = mask16(nb.saturating_sub(16));
        let mask2: __mmask16 = mask16(nb.saturating_sub(32));
        let mut i = 0;
        while i < m {
            let mb = (m - i).min(MR);
            let mut acc = [[_mm512_setzero_ps(); 3]; MR];
            for kk in 0..k {
                let bp = b_rows[kk].add(j);
                let b0 = _mm512_maskz_loadu_ps(mask0, bp);
                let b1 = _mm512_maskz_loadu_ps(mask1, bp.add(16));
                let b2 = _mm512_maskz_loadu_ps(mask2, bp.add(32));
                for mi in 0..mb {
                    let av = _mm512_set1_ps(*a.add((i + mi) * k + kk));
                    acc[mi][0] = _mm512_fmadd_ps(av, b0, acc[mi][0]);
                    acc[mi][1] = _mm512_fmadd_ps(av, b1, acc[mi][1]);
                    acc[mi][2] = _mm512_fmadd_ps(av, b2, acc[mi][2]);
                }
            }
            for mi in 0..mb {
                let cp = c.add((i + mi) * ldc + j);
                _mm512_mask_storeu_ps(cp, mask0, acc[mi][0]);
                _mm512_mask_storeu_ps(cp.add(16), mask1, acc[mi][1]);
                _mm512_mask_storeu_ps(cp.add(32), mask2, acc[mi][2]);
            }
            i += mb;
        }
        j += nb;
    }
}

#[cfg(target_arch = "x86_64")]
fn mask16(active: usize) -> u16 {
    if active >= 16 {
        0xffff
    } else {
        (1u16 << active) - 1
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_nt_rows_acc_avx512(
    m: usize,
    n: usize,
    p: usize,
    a: *const f32,
    lda: usize,
    b_rows: &[*const f32],
    c: *mut f32,
) {
    const MR: usize = 4;
    const NR: usize = 6;
    // block the shared axis so the A and B windows stay cache-resident
    const PB: usize = 16384;
    let mut p_lo = 0;
    while p_lo < p {
        let pb = (p - p_lo).min(PB);
        let p_vec = pb / 16 * 16;
        let tail_mask = mask16(pb - p_vec);
        let mut i = 0;
        while i < m {
            let mb = (m - i).min(MR);
            let mut j = 0;
            while j < n {
                let nb = (n - j).min(NR);
                let mut acc = [[_mm512_setzero_ps(); NR]; MR];
                let mut pp = 0;
                while pp < p_vec {
                    let mut avs = [_mm512_setzero_ps(); MR];
                    for mi in 0..mb {
                        avs[mi] = _mm512_loadu_ps(a.add((i + mi) * lda + p_lo + pp));
                    }
                    for ni in 0..nb {
                        let bv = _mm512_loadu_ps(b_rows[j + ni].add(p_lo + pp));
                        for mi in 0..mb {
                            acc[mi][ni] = _mm512_fmadd_ps(avs[mi], bv, acc[mi][ni]);
                        }
                    }
                    pp += 16;
                }
                if tail_mask != 0 {
                    let mut avs = [_mm512_setzero_ps(); MR];
                    for mi in 0..mb {
                        avs[mi] =
                            _mm512_maskz_loadu_ps(tail_mask, a.add((i + mi) * lda + p_lo + pp));
                    }
                    for ni in 0..nb {
                        let bv = _mm512_maskz_loadu_ps(tail_mask, b_rows[j + ni].add(p_lo + pp));
                        for mi in 0..mb {
                            acc[mi][ni] = _mm512_fmadd_ps(avs[mi], bv, acc[mi][ni]);
                        }
                    }
                }
                for mi in 0..mb {
                    for ni in 0..nb {
                        *c.add((i + mi) * n + j + ni) += _mm512_reduce_add_ps(acc[mi][ni]);
                    }
                }
                j += nb;
            }
            i += mb;
        }
        p_lo += pb;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn nn_rows_matches_naive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (8, 27, 48), (15, 405, 100), (7, 54, 49)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rows: Vec<*const f32> = (0..k).map(|i| b[i * n..].as_ptr()).collect();
            let mut c = vec![0.0f32; m * n];
            unsafe { gemm_nn_rows(m, k, n, a.as_ptr(), &rows, c.as_mut_ptr(), n) };
            for i in 0..m {
                for j in 0..n {
                    let want: f32 = (0..k).map(|kk| a[i * k + kk] * b[kk * n + j]).sum();
                    assert!((c[i * n + j] - want).abs() <= 1e-4, "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn nt_rows_matches_naive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for &(m, n, p) in &[(1usize, 1usize, 17usize), (4, 6, 64), (15, 30, 100), (5, 13, 33)] {
            let a: Vec<f32> = (0..m * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rows: Vec<*const f32> = (0..n).map(|i| b[i * p..].as_ptr()).collect();
            let mut c = vec![0.5f32; m * n];
            unsafe { gemm_nt_rows_acc(m, n, p, a.as_ptr(), p, &rows, c.as_mut_ptr()) };
            for i in 0..m {
                for j in 0..n {
                    let want: f32 =
                        0.5 + (0..p).map(|pp| a[i * p + pp] * b[j * p + pp]).sum::<f32>();
                    assert!((c[i * n + j] - want).abs() <= 1e-3, "({i},{j})");
                }
            }
        }
    }
}
