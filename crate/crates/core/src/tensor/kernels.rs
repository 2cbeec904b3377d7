//! Dense matmul kernels shared by the forward and backward passes.
//!
//! Every kernel accumulates into its output (`c += a · b`) with a fixed
//! per-element summation order, so results are bit-identical whether the row
//! range is processed sequentially or split across rayon workers.

use crate::scalar::Scalar;

/// Register tile: two rows of A against six vector registers of C columns
/// (96 f32 lanes or 48 f64 lanes); twelve live accumulators keeps the FMA
/// pipeline full without spilling.
const TILE_I: usize = 2;

/// Work size (m*k*n) above which the parallel feature splits rows. Sweeps
/// parallelize across whole runs, so only very large single multiplies are
/// worth the fork-join overhead and the added cache traffic.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 26;

/// `c[m,n] += a[m,k] · b[k,n]`, all row-major.
pub fn matmul_nn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    dispatch_rows(c, m, k * n, |c_rows, i0, rows| {
        kernel_dispatch(c_rows, a, i0, k, 1, b, rows, k, n);
    });
}

/// `c[p,n] += aᵀ · b` where `a` is `[m,p]` and `b` is `[m,n]`.
///
/// Materializing the transpose keeps the kernel's summation loads
/// contiguous; the strided variant is load-latency-bound.
pub fn matmul_tn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, p: usize, n: usize) {
    assert_eq!(a.len(), m * p);
    assert_eq!(b.len(), m * n);
    assert_eq!(c.len(), p * n);
    let at = transpose(a, m, p);
    dispatch_rows(c, p, m * n, |c_rows, p0, rows| {
        kernel_dispatch(c_rows, &at, p0, m, 1, b, rows, m, n);
    });
}

/// Picks tile widths matching the element width: a six-register main tile
/// and a one-register tile for the column remainder, so only sub-register
/// tails fall back to scalar.
fn kernel_dispatch<T: Scalar>(
    c_rows: &mut [T],
    a: &[T],
    i0: usize,
    ars: usize,
    aks: usize,
    b: &[T],
    rows: usize,
    k: usize,
    n: usize,
) {
    if T::LANES >= 16 {
        kernel_strided::<T, 96, 16>(c_rows, a, i0, ars, aks, b, rows, k, n);
    } else {
        kernel_strided::<T, 48, 8>(c_rows, a, i0, ars, aks, b, rows, k, n);
    }
}

/// `c[m,n] += a[m,k] · bᵀ` where `b` is `[n,k]`.
///
/// The transpose is materialized once; the weight and attention matrices this
/// is used for are small next to the multiply itself.
pub fn matmul_nt<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    matmul_nn(c, a, &bt, m, k, n);
}

/// Row-major transpose of an `[rows, cols]` matrix.
pub fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    assert_eq!(src.len(), rows * cols);
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Splits the output rows of `c` across the rayon pool when the work is large
/// enough; the sequential path is the fallback and the small-size path.
fn dispatch_rows<T, F>(c: &mut [T], out_rows: usize, work_per_row: usize, run: F)
where
    T: Scalar,
    F: Fn(&mut [T], usize, usize) + Sync,
{
    if c.is_empty() || out_rows == 0 {
        return;
    }
    let row_len = c.len() / out_rows;
    #[cfg(feature = "parallel")]
    {
        let threads = rayon::current_num_threads();
        if threads > 1 && out_rows * work_per_row >= PAR_THRESHOLD && out_rows >= 2 * TILE_I {
            use rayon::prelude::*;
            let chunk_rows = out_rows.div_ceil(threads).max(TILE_I);
            c.par_chunks_mut(chunk_rows * row_len)
                .enumerate()
                .for_each(|(idx, chunk)| {
                    let i0 = idx * chunk_rows;
                    run(chunk, i0, chunk.len() / row_len);
                });
            return;
        }
    }
    let _ = (work_per_row, row_len);
    run(c, 0, out_rows);
}

/// Core tile kernel: `c_rows[r, j] += Σ_kk a[(i0+r)·ars + kk·aks] · b[kk, j]`
/// for `rows` output rows starting at logical row `i0`.
///
/// With `(ars, aks) = (k, 1)` this is plain `A·B`; with `(1, p)` it reads `A`
/// transposed. Accumulators live in fixed-size arrays so the inner loops
/// vectorize without any floating-point reassociation.
fn kernel_strided<T: Scalar, const TJ: usize, const TJ2: usize>(
    c_rows: &mut [T],
    a: &[T],
    i0: usize,
    ars: usize,
    aks: usize,
    b: &[T],
    rows: usize,
    k: usize,
    n: usize,
) {
    if rows == 0 || n == 0 {
        return;
    }
    // Every unchecked access below stays inside these bounds.
    assert!(c_rows.len() >= rows * n);
    assert!(b.len() >= k * n);
    assert!(k == 0 || a.len() > (i0 + rows - 1) * ars + (k - 1) * aks);

    let n_main = n - n % TJ;
    let n_mid = n_main + (n - n_main) - (n - n_main) % TJ2;
    let mut i = 0;
    while i + TILE_I <= rows {
        let mut j = 0;
        while j < n_main {
            unsafe { tile_2::<T, TJ>(c_rows, a, i0, ars, aks, b, i, j, k, n) };
            j += TJ;
        }
        while j < n_mid {
            unsafe { tile_2::<T, TJ2>(c_rows, a, i0, ars, aks, b, i, j, k, n) };
            j += TJ2;
        }
        for r in 0..TILE_I {
            tail_cols(c_rows, a, i0, ars, aks, b, i + r, k, n, n_mid);
        }
        i += TILE_I;
    }
    while i < rows {
        let mut j = 0;
        while j < n_main {
            unsafe { tile_1::<T, TJ>(c_rows, a, i0, ars, aks, b, i, j, k, n) };
            j += TJ;
        }
        while j < n_mid {
            unsafe { tile_1::<T, TJ2>(c_rows, a, i0, ars, aks, b, i, j, k, n) };
            j += TJ2;
        }
        tail_cols(c_rows, a, i0, ars, aks, b, i, k, n, n_mid);
        i += 1;
    }
}

/// Two output rows by TJ columns.
///
/// Safety: caller guarantees `i + 2 <= rows`, `j + TJ <= n`, and the slice
/// bounds asserted in `kernel_strided`.
#[inline(always)]
unsafe fn tile_2<T: Scalar, const TJ: usize>(
    c_rows: &mut [T],
    a: &[T],
    i0: usize,
    ars: usize,
    aks: usize,
    b: &[T],
    i: usize,
    j: usize,
    k: usize,
    n: usize,
) {
    let mut acc0 = [T::ZERO; TJ];
    let mut acc1 = [T::ZERO; TJ];
    for kk in 0..k {
        let bp = b.as_ptr().add(kk * n + j);
        let a0 = *a.get_unchecked((i0 + i) * ars + kk * aks);
        let a1 = *a.get_unchecked((i0 + i + 1) * ars + kk * aks);
        for l in 0..TJ {
            let bv = *bp.add(l);
            acc0[l] = bv.mul_add(a0, acc0[l]);
            acc1[l] = bv.mul_add(a1, acc1[l]);
        }
    }
    let c0 = c_rows.as_mut_ptr().add(i * n + j);
    let c1 = c_rows.as_mut_ptr().add((i + 1) * n + j);
    for l in 0..TJ {
        *c0.add(l) += acc0[l];
        *c1.add(l) += acc1[l];
    }
}

/// One output row by TJ columns. Safety requirements as in `tile_2`.
#[inline(always)]
unsafe fn tile_1<T: Scalar, const TJ: usize>(
    c_rows: &mut [T],
    a: &[T],
    i0: usize,
    ars: usize,
    aks: usize,
    b: &[T],
    i: usize,
    j: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [T::ZERO; TJ];
    for kk in 0..k {
        let bp = b.as_ptr().add(kk * n + j);
        let av = *a.get_unchecked((i0 + i) * ars + kk * aks);
        for l in 0..TJ {
            acc[l] = (*bp.add(l)).mul_add(av, acc[l]);
        }
    }
    let cp = c_rows.as_mut_ptr().add(i * n + j);
    for l in 0..TJ {
        *cp.add(l) += acc[l];
    }
}

/// Columns `j0..n` of one output row, handled scalar.
fn tail_cols<T: Scalar>(
    c_rows: &mut [T],
    a: &[T],
    i0: usize,
    ars: usize,
    aks: usize,
    b: &[T],
    i: usize,
    k: usize,
    n: usize,
    j0: usize,
) {
    for j in j0..n {
        let mut acc = T::ZERO;
        for kk in 0..k {
            acc = a[(i0 + i) * ars + kk * aks].mul_add(b[kk * n + j], acc);
        }
        c_rows[i * n + j] += acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    fn fill(len: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..len)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn nn_matches_reference_over_odd_shapes() {
        for &(m, k, n) in &[
            (1, 1, 1),
            (3, 5, 7),
            (4, 32, 64),
            (5, 33, 65),
            (17, 9, 31),
            (2, 8, 128),
            (7, 16, 67),
        ] {
            let a = fill(m * k, 1);
            let b = fill(k * n, 2);
            let mut c = vec![0.0; m * n];
            matmul_nn(&mut c, &a, &b, m, k, n);
            let want = reference_nn(&a, &b, m, k, n);
            for (got, want) in c.iter().zip(&want) {
                assert!((got - want).abs() < 1e-12, "{got} vs {want} at {m}x{k}x{n}");
            }
        }
    }

    #[test]
    fn tn_matches_transposed_reference() {
        let (m, p, n) = (9, 6, 35);
        let a = fill(m * p, 3);
        let b = fill(m * n, 4);
        let mut c = vec![0.0; p * n];
        matmul_tn(&mut c, &a, &b, m, p, n);
        let at = transpose(&a, m, p);
        let want = reference_nn(&at, &b, p, m, n);
        for (got, want) in c.iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn nt_matches_reference() {
        let (m, k, n) = (7, 12, 5);
        let a = fill(m * k, 5);
        let b = fill(n * k, 6);
        let mut c = vec![0.0; m * n];
        matmul_nt(&mut c, &a, &b, m, k, n);
        let bt = transpose(&b, n, k);
        let want = reference_nn(&a, &bt, m, k, n);
        for (got, want) in c.iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulates_into_existing_output() {
        let (m, k, n) = (3, 4, 5);
        let a = fill(m * k, 9);
        let b = fill(k * n, 10);
        let mut c = vec![1.0; m * n];
        matmul_nn(&mut c, &a, &b, m, k, n);
        let want = reference_nn(&a, &b, m, k, n);
        for (got, want) in c.iter().zip(&want) {
            assert!((got - (want + 1.0)).abs() < 1e-12);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_split_is_bit_identical() {
        let (m, k, n) = (96, 96, 96);
        let a = fill(m * k, 7);
        let b = fill(k * n, 8);
        let mut seq = vec![0.0; m * n];
        kernel_dispatch(&mut seq, &a, 0, k, 1, &b, m, k, n);
        let mut par = vec![0.0; m * n];
        matmul_nn(&mut par, &a, &b, m, k, n);
        assert_eq!(seq, par);
    }
}
