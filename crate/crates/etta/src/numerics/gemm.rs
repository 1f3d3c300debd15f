//! Inner matrix-multiply routines shared by the public kernels.
//!
//! Every output element is accumulated in a fixed k-ascending order with
//! fused multiply-adds, so results are bit-identical for any thread count
//! and any vector width. Parallelism only splits disjoint output row blocks;
//! within a block the instruction sequence per element never changes.
//!
//! All three layout variants funnel into one stripe kernel that streams `b`
//! row-major; `gemm_nt` first materializes `b^T` into a scratch buffer (k*n
//! copies against m*k*n multiplies) so the hot loop never walks a stride.
//! Partial sums live in fixed-size stack tiles sized to a handful of SIMD
//! registers; `mul_add` lowers to hardware FMA under the `target-cpu`
//! setting in `.cargo/config.toml`.

use rayon::prelude::*;

/// Minimum MACs before a row-parallel split pays for itself.
const PAR_THRESHOLD: usize = 1 << 16;

/// Output rows sharing one pass over `b`.
const MI: usize = 4;

fn parallel_rows(total_macs: usize) -> bool {
    total_macs >= PAR_THRESHOLD && rayon::current_num_threads() > 1
}

/// One `W`-wide column stripe of `block += a_rows * b` for up to `MI` output
/// rows. `a_of` yields the `MI` multiplier scalars for step `kk`; entries
/// past `rows` are dummies and their accumulators are discarded.
#[inline(always)]
fn nn_stripe<const W: usize>(
    k: usize,
    n: usize,
    j0: usize,
    rows: usize,
    block: &mut [f32],
    a_of: impl Fn(usize) -> [f32; MI],
    b: &[f32],
) {
    let mut acc = [[0.0f32; W]; MI];
    let mut boff = j0;
    for kk in 0..k {
        let avs = a_of(kk);
        let brow = &b[boff..boff + W];
        for ti in 0..MI {
            let av = avs[ti];
            let ar = &mut acc[ti];
            for jj in 0..W {
                ar[jj] = av.mul_add(brow[jj], ar[jj]);
            }
        }
        boff += n;
    }
    for ti in 0..rows {
        let orow = &mut block[ti * n + j0..][..W];
        for jj in 0..W {
            orow[jj] += acc[ti][jj];
        }
    }
}

/// Scalar remainder columns (fewer than 16), same accumulation order.
#[inline(always)]
fn nn_stripe_scalar(
    k: usize,
    n: usize,
    j0: usize,
    rows: usize,
    block: &mut [f32],
    a_of: impl Fn(usize) -> [f32; MI],
    b: &[f32],
) {
    let jw = n - j0;
    let mut acc = [[0.0f32; 16]; MI];
    let mut boff = j0;
    for kk in 0..k {
        let avs = a_of(kk);
        let brow = &b[boff..boff + jw];
        for ti in 0..MI {
            let av = avs[ti];
            for jj in 0..jw {
                acc[ti][jj] = av.mul_add(brow[jj], acc[ti][jj]);
            }
        }
        boff += n;
    }
    for ti in 0..rows {
        let orow = &mut block[ti * n + j0..][..jw];
        for jj in 0..jw {
            orow[jj] += acc[ti][jj];
        }
    }
}

/// Shared stripe dispatch for the row-block kernels.
#[inline(always)]
fn block_body(
    k: usize,
    n: usize,
    rows: usize,
    block: &mut [f32],
    a_of: impl Fn(usize) -> [f32; MI] + Copy,
    b: &[f32],
) {
    let mut j0 = 0;
    while j0 + 16 <= n {
        nn_stripe::<16>(k, n, j0, rows, block, a_of, b);
        j0 += 16;
    }
    if j0 < n {
        nn_stripe_scalar(k, n, j0, rows, block, a_of, b);
    }
}

/// Row-major core: `out[m x n] += a[m x k] * b[k x n]`. Rows of `a` are
/// pre-sliced to length `k` so the inner gather is four contiguous loads.
fn gemm_rows(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    let body = |blk: usize, block: &mut [f32]| {
        let i0 = blk * MI;
        let rows = block.len() / n;
        let row = |ti: usize| &a[(i0 + ti.min(rows - 1)) * k..][..k];
        let arows = [row(0), row(1), row(2), row(3)];
        let a_of = |kk: usize| [arows[0][kk], arows[1][kk], arows[2][kk], arows[3][kk]];
        block_body(k, n, rows, block, a_of, b);
    };
    if parallel_rows(m * k * n) {
        out.par_chunks_mut(MI * n)
            .enumerate()
            .for_each(|(blk, block)| body(blk, block));
    } else {
        for (blk, block) in out.chunks_mut(MI * n).enumerate() {
            body(blk, block);
        }
    }
}

/// out[m x n] += a[m x k] * b[k x n]
pub fn gemm_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    gemm_rows(a, b, out, m, k, n);
}

/// out[m x n] += a[m x k] * b[n x k]^T
pub fn gemm_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    let mut bt = vec![0.0f32; k * n];
    for (j, brow) in b.chunks_exact(k).enumerate() {
        for (kk, &v) in brow.iter().enumerate() {
            bt[kk * n + j] = v;
        }
    }
    gemm_rows(a, &bt, out, m, k, n);
}

/// out[m x n] += a[k x m]^T * b[k x n]
pub fn gemm_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    let body = |blk: usize, block: &mut [f32]| {
        let i0 = blk * MI;
        let rows = block.len() / n;
        let a_of = |kk: usize| {
            let mut avs = [0.0f32; MI];
            avs[..rows].copy_from_slice(&a[kk * m + i0..][..rows]);
            avs
        };
        block_body(k, n, rows, block, a_of, b);
    };
    if parallel_rows(m * k * n) {
        out.par_chunks_mut(MI * n)
            .enumerate()
            .for_each(|(blk, block)| body(blk, block));
    } else {
        for (blk, block) in out.chunks_mut(MI * n).enumerate() {
            body(blk, block);
        }
    }
}

/// Dot product with lane-wise partial sums; the fold order is fixed by the
/// lane count, independent of input length alignment.
pub fn dot(x: &[f32], y: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), y.len());
    const LANES: usize = 16;
    let mut acc = [0.0f32; LANES];
    let chunks = x.len() / LANES;
    for c in 0..chunks {
        let xs = &x[c * LANES..(c + 1) * LANES];
        let ys = &y[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] = xs[l].mul_add(ys[l], acc[l]);
        }
    }
    for i in chunks * LANES..x.len() {
        acc[i % LANES] = x[i].mul_add(y[i], acc[i % LANES]);
    }
    // Pairwise fold keeps the reduction order fixed.
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0]
}
