//! Elementwise transcendental kernels.
//!
//! The attention and FFN paths evaluate `exp` and `tanh` millions of times
//! per forward pass; calling into libm serializes those loops behind scalar
//! function calls. These replacements are branch-free polynomial evaluations
//! that the compiler vectorizes, with fixed operation order, so they are as
//! deterministic as any other arithmetic here. Peak error versus libm is a
//! couple of ulps, far below every tolerance in the test contracts.

/// exp(x) for finite f32, clamped to the finite range of the result.
///
/// Cephes-style: split `x = n·ln2 + r` with `|r| ≤ ln2/2`, evaluate a
/// degree-6 polynomial for `exp(r)`, and scale by `2^n` assembled directly
/// in the exponent bits.
#[inline(always)]
pub(crate) fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    // ln2 in two pieces for an exact-enough argument reduction.
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Clamp where exp still lands in the normal f32 range and the assembled
    // exponent stays finite (n stays within [-126, 127]).
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E).round();
    let r = n.mul_add(-LN2_HI, x);
    let r = n.mul_add(-LN2_LO, r);
    // exp(r) on [-ln2/2, ln2/2], Horner.
    let p = 1.987_569_2e-4f32;
    let p = p.mul_add(r, 1.398_199_9e-3);
    let p = p.mul_add(r, 8.333_452e-3);
    let p = p.mul_add(r, 4.166_579_5e-2);
    let p = p.mul_add(r, 1.666_666_6e-1);
    let p = p.mul_add(r, 5e-1);
    let p = p.mul_add(r * r, r) + 1.0;
    // 2^n via exponent bits; n is in [-127, 127] after the clamp above.
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

/// tanh(x) through `fast_exp`, exact ±1 saturation past |x| ≥ 9 where the
/// f32 value of tanh is already ±1.
#[inline(always)]
pub(crate) fn fast_tanh(x: f32) -> f32 {
    let xc = x.clamp(-9.0, 9.0);
    let e2 = fast_exp(2.0 * xc);
    (e2 - 1.0) / (e2 + 1.0)
}

/// Sum with 16 lane-wise partial accumulators and a pairwise fold, the same
/// fixed reduction order as the dot kernel; breaks the serial add chain so
/// the loop vectorizes.
#[inline]
pub(crate) fn sum16(xs: &[f32]) -> f32 {
    const LANES: usize = 16;
    let mut acc = [0.0f32; LANES];
    let chunks = xs.len() / LANES;
    for c in 0..chunks {
        let s = &xs[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += s[l];
        }
    }
    for i in chunks * LANES..xs.len() {
        acc[i % LANES] += xs[i];
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0]
}
