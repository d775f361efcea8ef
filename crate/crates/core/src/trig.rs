//! Inlinable sin/cos pair for the render inner loop.
//!
//! `f64::sin_cos` goes through libm calls that cannot inline or vectorize,
//! and the render spends nearly all of its time there. This is the classic
//! fdlibm kernel: Cody-Waite reduction modulo pi/2 (exact while the
//! quotient fits in 20 bits, far beyond any path length here) plus minimax
//! polynomials on [-pi/4, pi/4]. Absolute error is below 1e-13 against the
//! standard library over the full phase range in use; speckle phases are
//! uniform modulo 2*pi, so this is far under anything observable.

// Coefficients keep fdlibm's printed precision.
#![allow(clippy::excessive_precision)]

const TWO_OVER_PI: f64 = std::f64::consts::FRAC_2_PI;
// pi/2 split so that n * PIO2_1 is exact for |n| < 2^20.
const PIO2_1: f64 = 1.570_796_326_734_125_6;
const PIO2_1T: f64 = 6.077_100_506_506_192e-11;

const S1: f64 = -1.666_666_666_666_663_2e-1;
const S2: f64 = 8.333_333_333_322_489e-3;
const S3: f64 = -1.984_126_982_985_795e-4;
const S4: f64 = 2.755_731_370_707_007e-6;
const S5: f64 = -2.505_076_025_340_686_4e-8;
const S6: f64 = 1.589_690_995_211_550_1e-10;

const C1: f64 = 4.166_666_666_666_660_2e-2;
const C2: f64 = -1.388_888_888_887_411e-3;
const C3: f64 = 2.480_158_728_947_673e-5;
const C4: f64 = -2.755_731_435_139_066_4e-7;
const C5: f64 = 2.087_572_321_298_175e-9;
const C6: f64 = -1.135_964_755_778_819_5e-11;

#[inline]
fn poly_sin(r: f64, z: f64) -> f64 {
    let p = S6.mul_add(z, S5);
    let p = p.mul_add(z, S4);
    let p = p.mul_add(z, S3);
    let p = p.mul_add(z, S2);
    let p = p.mul_add(z, S1);
    (r * z).mul_add(p, r)
}

#[inline]
fn poly_cos(z: f64) -> f64 {
    let p = C6.mul_add(z, C5);
    let p = p.mul_add(z, C4);
    let p = p.mul_add(z, C3);
    let p = p.mul_add(z, C2);
    let p = p.mul_add(z, C1);
    (z * z).mul_add(p, z.mul_add(-0.5, 1.0))
}

/// Reduction stays well below 1e-9 absolute error out to here; speckle
/// phases (k times a path length) top out around 2.5e6.
const REDUCTION_LIMIT: f64 = 1e8;

/// Branch-free core; quadrant handled entirely in f64 so the lane loop in
/// `sincos8` can vectorize.
#[inline]
fn sincos_core(x: f64) -> (f64, f64) {
    let n = (x * TWO_OVER_PI).round_ties_even();
    let r = (x - n * PIO2_1) - n * PIO2_1T;
    let z = r * r;
    let s0 = poly_sin(r, z);
    let c0 = poly_cos(z);
    let m = n - 4.0 * (n * 0.25).floor(); // quadrant: 0, 1, 2, 3 exactly
    let swap = m == 1.0 || m == 3.0;
    let s1 = if swap { c0 } else { s0 };
    let c1 = if swap { s0 } else { c0 };
    let s = if m >= 2.0 { -s1 } else { s1 };
    let c = if m == 1.0 || m == 2.0 { -c1 } else { c1 };
    (s, c)
}

/// Returns (sin x, cos x). Falls back to the standard library outside the
/// range where the two-term reduction holds.
#[inline]
pub fn sincos(x: f64) -> (f64, f64) {
    if !(x.abs() < REDUCTION_LIMIT) {
        return x.sin_cos();
    }
    sincos_core(x)
}

/// Eight independent lanes, for callers whose hot loop is 8-wide. Inputs
/// must already be within the reduction range (debug-asserted). Production
/// code goes through `accumulate_phasors8`; this stays as the reference the
/// lane-agreement test checks against.
#[cfg(test)]
#[inline]
pub fn sincos8(xs: &[f64; 8]) -> ([f64; 8], [f64; 8]) {
    let mut s = [0.0f64; 8];
    let mut c = [0.0f64; 8];
    for l in 0..8 {
        debug_assert!(xs[l].abs() < REDUCTION_LIMIT);
        let (sl, cl) = sincos_core(xs[l]);
        s[l] = sl;
        c[l] = cl;
    }
    (s, c)
}

/// Phasor accumulation for one 8-lane chunk: per lane, sincos(phase) scaled
/// by amp, added into (er, ei). Split out so the whole body is one
/// vectorizable loop.
#[inline]
pub fn accumulate_phasors8(
    phase: &[f64; 8],
    amp: &[f64; 8],
    er: &mut [f64; 8],
    ei: &mut [f64; 8],
) {
    for l in 0..8 {
        debug_assert!(phase[l].abs() < REDUCTION_LIMIT);
        let (s, c) = sincos_core(phase[l]);
        er[l] += amp[l] * c;
        ei[l] += amp[l] * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn matches_std_over_phase_range() {
        let mut rng = crate::rng::rng_for(42, "trig", 0);
        let mut worst = 0.0f64;
        for _ in 0..200_000 {
            let x: f64 = rng.gen::<f64>() * 3e6;
            let (s, c) = sincos(x);
            worst = worst.max((s - x.sin()).abs()).max((c - x.cos()).abs());
        }
        assert!(worst < 1e-9, "worst deviation {worst:.3e}");
    }

    #[test]
    fn lanes_agree_with_scalar() {
        let mut rng = crate::rng::rng_for(44, "trig", 2);
        for _ in 0..5_000 {
            let mut xs = [0.0f64; 8];
            for x in &mut xs {
                *x = rng.gen::<f64>() * 2.5e6;
            }
            let (s8, c8) = sincos8(&xs);
            for l in 0..8 {
                let (s, c) = sincos(xs[l]);
                assert_eq!(s.to_bits(), s8[l].to_bits());
                assert_eq!(c.to_bits(), c8[l].to_bits());
            }
        }
    }

    #[test]
    fn quadrant_boundaries_and_signs() {
        for i in 0..4000 {
            let x = i as f64 * std::f64::consts::FRAC_PI_2 / 4.0;
            let (s, c) = sincos(x);
            assert!((s - x.sin()).abs() < 1e-12, "sin at {x}");
            assert!((c - x.cos()).abs() < 1e-12, "cos at {x}");
        }
        for &x in &[0.0, -1.0, -1e5, 1e7, 3e9] {
            let (s, c) = sincos(x);
            assert!((s - x.sin()).abs() < 1e-9);
            assert!((c - x.cos()).abs() < 1e-9);
        }
    }

    #[test]
    fn pythagorean_identity_holds() {
        let mut rng = crate::rng::rng_for(43, "trig", 1);
        for _ in 0..10_000 {
            let x: f64 = rng.gen::<f64>() * 1e6;
            let (s, c) = sincos(x);
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }
}
