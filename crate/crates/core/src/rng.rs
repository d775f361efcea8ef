//! Seed derivation and seeded sampling helpers.
//!
//! Reproducibility contract: every stochastic choice in the crate flows from
//! a master `u64` seed through [`derive_seed`] into a `ChaCha8Rng`. The
//! derivation is pure integer arithmetic (splitmix64 over the domain string
//! and index), so derived streams are identical on every platform and are
//! stable against changes elsewhere in the sample enumeration.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; the standard 64-bit avalanche mix.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from `master` for a named stream.
///
/// Distinct `(domain, index)` pairs give statistically independent streams;
/// the same triple always gives the same seed.
pub fn derive_seed(master: u64, domain: &str, index: u64) -> u64 {
    let mut h = master ^ 0x517C_C1B7_2722_0A95;
    for &b in domain.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index)
}

/// ChaCha8 stream for a derived seed. ChaCha is endian- and platform-stable.
pub fn rng_for(master: u64, domain: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, index))
}

/// One standard normal draw via Box-Muller (two uniform draws consumed).
///
/// Hand-rolled rather than pulled from a distributions crate so that sample
/// files regenerated from recorded seeds stay byte-identical regardless of
/// upstream algorithm changes.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // 1 - u keeps the argument of ln strictly positive.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_deterministic_and_domain_separated() {
        assert_eq!(derive_seed(7, "noise", 3), derive_seed(7, "noise", 3));
        assert_ne!(derive_seed(7, "noise", 3), derive_seed(7, "noise", 4));
        assert_ne!(derive_seed(7, "noise", 3), derive_seed(7, "stim", 3));
        assert_ne!(derive_seed(7, "noise", 3), derive_seed(8, "noise", 3));
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = rng_for(1, "test-normal", 0);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = standard_normal(&mut rng);
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
