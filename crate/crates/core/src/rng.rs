//! Deterministic sampling helpers shared by the generators and the
//! simulation engine.

use rand_core::RngCore;

use crate::gaussian::norm_inv_cdf;

/// Uniform draw from 0..n, rejection-sampled so every index is equally
/// likely.
pub fn uniform_index<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> usize {
    assert!(n > 0, "empty range");
    let n64 = n as u64;
    let zone = u64::MAX - u64::MAX % n64;
    loop {
        let x = rng.next_u64();
        if x < zone {
            return (x % n64) as usize;
        }
    }
}

/// Uniform in the open interval (0, 1): the 53-bit mantissa is placed at
/// cell centers so 0 and 1 are unreachable and the inverse normal CDF stays
/// finite.
pub fn standard_uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

/// Standard normal via the inverse CDF.
pub fn standard_normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    norm_inv_cdf(standard_uniform(rng)).expect("uniform draw is interior")
}
