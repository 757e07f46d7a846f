//! Seeded randomness, threaded explicitly.
//!
//! Every stochastic routine in this crate takes either a seed or a `&mut
//! Rng`; nothing reads global entropy. ChaCha8 gives identical streams on
//! every platform, so fixed seeds reproduce datasets, training runs, and
//! samples bit-for-bit.

use rand::{Rng as _, SeedableRng};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derive an independent stream seed from a base seed and a stream index
/// (splitmix64 finalizer). Used to give scenarios, epochs, and sampling
/// passes their own decorrelated seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15,)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal draw via Box–Muller; consumes exactly two uniforms.
pub fn standard_normal(rng: &mut Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform draw from `[lo, hi)`.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    debug_assert!(hi >= lo);
    lo + (hi - lo) * rng.random::<f64>()
}
