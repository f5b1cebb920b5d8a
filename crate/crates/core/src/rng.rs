//! Seeded randomness. One master seed is split into named streams so the
//! pipeline stages (data, init, training, eval) are independently
//! reproducible; all draws go through ChaCha for bit-stable replay.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type Prng = ChaCha12Rng;

/// Derive a deterministic child stream from the master seed and a label.
pub fn stream(master: u64, label: &str) -> Prng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Uniform draw on the open interval (0, 1].
pub fn uniform_open(rng: &mut Prng) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Uniform draw on the open interval (0, 1); both endpoints excluded so the
/// double-log transform stays finite.
pub fn uniform_unit_open(rng: &mut Prng) -> f64 {
    loop {
        let v = rng.gen::<f64>();
        if v > 0.0 {
            return v;
        }
    }
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut Prng) -> f64 {
    let u1 = uniform_open(rng);
    let u2 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn normal_vec(rng: &mut Prng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Uniform on [lo, hi).
pub fn uniform_in(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}
