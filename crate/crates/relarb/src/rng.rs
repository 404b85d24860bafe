//! Counter-based random streams.
//!
//! Every stream is a ChaCha8 keystream addressed by `(seed, index, tag)`:
//! the seed fills the key and `(index, tag)` select the stream nonce, so any
//! path can be regenerated without touching the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tags for independent stream families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    StockNoise = 1,
    CapitalNoise = 2,
    Preferences = 3,
    InitialWealth = 4,
    Projections = 5,
    Conditional = 6,
    Deviation = 7,
    Resample = 8,
    Scenario = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed, used to separate nested experiments.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix(seed ^ splitmix(salt.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Opens the stream for `(seed, index, tag)`.
pub fn stream(seed: u64, index: u64, tag: Purpose) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (w, chunk) in key.chunks_mut(8).enumerate() {
        let word = splitmix(seed.wrapping_add(w as u64).wrapping_mul(0x2545_f491_4f6c_dd1d) ^ seed);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index.wrapping_mul(256).wrapping_add(tag as u64));
    rng
}

/// Fills `out` with independent centred normals of standard deviation `sd`.
pub fn fill_normal<R: rand::Rng>(rng: &mut R, sd: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = sd * z;
    }
}
