//! Counter-based random streams.
//!
//! Every consumer of randomness (a path, a particle, a coefficient draw) gets
//! its own ChaCha8 stream addressed by `(seed, stream id)`. Results therefore
//! depend only on the seed and the index, never on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Opens stream `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a label, e.g. `"market"`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    label.bytes().fold(splitmix(master), |acc, b| splitmix(acc ^ u64::from(b)))
}

/// Seeds used by one run: systemic path, coefficient draws, particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SeedSet {
    pub market: u64,
    pub coeffs: u64,
    pub particles: u64,
}

impl SeedSet {
    pub fn from_master(master: u64) -> Self {
        Self {
            market: derive_seed(master, "market"),
            coeffs: derive_seed(master, "coeffs"),
            particles: derive_seed(master, "particles"),
        }
    }
}
