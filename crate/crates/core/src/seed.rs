//! Seed derivation for reproducible, scheduling-independent streams.
//!
//! Every random stream in the lab is seeded from a tuple of integers
//! (master seed, scenario index, grid index, replication index, ...) mixed
//! through the splitmix64 finalizer. A cell's stream therefore depends only
//! on its coordinates, never on the order in which cells are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout the crate.
pub type LabRng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix an ordered tuple of integers into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = GOLDEN_GAMMA;
    for (i, &part) in parts.iter().enumerate() {
        state = mix64(state ^ mix64(part.wrapping_add(GOLDEN_GAMMA.wrapping_mul(i as u64 + 1))));
    }
    state
}

/// Seed of the dataset stream for one sweep cell.
pub fn cell_seed(master: u64, scenario: usize, n_index: usize, replication: u64) -> u64 {
    derive_seed(&[master, scenario as u64, n_index as u64, replication])
}

pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream of `seed` identified by `stream`.
pub fn substream(seed: u64, stream: u64) -> LabRng {
    rng_from_seed(derive_seed(&[seed, stream]))
}
