//! Seeded, independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for item `index` of the stochastic process `domain` under `seed`.
/// Streams for distinct `(domain, index)` pairs do not overlap.
pub fn substream(seed: u64, domain: u16, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}

pub const LOADING: u16 = 1;
pub const FRAMES: u16 = 2;
pub const SPCM: u16 = 3;
pub const SPECTRUM: u16 = 4;
pub const DETUNING: u16 = 5;
pub const TRAPS: u16 = 6;
