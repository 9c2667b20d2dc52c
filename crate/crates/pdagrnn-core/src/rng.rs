//! Seeded random streams. Every source of randomness draws from its own
//! ChaCha stream so that, for a fixed seed, changing one consumer (say, the
//! dropout schedule) never perturbs another (say, weight init).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_SHUFFLE: u64 = 1;
pub(crate) const STREAM_DROPOUT: u64 = 2;
pub(crate) const STREAM_SPLIT: u64 = 3;
pub(crate) const STREAM_SYNTH_SIGNATURES: u64 = 4;
pub(crate) const STREAM_SYNTH_TILES: u64 = 5;
pub(crate) const STREAM_SYNTH_NOISE: u64 = 6;
pub(crate) const STREAM_GRADCHECK: u64 = 7;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
