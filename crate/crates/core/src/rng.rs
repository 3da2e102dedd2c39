//! Seed splitting. One root seed feeds every subsystem through a dedicated
//! ChaCha stream, so adding draws in one subsystem never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids, in the documented split order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    FaceCloud = 1,
    MouthCloud = 2,
    FaceField = 3,
    MouthField = 4,
    Densify = 5,
    Synth = 6,
    Bench = 7,
    GradCheck = 8,
}

pub fn stream_rng(root_seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(stream as u64);
    rng
}
