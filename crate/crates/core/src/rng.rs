//! Seed derivation. Every random quantity is drawn from a ChaCha8 stream
//! keyed by `(master seed, purpose, index)`, so results never depend on
//! which thread handled which item.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for. Distinct purposes never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Covariate,
    Path,
    PathAlternate,
    Init,
    Replicate,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Covariate => 0x636f_7661,
            Purpose::Path => 0x7061_7468,
            Purpose::PathAlternate => 0x616c_7470,
            Purpose::Init => 0x696e_6974,
            Purpose::Replicate => 0x7265_706c,
        }
    }
}

pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let key = seed ^ purpose.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Derives a child master seed, e.g. one per study replicate.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    use rand::RngCore;
    substream(seed, purpose, index).next_u64()
}
