//! Keyed random streams.
//!
//! Every random quantity in a run is drawn from a ChaCha stream selected by
//! `(seed, purpose, k, index)`. Two code paths that need the same draw (for
//! example the noisy forecast of sample `j` in the plain and the localized
//! filter) open the same stream instead of sharing mutable state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Truth = 1,
    ObservationNoise = 2,
    ForecastNoise = 3,
    Chain = 4,
    EnsembleForecast = 5,
    ObservationPerturbation = 6,
    Initial = 7,
    Prior = 8,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Factory for the streams of one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream for `(purpose, k, index)`.
    pub fn stream(&self, purpose: Purpose, k: usize, index: usize) -> StreamRng {
        let base = splitmix64(self.seed ^ splitmix64(purpose as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        // k and index each get 32 bits of the 64-bit stream id.
        rng.set_stream(((k as u64 & 0xFFFF_FFFF) << 32) | (index as u64 & 0xFFFF_FFFF));
        rng
    }
}
