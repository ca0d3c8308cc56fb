//! Reproducible random streams.
//!
//! Every random draw in a simulation comes from a ChaCha8 stream whose
//! 256-bit seed is derived from `(master seed, combination id, frame index,
//! role)` with a SplitMix64 mixing chain. Streams never depend on the worker
//! that happens to consume them, so results are invariant to scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct roles of the same frame are
/// statistically independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Role {
    Data = 1,
    Phase = 2,
    Noise = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master: u64,
    pub combination: u64,
    pub frame: u64,
    pub role: Role,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(master: u64, combination: u64, frame: u64, role: Role) -> Self {
        Self {
            master,
            combination,
            frame,
            role,
        }
    }

    pub fn seed(&self) -> [u8; 32] {
        let mut state = self.master;
        for word in [self.combination, self.frame, self.role as u64] {
            state = splitmix64(&mut state) ^ word;
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        seed
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.seed())
    }
}
