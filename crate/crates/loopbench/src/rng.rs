//! Reproducible keyed random streams.
//!
//! Every stochastic decision in a run draws from a stream keyed by
//! `(master_seed, node_id, round_index)`. The key is written injectively into
//! a ChaCha8 seed block, so distinct keys give independent counter-based
//! streams and the simulation is bit-reproducible regardless of the order in
//! which node evaluations are scheduled.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Domain tag occupying the last 8 bytes of every seed block.
const STREAM_TAG: &[u8; 8] = b"loopbnch";

/// A deterministic stream of uniform draws.
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    /// Stream keyed by a bare 64-bit seed (used for initial colorings).
    pub fn from_seed(seed: u64) -> Self {
        Self::from_key(seed, u64::MAX, u64::MAX)
    }

    fn from_key(a: u64, b: u64, c: u64) -> Self {
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&a.to_le_bytes());
        seed[8..16].copy_from_slice(&b.to_le_bytes());
        seed[16..24].copy_from_slice(&c.to_le_bytes());
        seed[24..32].copy_from_slice(STREAM_TAG);
        Self {
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[0, n)`. Always consumes exactly one `u64`.
    ///
    /// Modulo bias is below `n / 2^64`, immaterial for palette-sized `n`.
    pub fn pick(&mut self, n: usize) -> usize {
        assert!(n > 0, "pick from empty range");
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform choice from a non-empty slice.
    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.pick(items.len())]
    }
}

/// Derives the decision stream for one node in one round.
///
/// Changing any key component changes the stream; streams for distinct keys
/// are statistically independent.
pub fn derive_stream(master_seed: u64, node_id: usize, round_index: u32) -> RandomStream {
    RandomStream::from_key(master_seed, node_id as u64, round_index as u64)
}

/// Splitmix64 finalizer, used to fold seed components into sub-seeds
/// (repeat seeds, init resampling attempts).
pub fn mix64(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p;
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
