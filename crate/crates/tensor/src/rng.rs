//! Seeded, platform-independent random numbers.
//!
//! The generator is ChaCha8 (RFC 7539 block function, 8 rounds) addressed by
//! a 256-bit key, a 64-bit stream id and a 128-bit word position. Its full
//! state is those three values, so it can be written to a checkpoint and
//! restored exactly. A `u64` seed is expanded into the key by placing it
//! little-endian in the first eight bytes.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Serialized size of [`RngState`] in bytes.
pub const RNG_STATE_BYTES: usize = 32 + 8 + 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn to_bytes(&self) -> [u8; RNG_STATE_BYTES] {
        let mut out = [0u8; RNG_STATE_BYTES];
        out[..32].copy_from_slice(&self.key);
        out[32..40].copy_from_slice(&self.stream.to_le_bytes());
        out[40..].copy_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; RNG_STATE_BYTES]) -> Self {
        let mut key = [0u8; 32];
        key.copy_from_slice(&bytes[..32]);
        Self {
            key,
            stream: u64::from_le_bytes(bytes[32..40].try_into().unwrap()),
            word_pos: u128::from_le_bytes(bytes[40..].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Independent generator sharing this seed's key on another stream.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = Self::new(seed);
        rng.inner.set_stream(stream);
        rng
    }

    pub fn state(&self) -> RngState {
        RngState {
            key: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.key);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer on `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f32 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        z as f32
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn state_round_trip_resumes_sequence() {
        let mut a = Rng::new(7);
        for _ in 0..13 {
            a.normal();
        }
        let state = a.state();
        let bytes = state.to_bytes();
        let mut b = Rng::from_state(&RngState::from_bytes(&bytes));
        for _ in 0..50 {
            assert_eq!(a.next_u64(), b.next_u64());
            assert_eq!(a.below(1000), b.below(1000));
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::with_stream(1, 0);
        let mut b = Rng::with_stream(1, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    // Pinned draws guard against silent generator changes across dependency
    // upgrades, which would break checkpoint resume.
    #[test]
    fn pinned_first_draws() {
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 15438444565445410878);
        assert_eq!(r.below(1000), 909);
        assert_eq!(r.normal(), 1.2630855);
    }
}
