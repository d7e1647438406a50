//! Seeded random streams.
//!
//! Every stochastic draw in the crate comes from a ChaCha stream whose seed is
//! derived from a tuple of integers, so a draw depends only on its key and
//! never on how many other draws happened before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of words into one 64-bit seed.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Stream keyed by `(seed, purpose, words...)`.
pub fn stream(seed: u64, purpose: &str, words: &[u64]) -> Rng {
    let tag = purpose
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
    let mut all = Vec::with_capacity(words.len() + 2);
    all.push(seed);
    all.push(tag);
    all.extend_from_slice(words);
    Rng::seed_from_u64(mix(&all))
}

/// Identifies one dropout application: global seed, layer id, optimizer step
/// and the sample within the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
    pub sample: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, layer: u64, step: u64, sample: u64) -> Self {
        Self {
            seed,
            layer,
            step,
            sample,
        }
    }

    pub fn with_layer(self, layer: u64) -> Self {
        Self { layer, ..self }
    }

    pub fn rng(&self) -> Rng {
        stream(self.seed, "dropout", &[self.layer, self.step, self.sample])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_keyed() {
        let a: u64 = stream(1, "x", &[2, 3]).random();
        let b: u64 = stream(1, "x", &[2, 3]).random();
        let c: u64 = stream(1, "x", &[3, 2]).random();
        let d: u64 = stream(1, "y", &[2, 3]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
