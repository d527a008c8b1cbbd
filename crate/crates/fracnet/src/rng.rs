//! Seeded deterministic random numbers.
//!
//! Everything that shuffles, initializes, or masks in this crate draws from
//! this one generator so that a fixed seed reproduces manifests, parameters,
//! logs, and checkpoints bit-for-bit. SplitMix64 is small, well studied, and
//! has an exactly specified integer recurrence.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) via the widening-multiply reduction.
    pub fn next_below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Uniform in [-bound, bound).
    pub fn next_symmetric(&mut self, bound: f64) -> f64 {
        (self.next_f64() * 2.0 - 1.0) * bound
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Derives an independent stream from a base seed and a list of salts.
/// Used to give each (epoch, batch) or each parameter its own stream without
/// correlated low bits.
pub fn derive_seed(seed: u64, salts: &[u64]) -> u64 {
    let mut acc = mix64(seed ^ GOLDEN_GAMMA);
    for &s in salts {
        acc = mix64(acc ^ s.wrapping_mul(GOLDEN_GAMMA));
    }
    acc
}
