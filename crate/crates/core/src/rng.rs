//! Small deterministic generator for sampled subspace selection.
//!
//! splitmix64 is fixed for good: identical seeds give identical draws on
//! every platform and in every release, which the reproducibility contract
//! relies on.

/// splitmix64 sequence generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in `0..bound` (modulo reduction; bias is irrelevant at
    /// the bounds used here).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        self.next_u64() % bound
    }

    /// Uniform f64 in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// One-shot scramble of a value through the splitmix64 output function.
pub fn scramble(value: u64) -> u64 {
    SplitMix64::new(value).next_u64()
}

/// Per-input, per-iteration seed so sampled subspaces are independent of
/// scheduling and of the other inputs in the batch.
pub fn seed_for(base_seed: u64, input_index: usize, t: usize) -> u64 {
    scramble(base_seed ^ scramble(input_index as u64 + 1) ^ scramble((t as u64) << 32 | 0x5eed))
}
