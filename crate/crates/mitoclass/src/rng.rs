//! Portable, counter-based random streams.
//!
//! Every random decision in this crate derives from a [`Stream`]: a
//! SplitMix64 generator whose state is obtained by mixing a root seed with a
//! list of integer tags (`stream_seed`). Streams are cheap to fork, never
//! shared between work items, and use only integer arithmetic plus exact
//! float scaling, so identical seeds produce identical draws on every
//! platform. Parallel code derives one stream per work item (patch, stratum,
//! epoch, trial) and therefore produces results identical to sequential
//! execution.

/// Weyl-sequence increment of SplitMix64.
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a bijective avalanche mix of a 64-bit word.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-stream seed from a root seed and a sequence of tags.
///
/// Tag lists with different lengths or contents map to different seeds with
/// overwhelming probability; the derivation is pure integer arithmetic.
pub fn stream_seed(root: u64, tags: &[u64]) -> u64 {
    let mut h = mix64(root ^ GOLDEN_GAMMA);
    for &t in tags {
        h = mix64(h.wrapping_add(mix64(t.wrapping_mul(GOLDEN_GAMMA))));
    }
    h
}

/// FNV-1a hash of a string, used to fold identifiers (patch ids, tensor
/// names) into stream tags.
pub fn str_tag(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct Stream {
    state: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { state: seed }
    }

    /// Root seed mixed with tags; shorthand for `Stream::new(stream_seed(..))`.
    pub fn derived(root: u64, tags: &[u64]) -> Self {
        Stream::new(stream_seed(root, tags))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in [0, 1) with 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased uniform integer in [0, n) via Lemire rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let threshold = n.wrapping_neg() % n; // 2^64 mod n
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below((i + 1) as u64) as usize;
            xs.swap(i, j);
        }
    }
}
