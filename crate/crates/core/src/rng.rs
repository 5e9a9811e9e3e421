//! Counter-based pseudo-random numbers.
//!
//! The generator is SplitMix64 run in counter mode: the `n`-th output of a
//! stream with key `k` is `fmix64(k + (n + 1) * GOLDEN_GAMMA)`, where `fmix64`
//! is Stafford's "Mix13" finalizer. Every draw is a pure function of
//! `(key, counter)`, so streams are identical across platforms and can be
//! reproduced in any language with 64-bit wrapping arithmetic.
//!
//! Seeds for derived streams (one per dataset sample, per training step, ...)
//! come from [`mix_seed`], which folds a list of 64-bit words into a key.

pub const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Identifier written into dataset manifests.
pub const ALGORITHM_ID: &str = "splitmix64-counter/mix13";

#[inline]
pub fn fmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `words` into a single 64-bit key.
///
/// `h_0 = 0x243f6a8885a308d3`, `h_{i+1} = fmix64(h_i ^ fmix64(w_i + (i + 1) * GOLDEN_GAMMA))`.
/// The position-dependent offset makes the fold order sensitive.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for (i, &w) in words.iter().enumerate() {
        let salted = w.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN_GAMMA));
        h = fmix64(h ^ fmix64(salted));
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    /// A stream positioned at `counter`.
    pub fn at(key: u64, counter: u64) -> Self {
        Self { key, counter }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// An independent stream keyed by this stream's key and `tag`.
    pub fn fork(&self, tag: u64) -> Self {
        Self::new(mix_seed(&[self.key, tag]))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        fmix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi].
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Unbiased (rejection on the low product word).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    /// Standard normal via Box-Muller; consumes two draws per call.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
