//! Counter-based deterministic random number generation.
//!
//! Every random decision in the crate (augmentation draws, dataset shuffles,
//! weight initialization, synthetic textures) flows through [`CounterRng`],
//! a 64-bit counter generator built on the SplitMix64 finalizer. A generator
//! is addressed by `(seed, stream)` and produces the word sequence
//!
//! ```text
//! out_i = mix(seed ^ mix(stream) ^ (i + 1) * GOLDEN)
//! ```
//!
//! where `mix` is the SplitMix64 avalanche function and `GOLDEN` is
//! 0x9E3779B97F4A7C15. Because the output depends only on `(seed, stream,
//! counter)`, streams can be split per image index, per epoch, or per
//! parameter without any shared state, and draws are independent of the
//! order in which streams are consumed.

/// 2^64 / golden ratio; the Weyl increment used by SplitMix64.
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based generator; see the module docs for the
/// stream-splitting rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    base: u64,
    counter: u64,
}

impl CounterRng {
    /// Root generator for a seed (stream 0).
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    /// Generator for the given `(seed, stream)` pair.
    pub fn substream(seed: u64, stream: u64) -> Self {
        CounterRng {
            base: seed ^ mix(stream),
            counter: 0,
        }
    }

    /// Derive a child stream id from labeled parts. Used to address
    /// e.g. (epoch, image index) substreams without collisions.
    pub fn stream_id(parts: &[u64]) -> u64 {
        let mut acc = 0x243F_6A88_85A3_08D3u64; // pi digits, arbitrary non-zero start
        for &p in parts {
            acc = mix(acc ^ p.wrapping_mul(GOLDEN));
        }
        acc
    }

    /// Next raw 64-bit word.
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.base ^ self.counter.wrapping_mul(GOLDEN))
    }

    /// Uniform f64 in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Rejection sampling, so exactly uniform.
    pub fn gen_range(&mut self, n: u64) -> u64 {
        assert!(n > 0, "gen_range needs n > 0");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform f64 in [lo, hi).
    pub fn gen_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Bernoulli draw with probability `p`.
    pub fn gen_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller (one value per call, no caching, so
    /// draw counts stay easy to reason about).
    pub fn gen_normal(&mut self) -> f64 {
        // Guard the log: next_f64 can return 0.
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle of a slice.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.gen_range(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
