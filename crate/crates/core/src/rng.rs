//! Deterministic random number generation.
//!
//! Every stochastic component in this crate draws from [`Pcg32`] streams that
//! are *derived* from a base seed and a handful of integer coordinates
//! (purpose tag, step index, sample index, ...). Derived streams make
//! checkpoint resume trivial: nothing about the generator needs to be stored
//! beyond the integers that name the stream, and two runs with the same seed
//! replay bit-identically regardless of thread count.

/// PCG-XSH-RR 64/32 generator. Small, fast, and stable across platforms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pcg32 {
    state: u64,
    inc: u64,
}

const PCG_MULT: u64 = 6364136223846793005;

impl Pcg32 {
    /// Generator for `seed` on stream `stream`.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = Pcg32 {
            state: 0,
            inc: (stream << 1) | 1,
        };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(seed);
        rng.next_u32();
        rng
    }

    /// Generator seeded from mixed integer coordinates; see [`mix`].
    pub fn from_coords(seed: u64, coords: &[u64]) -> Self {
        let mixed = mix(seed, coords);
        Pcg32::new(mixed, mixed ^ 0xda3e_39cb_94b9_5bdb)
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(PCG_MULT).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    pub fn next_u64(&mut self) -> u64 {
        let hi = self.next_u32() as u64;
        let lo = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform in `[0, 1)` with 32 bits of precision.
    pub fn uniform_f32(&mut self) -> f32 {
        // 24-bit mantissa keeps the result exactly representable.
        (self.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in `[lo, hi)`. Degenerate ranges return `lo`. Always consumes
    /// exactly one draw so the stream position depends only on the call
    /// sequence, never on parameter values.
    pub fn range_f32(&mut self, lo: f32, hi: f32) -> f32 {
        let u = self.uniform_f32();
        if hi <= lo {
            lo
        } else {
            lo + (hi - lo) * u
        }
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.uniform_f64();
        if hi <= lo {
            lo
        } else {
            lo + (hi - lo) * u
        }
    }

    /// Uniform integer in `[0, bound)` via widening multiply (unbiased enough
    /// for sampling; bound is tiny relative to 2^32 everywhere we use it).
    /// Consumes exactly one draw regardless of `bound`.
    pub fn below(&mut self, bound: usize) -> usize {
        let r = self.next_u32();
        if bound <= 1 {
            0
        } else {
            ((r as u64 * bound as u64) >> 32) as usize
        }
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn range_usize(&mut self, lo: usize, hi: usize) -> usize {
        if hi <= lo {
            return lo;
        }
        lo + self.below(hi - lo)
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call; no spare
    /// is cached so the stream position stays a pure function of call count.
    pub fn normal_f32(&mut self) -> f32 {
        let u1 = self.uniform_f64().max(1e-12);
        let u2 = self.uniform_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

/// SplitMix64-style mixing of a seed and integer coordinates into one u64.
///
/// Distinct coordinate tuples map to (practically) distinct seeds, which is
/// what lets samplers, augmenters, and epoch shuffles own independent streams
/// without sharing mutable state.
pub fn mix(seed: u64, coords: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &c in coords {
        h ^= splitmix64(c.wrapping_add(0x9e37_79b9_7f4a_7c15));
        h = splitmix64(h);
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags so call sites never collide by accident.
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const ANCHOR: u64 = 2;
    pub const CROPS: u64 = 3;
    pub const PARTS: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const INIT: u64 = 6;
    pub const EPOCH: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const TRANSFER: u64 = 9;
}
