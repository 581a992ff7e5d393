//! Deterministic pseudo-random generation.
//!
//! Every stochastic choice in this crate (split shuffles, fold shuffles,
//! parameter initialization, batch order, dropout masks) draws from
//! [`DetRng`], a splitmix64 stream seeded from a single `u64`. The generator
//! and every derived sampling rule are fully specified here so identical
//! seeds reproduce bit-identical results on any platform.

/// splitmix64 stream (Vigna's public-domain `splitmix64.c`).
///
/// State advances by the golden-ratio increment `0x9E3779B97F4A7C15`; each
/// output is the 64-bit finalizer applied to the new state.
#[derive(Debug, Clone)]
pub struct DetRng {
    state: u64,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Stream `stream` derived from `seed`. Different streams from the same
    /// seed (e.g. parameter init vs batch shuffling) stay decorrelated
    /// without sharing state.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `[0, bound)`.
    ///
    /// Defined as `next_u64() % bound`: consumes exactly one stream value,
    /// which keeps the consumption pattern (and therefore every downstream
    /// draw) platform-independent. The modulo bias is below 2^-32 for any
    /// bound this crate uses.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below() requires a positive bound");
        self.next_u64() % bound
    }

    /// Uniform `f64` in `[0, 1)` built from the top 53 bits of one draw.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform `f64` in `[lo, hi)`.
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.unit_f64() * (hi - lo)
    }

    /// Standard normal via Box-Muller; consumes exactly two stream values.
    pub fn normal(&mut self) -> f64 {
        let u = 1.0 - self.unit_f64(); // (0, 1], keeps the log finite
        let v = self.unit_f64();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }

    /// In-place Fisher-Yates shuffle: for `i = n-1 .. 1`, swap `i` with
    /// `below(i + 1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
