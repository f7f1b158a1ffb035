//! Seeded PRNG used everywhere determinism is part of a contract
//! (splits, batch shuffles, weight init, synthetic data).
//!
//! The generator is SplitMix64: state advances by adding the constant
//! 0x9E3779B97F4A7C15 and the output is a fixed 64-bit mix of the new state.
//! It is pinned here, rather than delegated to an external crate, so that a
//! split manifest or an initialized model can be reproduced bit-for-bit by
//! any other implementation from the seed alone.

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [0, n) by modulo reduction. The modulo bias is below
    /// n / 2^64, negligible for the index ranges used here, and keeping the
    /// reduction this simple is what makes the shuffle reproducible from the
    /// written-down algorithm.
    pub fn next_below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller on two uniform draws.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by resampling.
    pub fn next_trunc_normal(&mut self, sigma: f64) -> f64 {
        loop {
            let z = self.next_normal();
            if z.abs() <= 2.0 {
                return z * sigma;
            }
        }
    }

    /// In-place Fisher-Yates shuffle: for i from len-1 down to 1, swap
    /// element i with element `next_below(i + 1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
