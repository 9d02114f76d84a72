//! Deterministic seed derivation and the random primitives used everywhere else.
//!
//! A single master seed fans out into independent lanes (schedule, per-client
//! init, data generation, minibatch order, ...) so that changing how one lane
//! consumes randomness never perturbs the others. The derivation is fixed and
//! documented here:
//!
//! ```text
//! lane = splitmix64( splitmix64( master XOR fnv1a64(domain) ) XOR index )
//! ```
//!
//! where `domain` is an ASCII tag such as `"schedule"` and `index` is a
//! counter (round number, client id, retry count, ...). The lane value seeds a
//! ChaCha8 stream via `seed_from_u64`.
//!
//! All non-uniform draws are built from raw `u64`s with the elementary
//! algorithms below (Box-Muller normals, exponential-sum + Johnk gamma), so
//! the exact sequence is reproducible from this file alone.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash (offset 14695981039346656037, prime 1099511628211).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed for one lane of randomness.
pub fn lane_seed(master: u64, domain: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a64(domain.as_bytes())) ^ index)
}

/// ChaCha8-backed random source with the project's documented draw recipes.
#[derive(Clone, Debug)]
pub struct SeededRng {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Rng for `(master, domain, index)` per the lane derivation above.
    pub fn for_lane(master: u64, domain: &str, index: u64) -> Self {
        Self::new(lane_seed(master, domain, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in the open interval (0, 1): `((x >> 11) + 0.5) * 2^-53`.
    /// Never returns 0 or 1, so `ln` is always finite.
    pub fn uniform01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Standard normal via Box-Muller; the second value of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform01();
        let u2 = self.uniform01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Unit exponential: `-ln U`.
    pub fn exponential(&mut self) -> f64 {
        -self.uniform01().ln()
    }

    /// Gamma(alpha, 1) for alpha > 0, decomposed as floor(alpha) unit
    /// exponentials plus a Johnk draw for the fractional part:
    /// repeat x = U1^(1/f), y = U2^(1/(1-f)) until x + y <= 1, then the
    /// fractional contribution is (x / (x + y)) * Exp(1).
    pub fn gamma(&mut self, alpha: f64) -> f64 {
        assert!(alpha > 0.0, "gamma shape must be positive");
        let k = alpha.floor() as u64;
        let f = alpha - k as f64;
        let mut g = 0.0;
        for _ in 0..k {
            g += self.exponential();
        }
        if f > 0.0 {
            loop {
                let x = self.uniform01().powf(1.0 / f);
                let y = self.uniform01().powf(1.0 / (1.0 - f));
                if x + y <= 1.0 {
                    g += x / (x + y) * self.exponential();
                    break;
                }
            }
        }
        g
    }

    /// Symmetric Dirichlet(alpha) draw of dimension `n` (normalized gammas).
    pub fn dirichlet(&mut self, alpha: f64, n: usize) -> Vec<f64> {
        let mut draws: Vec<f64> = (0..n).map(|_| self.gamma(alpha)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 {
            for d in &mut draws {
                *d /= sum;
            }
        } else {
            // All draws underflowed to zero; fall back to uniform weights.
            draws.iter_mut().for_each(|d| *d = 1.0 / n as f64);
        }
        draws
    }

    /// Uniform index in [0, n) via rejection sampling on the top range of u64,
    /// so the result is exactly uniform.
    pub fn gen_index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return (r % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle (descending index order).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.gen_index(i + 1);
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
