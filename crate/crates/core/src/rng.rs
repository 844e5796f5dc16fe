//! Seeded random source shared by every randomized construction.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`, whose output stream is value-stable across platforms.
//! Everything above the raw 64-bit stream is defined here so that results
//! are reproducible by any implementation that follows these rules:
//!
//! * `uniform_open`: `((u >> 11) + 1) * 2^-53`, in `(0, 1]`.
//! * `uniform`: `(u >> 11) * 2^-53`, in `[0, 1)`.
//! * normals come from Box–Muller on the pair `(u1 = uniform_open, u2 = uniform)`
//!   drawn in that order, yielding `r·cos(2πu2)` first and `r·sin(2πu2)` second,
//!   with `r = sqrt(-2 ln u1)`.
//! * `below(n)` uses rejection on the top of the 64-bit range (no modulo bias).

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use std::f64::consts::TAU;

const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

pub struct SeededRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * INV_2_53
    }

    #[inline]
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * INV_2_53
    }

    /// Standard normal variate (Box–Muller, cached second value).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n) - 1;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }
}
