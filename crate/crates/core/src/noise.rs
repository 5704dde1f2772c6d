//! Counter-based Gaussian increments.
//!
//! Each trajectory owns a ChaCha8 stream keyed by `(seed, trajectory)`; step
//! `k` always starts at word `k · words_per_step`, so any increment can be
//! regenerated from `(seed, trajectory, step)` alone, independent of how the
//! trajectories are scheduled across workers.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brownian increments `ΔB_k ~ N(0, Δt·I_m)` for one trajectory.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    dim: usize,
    sqrt_dt: f64,
}

impl NoiseStream {
    pub fn new(seed: u64, trajectory: u64, dim: usize, dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trajectory);
        Self {
            rng,
            dim,
            sqrt_dt: dt.sqrt(),
        }
    }

    /// Each Box–Muller pair consumes two `u64`, i.e. four 32-bit words.
    fn words_per_step(&self) -> u128 {
        (self.dim.div_ceil(2) * 4) as u128
    }

    /// Positions the stream at the start of step `step`.
    pub fn seek(&mut self, step: usize) {
        self.rng.set_word_pos(step as u128 * self.words_per_step());
    }

    /// Writes the next increment into `out` (length `m`).
    pub fn next_increment(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut i = 0;
        while i < self.dim {
            let (z0, z1) = box_muller(self.rng.next_u64(), self.rng.next_u64());
            out[i] = self.sqrt_dt * z0;
            if i + 1 < self.dim {
                out[i + 1] = self.sqrt_dt * z1;
            }
            i += 2;
        }
    }

    /// Increment of step `step`, regardless of the current position.
    pub fn increment_at(&mut self, step: usize, out: &mut [f64]) {
        self.seek(step);
        self.next_increment(out);
    }
}

/// Two independent standard normals from two uniform words.
#[inline]
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    // u1 in (0, 1] keeps the logarithm finite
    let u1 = ((a >> 11) + 1) as f64 * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}
