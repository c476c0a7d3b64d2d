//! Seeding and Monte Carlo bookkeeping.
//!
//! A master seed expands into independent ChaCha streams indexed by a
//! replica (or block) counter, so results do not depend on how many worker
//! threads process the replicas.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Walks/draws per seeding block in [`par_blocks`].
pub const BLOCK: usize = 1024;

/// Independent stream `stream` of the master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a sub-seed for a named purpose so that distinct experiments
/// sharing a master seed use unrelated streams.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the seed through splitmix64.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix(seed ^ h)
}

pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Runs `n` trials split into fixed blocks of [`BLOCK`], block `b` drawing
/// from stream `b`; `f(rng, count)` returns the block's accumulator, and the
/// accumulators are merged in block order.
pub fn par_blocks<A, F>(seed: u64, n: usize, f: F) -> Vec<A>
where
    A: Send,
    F: Fn(&mut ChaCha8Rng, usize) -> A + Sync,
{
    let blocks = n.div_ceil(BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let count = BLOCK.min(n - b * BLOCK);
            let mut rng = stream_rng(seed, b as u64);
            f(&mut rng, count)
        })
        .collect()
}

/// Running sums for a mean and its standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        self.sum / self.n as f64
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        let n = self.n as f64;
        ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    pub fn se(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }

    pub fn estimate(&self) -> Estimate {
        Estimate { value: self.mean(), se: self.se() }
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, se: 0.0 }
    }

    /// `|self - other| / sqrt(se² + se'²)`.
    pub fn z_against(&self, other: &Estimate) -> f64 {
        let s = (self.se * self.se + other.se * other.se).sqrt();
        let d = (self.value - other.value).abs();
        if s == 0.0 {
            if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            d / s
        }
    }

    /// `|self - x| / se` against an exact value.
    pub fn z_exact(&self, x: f64) -> f64 {
        self.z_against(&Estimate::exact(x))
    }
}

/// Bernoulli frequency with binomial standard error.
pub fn binomial_estimate(hits: u64, n: u64) -> Estimate {
    let p = hits as f64 / n as f64;
    Estimate { value: p, se: (p * (1.0 - p) / n as f64).sqrt() }
}

pub fn merge_moments(parts: &[Moments]) -> Moments {
    let mut m = Moments::default();
    for p in parts {
        m.merge(p);
    }
    m
}
