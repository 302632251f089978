//! Seeded random streams with order-independent child derivation.
//!
//! Every randomized stage takes an explicit [`RandomStream`]; nothing in the
//! crate touches ambient randomness. A stream remembers the seed it was built
//! from, so [`RandomStream::child`] can derive per-image streams purely from
//! `(seed, tag)` — the derivation does not depend on how much the parent has
//! already drawn, which keeps parallel per-image work independent of
//! scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby seeds and tags.
fn mix(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        RandomStream { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// The seed this stream was constructed with (not the current state).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream from this stream's seed and `tag`.
    pub fn child(&self, tag: u64) -> RandomStream {
        RandomStream::new(mix(self.seed ^ mix(tag)))
    }

    /// Uniform draw from [lo, hi); degenerate ranges return `lo` without
    /// consuming randomness.
    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        assert!(lo <= hi, "uniform_f64 range reversed: {lo} > {hi}");
        if lo == hi {
            lo
        } else {
            self.rng.gen_range(lo..hi)
        }
    }

    /// Uniform integer draw from [lo, hi] inclusive.
    pub fn uniform_u32(&mut self, lo: u32, hi: u32) -> u32 {
        assert!(lo <= hi, "uniform_u32 range reversed: {lo} > {hi}");
        self.rng.gen_range(lo..=hi)
    }

    /// Bernoulli draw; `p` must lie in [0, 1].
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }

    /// Poisson draw by Knuth's product method; fine for the small rates used
    /// here (false-positive counts per image).
    pub fn poisson(&mut self, lambda: f64) -> u32 {
        assert!(lambda >= 0.0 && lambda.is_finite());
        let limit = (-lambda).exp();
        let mut k = 0u32;
        let mut product = 1.0;
        loop {
            product *= self.rng.gen::<f64>();
            if product <= limit {
                return k;
            }
            k += 1;
        }
    }

    /// `k` distinct indices drawn uniformly without replacement from `0..n`,
    /// in draw order (partial Fisher–Yates).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.rng.gen_range(i..n);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
