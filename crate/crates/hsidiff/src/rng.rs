//! Counter-based splittable random streams.
//!
//! Every stochastic operation in the toolkit draws from a [`Stream`]
//! derived from a user seed. A stream is a SplitMix64 counter generator:
//! output i is `mix(key + i * GAMMA)`, so the sequence is a pure function
//! of `(key, i)` and never depends on shared state. [`Stream::fork`]
//! derives an independent child stream from a label, which lets per-band
//! or per-column work run in any order (or on any number of threads)
//! while producing bit-identical results.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const FORK_SALT: u64 = 0xa076_1d64_78bd_642f;

/// SplitMix64 finalizer; full-avalanche 64-bit mix.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic random stream.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    ctr: u64,
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            key: mix(seed ^ GAMMA),
            ctr: 0,
            spare_normal: None,
        }
    }

    /// Derive an independent child stream. Does not advance `self`;
    /// distinct labels give uncorrelated children.
    pub fn fork(&self, label: u64) -> Stream {
        Stream {
            key: mix(self.key ^ mix(label.wrapping_add(FORK_SALT))),
            ctr: 0,
            spare_normal: None,
        }
    }

    /// Convenience: fork twice for two-level labels (e.g. band, column).
    pub fn fork2(&self, a: u64, b: u64) -> Stream {
        self.fork(a).fork(b)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.ctr = self.ctr.wrapping_add(1);
        mix(self.key.wrapping_add(self.ctr.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    #[inline]
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform integer in [lo, hi] inclusive.
    #[inline]
    pub fn uniform_range(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.uniform_usize(hi - lo + 1)
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller; draws are produced in pairs.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] avoids ln(0).
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Beta(a, b) via Johnk's rejection method; valid for all a, b > 0.
    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        assert!(a > 0.0 && b > 0.0, "beta parameters must be positive");
        loop {
            let x = self.next_f64().powf(1.0 / a);
            let y = self.next_f64().powf(1.0 / b);
            let s = x + y;
            if s > 0.0 && s <= 1.0 {
                return x / s;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_usize(i + 1);
            items.swap(i, j);
        }
    }
}
