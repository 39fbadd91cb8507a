//! Counter-based pseudo-random generator.
//!
//! Every draw is a pure hash of `(key, counter)`, so the sequence is
//! platform-stable and the generator splits into independent streams without
//! jump-ahead bookkeeping: stream `s` of master seed `m` re-keys the hash
//! with `mix(mix(m) ^ mix(s + PHI))`. Monte-Carlo replications use one stream
//! per replication, which makes runs bit-reproducible regardless of the
//! number of worker threads.

use crate::numeric::normal_quantile;

const PHI: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless-core generator: `out(n) = mix(key + n * PHI)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix(seed ^ PHI),
            counter: 0,
        }
    }

    /// Independent stream `stream` of the master `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        Self {
            key: mix(mix(seed) ^ mix(stream.wrapping_add(PHI))),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(PHI)))
    }

    /// Uniform draw on the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal draw by inverse-CDF transform; deterministic across
    /// platforms because it avoids libm trigonometry.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        let u = self.uniform();
        normal_quantile(u).expect("uniform draw lies in (0,1)")
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}
