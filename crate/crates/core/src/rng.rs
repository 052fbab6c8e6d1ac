//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, stream label, index, counter)`,
//! so samples can be generated in any order, on any number of threads, and
//! still agree bit for bit.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; stable across platforms and releases.
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A keyed stream; `next_u64` returns `mix(key, counter)` and bumps the counter.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, label: &str, index: u64) -> Self {
        let key = mix64(mix64(seed ^ GOLDEN) ^ label_hash(label))
            .wrapping_add(mix64(index.wrapping_mul(GOLDEN).wrapping_add(1)));
        Self { key, counter: 0 }
    }

    /// Derived stream: same seed, distinct label/index namespace.
    pub fn substream(&self, label: &str, index: u64) -> Self {
        Self::new(self.key, label, index)
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key ^ mix64(self.counter.wrapping_add(GOLDEN)));
        self.counter += 1;
        out
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi]; returns `lo` when the range is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: u32, hi: u32) -> u32 {
        if hi <= lo {
            return lo;
        }
        let span = u64::from(hi - lo) + 1;
        lo + (self.next_u64() % span) as u32
    }

    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "bound must be non-zero");
        (self.next_u64() % bound as u64) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_stream() {
        let mut a = CounterRng::new(7, "billboard02", 3);
        let mut b = CounterRng::new(7, "billboard02", 3);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn keys_separate_streams() {
        let a = CounterRng::new(7, "billboard02", 3).next_u64();
        assert_ne!(a, CounterRng::new(8, "billboard02", 3).next_u64());
        assert_ne!(a, CounterRng::new(7, "billboard03", 3).next_u64());
        assert_ne!(a, CounterRng::new(7, "billboard02", 4).next_u64());
    }

    #[test]
    fn unit_interval_bounds() {
        let mut r = CounterRng::new(1, "u", 0);
        for _ in 0..10_000 {
            let x = r.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
        assert_eq!(r.counter(), 10_000);
    }

    #[test]
    fn inclusive_range_hits_both_ends() {
        let mut r = CounterRng::new(2, "r", 0);
        let draws: Vec<u32> = (0..500).map(|_| r.range_inclusive(2, 5)).collect();
        assert!(draws.iter().all(|d| (2..=5).contains(d)));
        assert!(draws.contains(&2) && draws.contains(&5));
    }
}
