//! SplitMix64 pseudo-random streams.
//!
//! Every source of randomness in this crate (weight init, shuffles, blob
//! sampling) goes through SplitMix64 so that runs are bit-identical across
//! platforms. Floating-point draws use the top 53 bits of each output.

/// SplitMix64 finalizer applied to `x + golden_gamma`.
#[inline]
pub fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a key for a (seed, a, b) triple by chaining the finalizer.
#[inline]
pub fn derive_key(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a) ^ b)
}

/// Sequential SplitMix64 stream.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Stream keyed by (seed, salt): distinct salts give independent streams.
    pub fn keyed(seed: u64, salt: u64) -> Self {
        Self {
            state: mix(mix(seed) ^ salt),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform in (0, 1]; safe as a log argument.
    #[inline]
    fn next_f64_open(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        (((self.next_u64() >> 11) + 1) as f64) / DEN
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in [0, n). n must be > 0; modulo bias is negligible
    /// for the small n used here and keeps the draw order fixed.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }

    /// In-place Fisher-Yates shuffle with a fixed draw order.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Standard-normal stream: Box-Muller pairs over SplitMix64 uniforms,
/// consumed in a fixed order (cos value first, sin value cached).
#[derive(Clone, Debug)]
pub struct GaussianStream {
    rng: SplitMix64,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(rng: SplitMix64) -> Self {
        Self { rng, spare: None }
    }

    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.rng.next_f64_open();
        let u2 = self.rng.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_sequence() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_seeds_diverge() {
        let mut a = SplitMix64::new(1);
        let mut b = SplitMix64::new(2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn f64_in_unit_interval() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..1000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn derive_key_sensitive_to_all_parts() {
        let k = derive_key(1, 2, 3);
        assert_ne!(k, derive_key(0, 2, 3));
        assert_ne!(k, derive_key(1, 0, 3));
        assert_ne!(k, derive_key(1, 2, 0));
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = SplitMix64::keyed(9, 0);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn gaussian_moments_roughly_standard() {
        let mut g = GaussianStream::new(SplitMix64::new(11));
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| g.next()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
