//! Counter-based random streams keyed by `(base_seed, path)`.
//!
//! A [`RandomStream`] never carries hidden state from another stream: its key
//! is a hash of the base seed folded with every path index, and draw `i` is
//! `mix(key + i * GOLDEN)`. Two streams built from the same seed and path
//! produce the same sequence regardless of which thread built them or in what
//! order, which is what makes sweeps scheduling-independent.

use rand::{Error, RngCore};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn fold(key: u64, index: u64) -> u64 {
    // Two rounds so that adjacent indices land far apart in key space.
    mix64(mix64(key ^ GOLDEN.wrapping_mul(index.wrapping_add(1))).wrapping_add(index))
}

/// Deterministic random stream addressed by a base seed and an index path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomStream {
    base_seed: u64,
    path: Vec<u64>,
    key: u64,
    counter: u64,
}

impl RandomStream {
    pub fn new(base_seed: u64, path: &[u64]) -> Self {
        let key = path.iter().fold(mix64(base_seed), |k, &i| fold(k, i));
        Self {
            base_seed,
            path: path.to_vec(),
            key,
            counter: 0,
        }
    }

    /// Stream for the sub-path `self.path ++ [index]`, starting from draw zero.
    pub fn child(&self, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push(index);
        Self {
            base_seed: self.base_seed,
            path,
            key: fold(self.key, index),
            counter: 0,
        }
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Number of 64-bit draws consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_word(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_word() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Bernoulli trial with success probability `p`.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform index in `0..n` via Lemire's multiply-shift reduction.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_word() as u128 * n as u128) >> 64) as usize
    }

    /// Sample an index from a probability vector by inversion.
    ///
    /// Mass lost to rounding falls on the last index with positive weight.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_positive = i;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_word() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_word()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_word().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_sequence() {
        let mut a = RandomStream::new(42, &[1, 2, 3]);
        let mut b = RandomStream::new(42, &[1, 2]).child(3);
        for _ in 0..100 {
            assert_eq!(a.next_word(), b.next_word());
        }
    }

    #[test]
    fn different_paths_differ() {
        let mut a = RandomStream::new(42, &[0, 1]);
        let mut b = RandomStream::new(42, &[1, 0]);
        let xs: Vec<u64> = (0..8).map(|_| a.next_word()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_word()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn uniform_moments() {
        let mut s = RandomStream::new(7, &[]);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.uniform()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 4.0 * (1.0 / 12.0f64 / n as f64).sqrt());
        assert!((var - 1.0 / 12.0).abs() < 2e-3);
    }

    #[test]
    fn disjoint_children_uncorrelated() {
        let root = RandomStream::new(99, &[5]);
        let n = 100_000;
        let mut a = root.child(0);
        let mut b = root.child(1);
        let mut sxy = 0.0;
        for _ in 0..n {
            sxy += (a.uniform() - 0.5) * (b.uniform() - 0.5);
        }
        // correlation estimate has sd ~ 1/sqrt(n)
        let corr = sxy / n as f64 * 12.0;
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn below_covers_range_evenly() {
        let mut s = RandomStream::new(3, &[1]);
        let mut counts = [0usize; 5];
        for _ in 0..100_000 {
            counts[s.below(5)] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - 20_000.0).powi(2) / 20_000.0)
            .sum();
        // 4 dof, p = 0.001 critical value 18.47
        assert!(chi2 < 18.47, "{counts:?}");
    }

    #[test]
    fn categorical_skips_zero_mass() {
        let mut s = RandomStream::new(1, &[]);
        for _ in 0..1000 {
            let i = s.categorical(&[0.0, 0.3, 0.0, 0.7, 0.0]);
            assert!(i == 1 || i == 3);
        }
    }

    #[test]
    fn works_as_rand_rng() {
        let mut s = RandomStream::new(11, &[2]);
        let x: f64 = s.gen();
        assert!((0.0..1.0).contains(&x));
        let k = s.gen_range(0..10);
        assert!(k < 10);
    }
}
