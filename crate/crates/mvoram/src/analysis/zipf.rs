//! Zipfian workload generation and the level weights it induces.

use rand::Rng;

/// Inverse-CDF sampler over ranks `1..=n` with probability proportional to
/// `rank^-alpha`. Exact prefix sums, so sampling is a binary search and
/// fully deterministic under a seeded generator. `alpha = 0` degenerates to
/// the uniform distribution.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: u64, alpha: f64) -> Self {
        assert!(n >= 1, "support must be nonempty");
        let mut cdf = Vec::with_capacity(n as usize);
        let mut acc = 0.0f64;
        for rank in 1..=n {
            acc += (rank as f64).powf(-alpha);
            cdf.push(acc);
        }
        let total = acc;
        for v in &mut cdf {
            *v /= total;
        }
        ZipfSampler { cdf }
    }

    pub fn support(&self) -> u64 {
        self.cdf.len() as u64
    }

    /// Draws a rank in `1..=n`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.gen();
        match self
            .cdf
            .binary_search_by(|p| p.partial_cmp(&u).expect("cdf is finite"))
        {
            Ok(i) => i as u64 + 1,
            Err(i) => (i as u64 + 1).min(self.support()),
        }
    }

    /// Probability mass of a rank.
    pub fn pmf(&self, rank: u64) -> f64 {
        let i = rank as usize - 1;
        if i == 0 {
            self.cdf[0]
        } else {
            self.cdf[i] - self.cdf[i - 1]
        }
    }
}

/// Probability that the target of a Zipfian access over `n` ranked blocks
/// resides at each tree level, when blocks occupy heap positions in rank
/// order (rank 1 at the root). Level `d` holds ranks `[2^d, 2^(d+1))`,
/// clamped to `n`, so the weights always sum to 1 for `n` within the tree.
///
/// The partial zeta sums take one pass over all `n` ranks (2^26 terms at
/// height 25), so results are memoized per `(height, alpha, n)`.
pub fn level_weights(height: u32, alpha: f64, n: u64) -> Vec<f64> {
    use std::collections::HashMap;
    use std::sync::Mutex;
    static CACHE: Mutex<Option<HashMap<(u32, u64, u64), Vec<f64>>>> = Mutex::new(None);

    let key = (height, alpha.to_bits(), n);
    if let Some(cached) = CACHE.lock().unwrap().get_or_insert_with(HashMap::new).get(&key) {
        return cached.clone();
    }
    let mut sums = vec![0.0f64; height as usize + 2];
    for j in 1..=n {
        let level = (63 - j.leading_zeros() as u64).min(height as u64 + 1);
        sums[level as usize] += (j as f64).powf(-alpha);
    }
    let norm: f64 = sums.iter().sum();
    let weights: Vec<f64> = (0..=height as usize).map(|d| sums[d] / norm).collect();
    CACHE
        .lock()
        .unwrap()
        .get_or_insert_with(HashMap::new)
        .insert(key, weights.clone());
    weights
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn pmf_sums_to_one() {
        let z = ZipfSampler::new(100, 1.0);
        let total: f64 = (1..=100).map(|r| z.pmf(r)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_when_alpha_zero() {
        let z = ZipfSampler::new(8, 0.0);
        for r in 1..=8 {
            assert!((z.pmf(r) - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_frequencies_match_pmf() {
        let z = ZipfSampler::new(16, 1.2);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let draws = 200_000;
        let mut counts = vec![0usize; 16];
        for _ in 0..draws {
            counts[z.sample(&mut rng) as usize - 1] += 1;
        }
        for r in 1..=16u64 {
            let p = z.pmf(r);
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            let dev = (counts[r as usize - 1] as f64 - draws as f64 * p).abs();
            assert!(dev < 4.0 * sigma + 1.0, "rank {r}: dev {dev:.1}");
        }
    }

    #[test]
    fn level_weights_sum_to_one_for_full_tree() {
        // n = 2^(L+1) - 1 partitions ranks exactly across levels.
        for (l, alpha) in [(3u32, 1.0), (5, 0.5), (7, 2.0)] {
            let n = (1u64 << (l + 1)) - 1;
            let w = level_weights(l, alpha, n);
            let total: f64 = w.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "L={l} alpha={alpha}");
        }
    }

    #[test]
    fn higher_alpha_concentrates_weight_at_root() {
        let n = (1u64 << 6) - 1;
        let flat = level_weights(5, 0.1, n);
        let skew = level_weights(5, 2.0, n);
        assert!(skew[0] > flat[0]);
        assert!(skew[5] < flat[5]);
    }
}
