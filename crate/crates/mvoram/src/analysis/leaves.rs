//! Distributions of the number of distinct leaves touched by concurrent
//! accesses, and the statistical distance between them.
//!
//! `c` uniform leaf choices over `2^L` leaves touch `X` distinct leaves
//! with `Pr(X = k) = P(2^L, k) * S(c, k) / 2^(L*c)`, where `P` is the
//! falling factorial and `S` the Stirling number of the second kind. When
//! all `c` accesses target one Zipf-ranked block, the block's tree level
//! shrinks the leaf pool to `2^(L-d)`, weighted by the probability the
//! block sits at level `d`. Everything is computed in exact big integers
//! and converted to floating point only at the final ratio, so no
//! intermediate overflows or rounding enter the sums.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use thiserror::Error;

use super::zipf::level_weights;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DistanceError {
    #[error("support mismatch: {0} vs {1}")]
    SupportMismatch(usize, usize),
}

/// Probability mass over the number of distinct accessed leaves,
/// `k = 1..=c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafCountDistribution {
    probs: Vec<f64>,
}

impl LeafCountDistribution {
    pub fn support(&self) -> usize {
        self.probs.len()
    }

    /// `Pr(count = k)` for `k` in `1..=c`.
    pub fn prob(&self, k: usize) -> f64 {
        self.probs[k - 1]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Stirling numbers of the second kind `S(n, k)` for all `k <= n`, by the
/// standard recurrence, exact.
pub fn stirling2_row(n: u32) -> Vec<BigUint> {
    let mut row: Vec<BigUint> = vec![BigUint::one()]; // S(0,0)
    for i in 1..=n {
        let mut next = vec![BigUint::zero(); i as usize + 1];
        for k in 1..=i as usize {
            let carry = if k <= row.len() - 1 || k < row.len() {
                row.get(k).cloned().unwrap_or_else(BigUint::zero)
            } else {
                BigUint::zero()
            };
            next[k] = &carry * BigUint::from(k) + row.get(k - 1).cloned().unwrap_or_default();
        }
        row = next;
    }
    row
}

/// Falling factorial `P(m, k) = m (m-1) ... (m-k+1)`, exact; zero when
/// `k > m`.
pub fn falling_factorial(m: u64, k: u32) -> BigUint {
    if (k as u64) > m {
        return BigUint::zero();
    }
    let mut acc = BigUint::one();
    for i in 0..k as u64 {
        acc *= BigUint::from(m - i);
    }
    acc
}

/// `num / den` as an f64, scaling both sides down so huge integers (for
/// example `2^(L*c)` with `L = 25`, `c = 50`) keep full double precision.
fn ratio_to_f64(num: &BigUint, den: &BigUint) -> f64 {
    if num.is_zero() {
        return 0.0;
    }
    let nb = num.bits() as i64;
    let db = den.bits() as i64;
    let shift_n = (nb - 96).max(0) as u64;
    let shift_d = (db - 96).max(0) as u64;
    let n = (num >> shift_n).to_f64().expect("fits after shift");
    let d = (den >> shift_d).to_f64().expect("fits after shift");
    (n / d) * 2f64.powi((shift_n as i64 - shift_d as i64) as i32)
}

/// Distribution of distinct leaves when `c` accesses each pick uniformly
/// among `2^height` leaves.
pub fn dist_x(height: u32, c: u32) -> LeafCountDistribution {
    assert!(c >= 1 && height >= 1);
    let stirling = stirling2_row(c);
    let leaves = 1u64 << height;
    let den = BigUint::one() << (height as u64 * c as u64);
    let probs = (1..=c)
        .map(|k| {
            let num = falling_factorial(leaves, k) * &stirling[k as usize];
            ratio_to_f64(&num, &den)
        })
        .collect();
    LeafCountDistribution { probs }
}

/// Distribution of distinct leaves when all `c` accesses target the same
/// block, drawn Zipf(`alpha`) over `n` ranked blocks laid out in the tree
/// by rank: the block's level determines how many leaves can reach it.
pub fn dist_y(height: u32, c: u32, alpha: f64, n: u64) -> LeafCountDistribution {
    assert!(c >= 1 && height >= 1);
    let stirling = stirling2_row(c);
    let weights = level_weights(height, alpha, n);
    let mut probs = vec![0.0f64; c as usize];
    for (d, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let h = height - d as u32;
        let leaves = 1u64 << h;
        let den = BigUint::one() << (h as u64 * c as u64);
        for k in 1..=c {
            let num = falling_factorial(leaves, k) * &stirling[k as usize];
            probs[k as usize - 1] += w * ratio_to_f64(&num, &den);
        }
    }
    LeafCountDistribution { probs }
}

/// Total variation distance `1/2 * sum |p_k - q_k|`.
pub fn statistical_distance(
    p: &LeafCountDistribution,
    q: &LeafCountDistribution,
) -> Result<f64, DistanceError> {
    if p.support() != q.support() {
        return Err(DistanceError::SupportMismatch(p.support(), q.support()));
    }
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 2.0)
}

/// Worst-case access-pattern distance with `sigma` dummy rounds per access:
/// zero once at most `sigma + 1` clients touch the block (their real
/// accesses land in distinct timesteps), otherwise the distance of the
/// remaining `c - sigma` colliding accesses.
pub fn mu(n: u64, c: u32, alpha: f64, sigma: u32, height: u32) -> f64 {
    if c <= sigma + 1 {
        return 0.0;
    }
    let residual = c - sigma;
    let x = dist_x(height, residual);
    let y = dist_y(height, residual, alpha, n);
    statistical_distance(&x, &y).expect("equal supports by construction")
}
