//! Group statistics for cohort comparisons.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest permutation count accepted by [`permutation_test`].
pub const MIN_PERMUTATIONS: usize = 1000;
pub const DEFAULT_PERMUTATIONS: usize = 100_000;

pub fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation (n − 1 denominator); zero for a single value.
pub fn sample_std(xs: &[f64]) -> Result<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Ok(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Ok((ss / (xs.len() - 1) as f64).sqrt())
}

/// Coefficient of variation `σ / μ` with the sample standard deviation.
pub fn cv(xs: &[f64]) -> Result<f64> {
    let m = mean(xs)?;
    if m == 0.0 {
        return Err(Error::ZeroMean);
    }
    Ok(sample_std(xs)? / m)
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Quantile by linear interpolation between order statistics, position
/// `p·(n − 1)`.
pub fn quantile(xs: &[f64], p: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("quantile", format!("{p} not in [0, 1]")));
    }
    let v = sorted(xs);
    Ok(quantile_sorted(&v, p))
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(xs: &[f64]) -> Result<f64> {
    quantile(xs, 0.5)
}

/// Quartiles and the 1.5·IQR fences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
    pub lower_fence: f64,
    pub upper_fence: f64,
}

pub fn quartiles(xs: &[f64]) -> Result<Quartiles> {
    if xs.is_empty() {
        return Err(Error::EmptySample);
    }
    let v = sorted(xs);
    let q1 = quantile_sorted(&v, 0.25);
    let q3 = quantile_sorted(&v, 0.75);
    let iqr = q3 - q1;
    Ok(Quartiles {
        q1,
        median: quantile_sorted(&v, 0.5),
        q3,
        iqr,
        lower_fence: q1 - 1.5 * iqr,
        upper_fence: q3 + 1.5 * iqr,
    })
}

/// True for each value outside `[Q1 − 1.5·IQR, Q3 + 1.5·IQR]`.
pub fn iqr_outliers(xs: &[f64]) -> Result<Vec<bool>> {
    let q = quartiles(xs)?;
    Ok(xs
        .iter()
        .map(|&x| x < q.lower_fence || x > q.upper_fence)
        .collect())
}

/// Two-sided permutation test for a difference in means.
///
/// Returns `(1 + #{|Δ*| ≥ |Δ|}) / (n_perm + 1)`. The pooled sample is put in
/// a canonical order before shuffling, so the result does not depend on the
/// order of values within or between the two samples.
pub fn permutation_test(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    if n_perm < MIN_PERMUTATIONS {
        return Err(Error::invalid(
            "n_perm",
            format!("{n_perm} is below the minimum of {MIN_PERMUTATIONS}"),
        ));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::invalid("sample", "values must be finite"));
    }
    let mut pool: Vec<f64> = a.iter().chain(b).copied().collect();
    pool.sort_by(f64::total_cmp);
    let total: f64 = pool.iter().sum();
    let n = pool.len();
    // Statistic on the smaller group so that swapping a and b is symmetric.
    let k = a.len().min(b.len());
    let diff = |sum_k: f64| {
        let m1 = sum_k / k as f64;
        let m2 = (total - sum_k) / (n - k) as f64;
        (m1 - m2).abs()
    };
    let small = if a.len() <= b.len() { a } else { b };
    let observed = diff(small.iter().sum());
    // Ties within rounding of the observed statistic count as extreme.
    let tol = 1e-12 * observed.abs().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..n_perm {
        let (chosen, _) = pool.partial_shuffle(&mut rng, k);
        let s: f64 = chosen.iter().sum();
        if diff(s) >= observed - tol {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (n_perm + 1) as f64)
}

/// Location and spread of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// `None` when the mean is zero.
    pub cv: Option<f64>,
    pub quartiles: Quartiles,
}

pub fn summarize(xs: &[f64]) -> Result<Summary> {
    Ok(Summary {
        n: xs.len(),
        mean: mean(xs)?,
        std: sample_std(xs)?,
        cv: cv(xs).ok(),
        quartiles: quartiles(xs)?,
    })
}
