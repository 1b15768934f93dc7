//! Effective and numerical rank, and Monte Carlo estimates of the covariance
//! of softmax-transformed low-rank Gaussian logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distributions::{lowrank_sample, softmax_k, LowRankGaussianSpec, SCALE_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::{CovarianceAccumulator, Matrix};
use crate::tensor::Tensor;

/// `exp(H(p))` with `p = σ / Σσ` and `0·log 0 = 0`.
pub fn effective_rank_from_singular_values(sv: &[f64]) -> Result<f64> {
    let total: f64 = sv.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("effective rank of an all-zero matrix is undefined"));
    }
    let h: f64 = sv
        .iter()
        .map(|&s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.exp())
}

pub fn effective_rank(m: &Matrix) -> Result<f64> {
    effective_rank_from_singular_values(&m.singular_values())
}

/// Number of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> usize {
    count_above(&m.singular_values(), rel_tol)
}

fn count_above(sv: &[f64], rel_tol: f64) -> usize {
    let top = sv.first().copied().unwrap_or(0.0);
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Empirical covariance of `softmax_k(η)` for `η ~ spec`, flattened `(k, d)`.
pub fn pushforward_covariance_mc<R: Rng + ?Sized>(
    spec: &LowRankGaussianSpec,
    k: usize,
    d: usize,
    samples: usize,
    rng: &mut R,
) -> Matrix {
    assert_eq!(spec.dim(), k * d, "spec dimension must be k·d");
    let n = k * d;
    let mut acc = CovarianceAccumulator::new(n);
    let chunk = 16_384;
    let mut left = samples;
    while left > 0 {
        let m = left.min(chunk);
        let eta = lowrank_sample(spec, rng, m);
        let y: Vec<f64> = eta.data().chunks(n).flat_map(|row| softmax_k(row, k, d)).collect();
        acc.push_rows(&y);
        left -= m;
    }
    acc.covariance()
}

/// Random low-rank specs: `μ = mean`, `D = diag · I`, `P_ij ~ N(0, 1/r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpecFamily {
    pub mean: f64,
    pub diag: f64,
}

impl SpecFamily {
    /// Family used for the sublinear-growth study.
    pub fn default_sublinearity() -> Self {
        SpecFamily { mean: 0.0, diag: 0.1 }
    }

    /// Near-singular diagonal, so the logits are effectively rank `r`.
    pub fn floor_diagonal() -> Self {
        SpecFamily { mean: 0.0, diag: SCALE_FLOOR }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rank: usize, dim: usize, rng: &mut R) -> LowRankGaussianSpec {
        let p = Tensor::randn(&[dim, rank], 1.0 / (rank.max(1) as f64).sqrt(), rng);
        LowRankGaussianSpec::new(vec![self.mean; dim], vec![self.diag; dim], Matrix::new(dim, rank, p.into_data()))
            .expect("family diagonal respects the floor")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    pub assumed_rank: usize,
    pub numerical_rank: usize,
    pub effective_rank: f64,
    pub singular_values: Vec<f64>,
    pub samples: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl RankReport {
    pub fn from_covariance(cov: &Matrix, assumed_rank: usize, samples: usize, rel_tol: f64, seed: u64) -> Result<Self> {
        let sv = cov.singular_values();
        Ok(RankReport {
            assumed_rank,
            numerical_rank: count_above(&sv, rel_tol),
            effective_rank: effective_rank_from_singular_values(&sv)?,
            singular_values: sv,
            samples,
            rel_tol,
            seed,
        })
    }

    pub fn csv_header() -> [&'static str; 6] {
        ["r", "numerical_rank", "effective_rank", "N", "rel_tol", "seed"]
    }

    pub fn csv_record(&self) -> [String; 6] {
        [
            self.assumed_rank.to_string(),
            self.numerical_rank.to_string(),
            format!("{:.6}", self.effective_rank),
            self.samples.to_string(),
            format!("{:e}", self.rel_tol),
            self.seed.to_string(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SublinearityReport {
    pub reports: Vec<RankReport>,
    /// `erank(r_{i+1}) − erank(r_i)`.
    pub differences: Vec<f64>,
    /// Differences divided by the rank step, so non-uniform grids compare fairly.
    pub slopes: Vec<f64>,
    /// Fraction of adjacent slope pairs that do not increase.
    pub concavity: f64,
}

/// Seed for grid entry `r`, derived from the root seed by fixed arithmetic.
pub fn rank_seed(root: u64, rank: usize) -> u64 {
    root.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(rank as u64 * 1_000_003)
}

/// Fraction of adjacent pairs with `v[i+1] ≤ v[i]`; 1 when there are no pairs.
pub fn concavity_statistic(slopes: &[f64]) -> f64 {
    if slopes.len() < 2 {
        return 1.0;
    }
    let ok = slopes.windows(2).filter(|w| w[1] <= w[0]).count();
    ok as f64 / (slopes.len() - 1) as f64
}

pub fn sublinearity_report(
    family: &SpecFamily,
    rank_grid: &[usize],
    k: usize,
    d: usize,
    samples: usize,
    rel_tol: f64,
    seed: u64,
) -> Result<SublinearityReport> {
    if rank_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("rank grid must be strictly increasing"));
    }
    let mut reports = Vec::with_capacity(rank_grid.len());
    for &r in rank_grid {
        let s = rank_seed(seed, r);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let spec = family.sample(r, k * d, &mut rng);
        let cov = pushforward_covariance_mc(&spec, k, d, samples, &mut rng);
        reports.push(RankReport::from_covariance(&cov, r, samples, rel_tol, s)?);
    }
    let differences: Vec<f64> = reports.windows(2).map(|w| w[1].effective_rank - w[0].effective_rank).collect();
    let slopes: Vec<f64> = differences
        .iter()
        .zip(rank_grid.windows(2))
        .map(|(de, w)| de / (w[1] - w[0]) as f64)
        .collect();
    let concavity = concavity_statistic(&slopes);
    Ok(SublinearityReport { reports, differences, slopes, concavity })
}
