//! Gaussians over logit space, the per-pixel softmax and the categorical
//! likelihood.
//!
//! Logit fields are flattened class-major: entry `c * d + j` is class `c` at
//! pixel `j`.

use rand::Rng;

use crate::autodiff::Var;
use crate::datagen::LabelMap;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::Tensor;

/// Lower bound on every standard deviation and on the SSN diagonal.
pub const SCALE_FLOOR: f64 = 1e-5;

const LN_2PI_E: f64 = 2.837_877_066_409_345_5; // ln(2πe)

/// Per-pixel softmax over `k` classes of a `(k, d)` field.
pub fn softmax_k(logits: &[f64], k: usize, d: usize) -> Vec<f64> {
    log_softmax_k(logits, k, d).into_iter().map(f64::exp).collect()
}

pub fn log_softmax_k(logits: &[f64], k: usize, d: usize) -> Vec<f64> {
    assert_eq!(logits.len(), k * d);
    let mut out = vec![0.0; k * d];
    for j in 0..d {
        let mx = (0..k).map(|c| logits[c * d + j]).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + (0..k).map(|c| (logits[c * d + j] - mx).exp()).sum::<f64>().ln();
        for c in 0..k {
            out[c * d + j] = logits[c * d + j] - lse;
        }
    }
    out
}

/// `Σ_ij y_ij log softmax(η_:j)_i`.
pub fn categorical_log_likelihood(y: &LabelMap, logits: &[f64]) -> Result<f64> {
    let (k, d) = (y.k(), y.pixels());
    if logits.len() != k * d {
        return Err(Error::ShapeMismatch { expected: vec![k, d], actual: vec![logits.len()] });
    }
    let ls = log_softmax_k(logits, k, d);
    Ok(y.values().iter().zip(&ls).filter(|(&v, _)| v == 1).map(|(_, l)| l).sum())
}

/// Differentiable categorical log-likelihood.
///
/// `logits` has shape `[.., k, d]` and `y` (one-hot, same shape) is constant;
/// the result sums over the last two axes.
pub fn categorical_log_likelihood_var<'g>(y: Var<'g>, logits: Var<'g>) -> Var<'g> {
    let s = logits.shape();
    let n = s.len();
    assert!(n >= 2);
    let lp = logits.log_softmax(n - 2) * y;
    lp.sum_axis(n - 1, false).sum_axis(n - 2, false)
}

/// Pixel-independent Gaussian `N(mean, diag(exp(2·log_scale)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussianField {
    pub mean: Vec<f64>,
    pub log_scale: Vec<f64>,
}

impl DiagGaussianField {
    pub fn new(mean: Vec<f64>, log_scale: Vec<f64>) -> Result<Self> {
        if mean.len() != log_scale.len() {
            return Err(Error::ShapeMismatch { expected: vec![mean.len()], actual: vec![log_scale.len()] });
        }
        Ok(DiagGaussianField { mean, log_scale })
    }

    pub fn standard(n: usize) -> Self {
        DiagGaussianField { mean: vec![0.0; n], log_scale: vec![0.0; n] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standard deviations after flooring.
    pub fn scale(&self) -> Vec<f64> {
        self.log_scale.iter().map(|l| l.exp().max(SCALE_FLOOR)).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let s = self.scale();
        x.iter()
            .zip(&self.mean)
            .zip(&s)
            .map(|((x, m), s)| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum()
    }
}

/// `m` reparameterised draws `μ + σ ⊙ ε`, shape `[m, n]`.
pub fn diag_sample<R: Rng + ?Sized>(field: &DiagGaussianField, rng: &mut R, m: usize) -> Tensor {
    assert!(m >= 1);
    let n = field.dim();
    let eps = Tensor::randn(&[m, n], 1.0, rng);
    let s = field.scale();
    let mut out = eps.into_data();
    for row in out.chunks_mut(n) {
        for ((v, mu), s) in row.iter_mut().zip(&field.mean).zip(&s) {
            *v = mu + s * *v;
        }
    }
    Tensor::new(&[m, n], out)
}

/// `μ + exp(log σ) ⊙ ε` on the tape; `eps` broadcasts against the parameters.
pub fn diag_sample_var<'g>(mean: Var<'g>, log_scale: Var<'g>, eps: Var<'g>) -> Var<'g> {
    mean + log_scale.clamp(SCALE_FLOOR.ln(), f64::INFINITY).exp() * eps
}

/// `½ Σ log(2πe σ²)`.
pub fn diag_entropy(field: &DiagGaussianField) -> f64 {
    field.scale().iter().map(|s| 0.5 * LN_2PI_E + s.ln()).sum()
}

/// Entropy summed over the last axis.
pub fn diag_entropy_var(log_scale: Var<'_>) -> Var<'_> {
    let n = log_scale.shape().len();
    log_scale.clamp(SCALE_FLOOR.ln(), f64::INFINITY).add_scalar(0.5 * LN_2PI_E).sum_axis(n - 1, false)
}

/// Log-density of `x` under the diagonal Gaussian, summed over the last axis.
pub fn diag_log_density_var<'g>(mean: Var<'g>, log_scale: Var<'g>, x: Var<'g>) -> Var<'g> {
    let ls = log_scale.clamp(SCALE_FLOOR.ln(), f64::INFINITY);
    let z = (x - mean) * ls.neg().exp();
    let n = z.shape().len();
    let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
    (z.square().scale(-0.5) - ls).add_scalar(-c).sum_axis(n - 1, false)
}

/// `N(mean, D + P Pᵀ)` with diagonal `D` and `n × r` factor `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankGaussianSpec {
    pub mean: Vec<f64>,
    pub diag: Vec<f64>,
    pub factors: Matrix,
}

impl LowRankGaussianSpec {
    pub fn new(mean: Vec<f64>, diag: Vec<f64>, factors: Matrix) -> Result<Self> {
        let n = mean.len();
        if diag.len() != n || factors.rows != n {
            return Err(Error::ShapeMismatch { expected: vec![n], actual: vec![diag.len(), factors.rows] });
        }
        if let Some(bad) = diag.iter().find(|&&v| !(v >= SCALE_FLOOR)) {
            return Err(Error::invalid(format!("diagonal entry {bad} below floor {SCALE_FLOOR}")));
        }
        Ok(LowRankGaussianSpec { mean, diag, factors })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.factors.cols
    }

    /// Dense `D + P Pᵀ`.
    pub fn covariance(&self) -> Matrix {
        let mut c = self.factors.matmul(&self.factors.transpose());
        for (i, d) in self.diag.iter().enumerate() {
            c.data[i * self.dim() + i] += d;
        }
        c
    }
}

/// `m` draws `μ + √D ⊙ ε₁ + P ε₂`, shape `[m, n]`.
pub fn lowrank_sample<R: Rng + ?Sized>(spec: &LowRankGaussianSpec, rng: &mut R, m: usize) -> Tensor {
    assert!(m >= 1);
    let (n, r) = (spec.dim(), spec.rank());
    let eps1 = Tensor::randn(&[m, n], 1.0, rng);
    let eps2 = Tensor::randn(&[m, r], 1.0, rng);
    let mut out = vec![0.0; m * n];
    if r > 0 {
        // ε₂ Pᵀ
        crate::tensor::gemm(m, r, n, eps2.data(), r as isize, 1, &spec.factors.data, 1, r as isize, &mut out, 0.0);
    }
    let sd: Vec<f64> = spec.diag.iter().map(|d| d.sqrt()).collect();
    for (row, e) in out.chunks_mut(n).zip(eps1.data().chunks(n)) {
        for i in 0..n {
            row[i] += spec.mean[i] + sd[i] * e[i];
        }
    }
    Tensor::new(&[m, n], out)
}

/// Differentiable low-rank sample. `mean`, `diag`: `[.., n]`; `factors`:
/// `[n, r]` shared or `[b, n, r]` batched; `eps1`: `[.., n]`; `eps2`: `[.., r]`.
pub fn lowrank_sample_var<'g>(
    mean: Var<'g>,
    diag: Var<'g>,
    factors: Var<'g>,
    eps1: Var<'g>,
    eps2: Var<'g>,
) -> Var<'g> {
    let low = eps2.matmul(factors.t());
    mean + diag.sqrt() * eps1 + low
}
