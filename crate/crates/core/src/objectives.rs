//! Training objectives and likelihood reporting.
//!
//! Tape-level functions take per-sample log-likelihoods shaped `[B, M]`
//! (`B` images, `M` Monte Carlo samples) and return one value per image.
//! Plain `f64` versions are provided for evaluation and tests.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::datagen::LabelMap;
use crate::distributions::{categorical_log_likelihood, categorical_log_likelihood_var, diag_entropy, DiagGaussianField};
use crate::error::{Error, Result};
use crate::flows_continuous::interpolate_var;
use crate::flows_discrete::{maf_log_prob, self_score, AutoregressiveTransform, CachedFlowSample};
use crate::networks::{Bound, FlowNetworkSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveVariant {
    Ssn,
    IafMc,
    DualFlow,
    EntropyReg,
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    Naive,
    #[default]
    LowVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub variant: ObjectiveVariant,
    /// Monte Carlo samples per image during training.
    pub mc_samples: usize,
    /// Entropy weight for `entropy_reg`.
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub kl_estimator: KlEstimator,
}

impl ObjectiveConfig {
    pub fn new(variant: ObjectiveVariant, mc_samples: usize) -> Self {
        ObjectiveConfig { variant, mc_samples, beta: 0.0, kl_estimator: KlEstimator::LowVariance }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// `LSE(ℓ) − log M`, computed stably.
pub fn mc_log_likelihood_lse(per_sample: &[f64]) -> f64 {
    assert!(!per_sample.is_empty(), "need at least one sample");
    let mx = per_sample.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    let s: f64 = per_sample.iter().map(|l| (l - mx).exp()).sum();
    mx + s.ln() - (per_sample.len() as f64).ln()
}

/// Per-sample categorical log-likelihoods `[B, M]` for logits `[B, M, k, d]`
/// and one-hot labels `[B, k, d]`.
pub fn sample_log_likelihoods_var<'g>(y: Var<'g>, logits: Var<'g>) -> Var<'g> {
    let s = y.shape();
    let y = y.reshape(&[s[0], 1, s[1], s[2]]);
    categorical_log_likelihood_var(y, logits)
}

/// `[B, M] → [B]`.
pub fn mc_log_likelihood_lse_var(per_sample: Var<'_>) -> Var<'_> {
    let m = per_sample.shape()[1] as f64;
    per_sample.logsumexp(1, false).add_scalar(-m.ln())
}

/// KL estimate from the IAF's scores of its own samples (`p`) and the MAF's
/// scores of the same samples (`q`), with `r = log p − log q`.
///
/// `LowVariance` evaluates `mean(expm1(r) − r)` with that `r`. For draws from
/// `p` its expectation is `E_p[p/q] − 1 − KL(p‖q)`: non-negative and zero
/// iff `p = q`, but not `KL(p‖q)` itself.
pub fn kl_estimate(p_scores: &[f64], q_scores: &[f64], estimator: KlEstimator) -> f64 {
    assert_eq!(p_scores.len(), q_scores.len());
    assert!(!p_scores.is_empty());
    let m = p_scores.len() as f64;
    let r = p_scores.iter().zip(q_scores).map(|(p, q)| p - q);
    match estimator {
        KlEstimator::Naive => r.sum::<f64>() / m,
        KlEstimator::LowVariance => r.map(|r| r.exp_m1() - r).sum::<f64>() / m,
    }
}

/// `[B, M]` scores → `[B]` estimates.
pub fn kl_estimate_var<'g>(p_scores: Var<'g>, q_scores: Var<'g>, estimator: KlEstimator) -> Var<'g> {
    let r = p_scores - q_scores;
    match estimator {
        KlEstimator::Naive => r.mean_axis(1, false),
        KlEstimator::LowVariance => (r.expm1() - r).mean_axis(1, false),
    }
}

/// `mean_M ℓ − KL`, per image.
pub fn dual_flow_elbo_var<'g>(
    per_sample: Var<'g>,
    p_scores: Var<'g>,
    q_scores: Var<'g>,
    estimator: KlEstimator,
) -> Var<'g> {
    per_sample.mean_axis(1, false) - kl_estimate_var(p_scores, q_scores, estimator)
}

/// `mean_M ℓ + β·(H(base) + mean_M Σᵢ sᵢ)`, per image. `base_entropy` is
/// `[B]` (or broadcastable), `log_det` is `[B, M]`.
pub fn entropy_regularised_var<'g>(per_sample: Var<'g>, base_entropy: Var<'g>, log_det: Var<'g>, beta: f64) -> Var<'g> {
    let likelihood = per_sample.mean_axis(1, false);
    if beta == 0.0 {
        return likelihood;
    }
    likelihood + (base_entropy + log_det.mean_axis(1, false)).scale(beta)
}

fn sample_log_likelihoods(y: &LabelMap, eta: &Tensor) -> Result<Vec<f64>> {
    let n = y.k() * y.pixels();
    if eta.shape().len() != 2 || eta.shape()[1] != n {
        return Err(Error::ShapeMismatch { expected: vec![0, n], actual: eta.shape().to_vec() });
    }
    eta.data().chunks(n).map(|row| categorical_log_likelihood(y, row)).collect()
}

/// Dual-flow bound for one image from `M` cached IAF samples (rows).
pub fn dual_flow_elbo(
    y: &LabelMap,
    cached: &CachedFlowSample,
    iaf_base: &DiagGaussianField,
    maf: &AutoregressiveTransform,
    maf_base: &DiagGaussianField,
    context: Option<&Tensor>,
    estimator: KlEstimator,
) -> Result<f64> {
    let ll = sample_log_likelihoods(y, &cached.eta)?;
    let p = self_score(cached, iaf_base);
    let q = maf_log_prob(&cached.eta, context, maf, maf_base);
    Ok(ll.iter().sum::<f64>() / ll.len() as f64 - kl_estimate(&p, &q, estimator))
}

/// `mean ℓ + β·Ĥ` for one image from `M` cached IAF samples of `base`.
pub fn entropy_regularised_objective(
    y: &LabelMap,
    cached: &CachedFlowSample,
    base: &DiagGaussianField,
    beta: f64,
) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be non-negative, got {beta}")));
    }
    let ll = sample_log_likelihoods(y, &cached.eta)?;
    let m = ll.len() as f64;
    let mean_ll = ll.iter().sum::<f64>() / m;
    if beta == 0.0 {
        return Ok(mean_ll);
    }
    let entropy = diag_entropy(base) + cached.log_det.iter().sum::<f64>() / m;
    Ok(mean_ll + beta * entropy)
}

/// Negative expected categorical log-likelihood at path points, averaged
/// over the batch. `y`, `u`: `[B, n]` (class-major rows); one `t` per row.
pub fn continuous_loss<'g>(
    spec: &FlowNetworkSpec,
    p: &Bound<'g>,
    prefix: &str,
    y: Var<'g>,
    u: Var<'g>,
    t: &[f64],
    x: Option<Var<'g>>,
) -> Var<'g> {
    let b = y.shape()[0];
    let y_t = interpolate_var(u, y, t);
    let logits = spec.forward(p, prefix, y_t, t, x);
    let labels = y.reshape(&[b, spec.k, spec.height * spec.width]);
    categorical_log_likelihood_var(labels, logits).mean().neg()
}

/// `−ℓ / (pixels · ln 2)`.
pub fn bits_per_dim(total_log_likelihood: f64, pixel_count: usize) -> Result<f64> {
    if pixel_count == 0 {
        return Err(Error::invalid("pixel count must be positive"));
    }
    Ok(-total_log_likelihood / (pixel_count as f64 * std::f64::consts::LN_2))
}
