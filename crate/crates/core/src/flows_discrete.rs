//! Affine autoregressive flows over flattened logit fields.
//!
//! An IAF conditions on the base noise `u`, so sampling is one parallel pass
//! and inversion is sequential. A MAF conditions on the output `η`, so
//! scoring is parallel and sampling is sequential. Both share the same
//! conditioner networks and the same `ηᵢ = μᵢ + exp(sᵢ)·uᵢ` map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::distributions::{diag_entropy, diag_sample, DiagGaussianField};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::networks::{ConditionerSpec, ParameterSet};
use crate::tensor::{permute, Tensor};

/// Log-scales are clamped to `[-7, 7]` before exponentiation.
pub const LOG_SCALE_CLAMP: f64 = 7.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Conditioner reads the base noise.
    Iaf,
    /// Conditioner reads the transformed value.
    Maf,
}

fn check_patch(h: usize, w: usize, patch: [usize; 2]) -> Result<()> {
    if patch[0] == 0 || patch[1] == 0 || h % patch[0] != 0 || w % patch[1] != 0 {
        return Err(Error::invalid(format!("patch {patch:?} does not tile a {h}x{w} field")));
    }
    Ok(())
}

/// `[B, k, h, w]` → `[B, T, k·ph·pw]`, tokens in raster order over patches.
pub fn patchify(x: &Tensor, patch: [usize; 2]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("patchify expects [B, k, h, w], got {s:?}")));
    }
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    check_patch(h, w, patch)?;
    let [ph, pw] = patch;
    let t = permute(&x.clone().reshape(&[b, k, h / ph, ph, w / pw, pw]), &[0, 2, 4, 1, 3, 5]);
    Ok(t.reshape(&[b, (h / ph) * (w / pw), k * ph * pw]))
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, k: usize, h: usize, w: usize, patch: [usize; 2]) -> Result<Tensor> {
    check_patch(h, w, patch)?;
    let [ph, pw] = patch;
    let b = tokens.shape()[0];
    let expected = [b, (h / ph) * (w / pw), k * ph * pw];
    if tokens.shape() != expected {
        return Err(Error::ShapeMismatch { expected: expected.to_vec(), actual: tokens.shape().to_vec() });
    }
    let t = permute(&tokens.clone().reshape(&[b, h / ph, w / pw, k, ph, pw]), &[0, 3, 1, 4, 2, 5]);
    Ok(t.reshape(&[b, k, h, w]))
}

pub fn patchify_var<'g>(x: Var<'g>, patch: [usize; 2]) -> Var<'g> {
    let s = x.shape();
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    check_patch(h, w, patch).expect("patch must tile the field");
    let [ph, pw] = patch;
    x.reshape(&[b, k, h / ph, ph, w / pw, pw])
        .permute(&[0, 2, 4, 1, 3, 5])
        .reshape(&[b, (h / ph) * (w / pw), k * ph * pw])
}

pub fn unpatchify_var<'g>(tokens: Var<'g>, k: usize, h: usize, w: usize, patch: [usize; 2]) -> Var<'g> {
    let [ph, pw] = patch;
    let b = tokens.shape()[0];
    tokens.reshape(&[b, h / ph, w / pw, k, ph, pw]).permute(&[0, 3, 1, 4, 2, 5]).reshape(&[b, k, h, w])
}

/// Flat `(k, h, w)` indices belonging to each token, in token order and in
/// the within-token layout used by [`patchify`].
pub fn patch_groups(k: usize, h: usize, w: usize, patch: [usize; 2]) -> Vec<Vec<usize>> {
    let [ph, pw] = patch;
    let (th, tw) = (h / ph, w / pw);
    let mut groups = Vec::with_capacity(th * tw);
    for ti in 0..th {
        for tj in 0..tw {
            let mut g = Vec::with_capacity(k * ph * pw);
            for c in 0..k {
                for a in 0..ph {
                    for bb in 0..pw {
                        g.push(c * h * w + (ti * ph + a) * w + tj * pw + bb);
                    }
                }
            }
            groups.push(g);
        }
    }
    groups
}

/// Conditioner outputs with the log-scale clamped.
pub fn conditioner_var<'g>(
    spec: &ConditionerSpec,
    p: &crate::networks::Bound<'g>,
    prefix: &str,
    input: Var<'g>,
    context: Option<Var<'g>>,
) -> (Var<'g>, Var<'g>) {
    let (shift, raw) = spec.forward(p, prefix, input, context);
    (shift, raw.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP))
}

/// IAF sampling pass `u ↦ η`; returns `(η, s)` with `log|det J| = Σᵢ sᵢ`.
pub fn iaf_forward_var<'g>(
    spec: &ConditionerSpec,
    p: &crate::networks::Bound<'g>,
    prefix: &str,
    u: Var<'g>,
    context: Option<Var<'g>>,
) -> (Var<'g>, Var<'g>) {
    let (shift, s) = conditioner_var(spec, p, prefix, u, context);
    (shift + s.exp() * u, s)
}

/// MAF scoring pass `η ↦ u`; returns `(u, s)` so that
/// `log p(η) = log p_base(u) − Σᵢ sᵢ`.
pub fn maf_inverse_var<'g>(
    spec: &ConditionerSpec,
    p: &crate::networks::Bound<'g>,
    prefix: &str,
    eta: Var<'g>,
    context: Option<Var<'g>>,
) -> (Var<'g>, Var<'g>) {
    let (shift, s) = conditioner_var(spec, p, prefix, eta, context);
    ((eta - shift) * s.neg().exp(), s)
}

/// A conditioner with its parameters and direction.
#[derive(Clone, Debug)]
pub struct AutoregressiveTransform {
    pub conditioner: ConditionerSpec,
    pub params: ParameterSet,
    pub prefix: String,
    pub direction: Direction,
}

/// Output of a sampling pass with everything needed to score it again.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedFlowSample {
    /// `[B, n]`
    pub eta: Tensor,
    pub u: Tensor,
    pub shift: Tensor,
    pub log_scale: Tensor,
    /// `Σᵢ sᵢ` per row.
    pub log_det: Vec<f64>,
}

fn row_sums(t: &Tensor) -> Vec<f64> {
    let n = t.shape()[1];
    t.data().chunks(n).map(|r| r.iter().sum()).collect()
}

impl AutoregressiveTransform {
    /// Fresh transform with parameters under the prefix `flow`. Conditioners
    /// start at the identity map.
    pub fn new<R: Rng + ?Sized>(conditioner: ConditionerSpec, direction: Direction, rng: &mut R) -> Self {
        let mut params = ParameterSet::new();
        conditioner.init(&mut params, "flow", rng);
        AutoregressiveTransform { conditioner, params, prefix: "flow".into(), direction }
    }

    pub fn dim(&self) -> usize {
        self.conditioner.dim()
    }

    /// `(shift, clamped log-scale)` for input rows `[B, n]`.
    pub fn conditioner_outputs(&self, input: &Tensor, context: Option<&Tensor>) -> (Tensor, Tensor) {
        let g = Graph::new();
        let p = self.params.bind_const(&g);
        let ctx = context.map(|c| g.constant(c.clone()));
        let (shift, s) = conditioner_var(&self.conditioner, &p, &self.prefix, g.constant(input.clone()), ctx);
        ((*shift.value()).clone(), (*s.value()).clone())
    }

    /// `u ↦ η`. Parallel for IAF, sequential for MAF.
    pub fn forward(&self, u: &Tensor, context: Option<&Tensor>) -> CachedFlowSample {
        let (eta, shift, log_scale) = match self.direction {
            Direction::Iaf => {
                let (shift, s) = self.conditioner_outputs(u, context);
                let eta = Tensor::from_fn(u.shape(), |i| shift.data()[i] + s.data()[i].exp() * u.data()[i]);
                (eta, shift, s)
            }
            Direction::Maf => self.solve(u, context, |y, m, s| m + s.exp() * y),
        };
        let log_det = row_sums(&log_scale);
        CachedFlowSample { eta, u: u.clone(), shift, log_scale, log_det }
    }

    /// `η ↦ (u, Σᵢ sᵢ)`. Parallel for MAF, sequential for IAF.
    pub fn inverse(&self, eta: &Tensor, context: Option<&Tensor>) -> (Tensor, Vec<f64>) {
        let (u, s) = match self.direction {
            Direction::Maf => {
                let (shift, s) = self.conditioner_outputs(eta, context);
                let u = Tensor::from_fn(eta.shape(), |i| (eta.data()[i] - shift.data()[i]) * (-s.data()[i]).exp());
                (u, s)
            }
            Direction::Iaf => {
                let (u, _, s) = self.solve(eta, context, |y, m, s| (y - m) * (-s).exp());
                (u, s)
            }
        };
        let log_det = row_sums(&s);
        (u, log_det)
    }

    /// Solves for the conditioner input `x` block by block, where
    /// `x_b = step(given_b, shift_b(x_<b), s_b(x_<b))`.
    fn solve(
        &self,
        given: &Tensor,
        context: Option<&Tensor>,
        step: impl Fn(f64, f64, f64) -> f64,
    ) -> (Tensor, Tensor, Tensor) {
        let n = self.dim();
        assert_eq!(given.shape()[1], n, "input width must match the transform");
        let rows = given.shape()[0];
        let mut x = Tensor::zeros(given.shape());
        let mut shift = Tensor::zeros(given.shape());
        let mut log_scale = Tensor::zeros(given.shape());
        if let ConditionerSpec::Made { .. } = self.conditioner {
            // only column i is needed at step i, so skip the full pass
            let w = self.params.get(&format!("{}.w", self.prefix)).expect("MADE weight");
            let b = self.params.get(&format!("{}.b", self.prefix)).expect("MADE bias");
            let (w, b) = (w.data(), b.data());
            for r in 0..rows {
                let base = r * n;
                for i in 0..n {
                    let (mut m, mut s) = (b[i], b[n + i]);
                    for j in 0..i {
                        let xj = x.data()[base + j];
                        m += xj * w[j * 2 * n + i];
                        s += xj * w[j * 2 * n + n + i];
                    }
                    let s = s.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
                    x.data_mut()[base + i] = step(given.data()[base + i], m, s);
                    shift.data_mut()[base + i] = m;
                    log_scale.data_mut()[base + i] = s;
                }
            }
            return (x, shift, log_scale);
        }
        for block in self.conditioner.blocks() {
            let (m, s) = self.conditioner_outputs(&x, context);
            for r in 0..rows {
                for &i in &block {
                    let idx = r * n + i;
                    x.data_mut()[idx] = step(given.data()[idx], m.data()[idx], s.data()[idx]);
                    shift.data_mut()[idx] = m.data()[idx];
                    log_scale.data_mut()[idx] = s.data()[idx];
                }
            }
        }
        (x, shift, log_scale)
    }
}

pub fn iaf_forward(u: &Tensor, context: Option<&Tensor>, transform: &AutoregressiveTransform) -> CachedFlowSample {
    transform.forward(u, context)
}

pub fn iaf_inverse(eta: &Tensor, context: Option<&Tensor>, transform: &AutoregressiveTransform) -> Tensor {
    transform.inverse(eta, context).0
}

/// Per-row `log p(η) = log p_base(u) − Σᵢ sᵢ`.
pub fn maf_log_prob(
    eta: &Tensor,
    context: Option<&Tensor>,
    transform: &AutoregressiveTransform,
    base: &DiagGaussianField,
) -> Vec<f64> {
    let (u, log_det) = transform.inverse(eta, context);
    let n = transform.dim();
    u.data().chunks(n).zip(log_det).map(|(row, ld)| base.log_density(row) - ld).collect()
}

/// Scores a cached sample without touching the conditioner.
pub fn self_score(sample: &CachedFlowSample, base: &DiagGaussianField) -> Vec<f64> {
    let n = base.dim();
    sample.u.data().chunks(n).zip(&sample.log_det).map(|(row, ld)| base.log_density(row) - ld).collect()
}

/// Entropy of the flow's pushforward: `H(base) + mean Σᵢ sᵢ` over `m` draws.
pub fn iaf_entropy_estimate<R: Rng + ?Sized>(
    base: &DiagGaussianField,
    transform: &AutoregressiveTransform,
    context: Option<&Tensor>,
    rng: &mut R,
    m: usize,
) -> f64 {
    assert!(m >= 1, "need at least one sample");
    let u = diag_sample(base, rng, m);
    let cached = transform.forward(&u, context);
    diag_entropy(base) + cached.log_det.iter().sum::<f64>() / m as f64
}

fn check_cholesky(l: &Matrix, mu: &[f64]) -> Result<()> {
    let n = l.rows;
    if l.cols != n || mu.len() != n {
        return Err(Error::ShapeMismatch { expected: vec![n, n, n], actual: vec![l.rows, l.cols, mu.len()] });
    }
    for i in 0..n {
        let d = l.get(i, i);
        if !(d > 0.0) {
            return Err(Error::invalid(format!("diagonal entry {i} is {d}, must be positive")));
        }
        if d.ln().abs() > LOG_SCALE_CLAMP {
            return Err(Error::invalid(format!("diagonal entry {i} = {d} outside the log-scale clamp")));
        }
        if (i + 1..n).any(|j| l.get(i, j) != 0.0) {
            return Err(Error::invalid("factor must be lower triangular"));
        }
    }
    Ok(())
}

fn made_from_linear(n: usize, weight: impl Fn(usize, usize) -> f64, bias: &[f64], log_scale: &[f64]) -> ParameterSet {
    // column i reads rows j < i
    let w = Tensor::from_fn(&[n, 2 * n], |idx| {
        let (j, col) = (idx / (2 * n), idx % (2 * n));
        if col < n && j < col {
            weight(col, j)
        } else {
            0.0
        }
    });
    let mut b = bias.to_vec();
    b.extend_from_slice(log_scale);
    let mut ps = ParameterSet::new();
    ps.insert("flow.w", w);
    ps.insert("flow.b", Tensor::new(&[2 * n], b));
    ps
}

/// IAF whose pushforward of `N(0, I)` is `N(μ, LLᵀ)`:
/// `ηᵢ = μᵢ + Σ_{j<i} L_ij u_j + L_ii uᵢ`.
pub fn linear_ar_from_cholesky(l: &Matrix, mu: &[f64]) -> Result<AutoregressiveTransform> {
    check_cholesky(l, mu)?;
    let n = l.rows;
    let log_diag: Vec<f64> = l.diag().iter().map(|d| d.ln()).collect();
    let params = made_from_linear(n, |i, j| l.get(i, j), mu, &log_diag);
    Ok(AutoregressiveTransform {
        conditioner: ConditionerSpec::Made { dim: n },
        params,
        prefix: "flow".into(),
        direction: Direction::Iaf,
    })
}

/// MAF realising the same `N(μ, LLᵀ)`: with `A = L⁻¹` and `D = diag L`,
/// `shift(η) = (I − D·A)η + D·A·μ` (strictly lower part acting on `η`).
pub fn linear_maf_from_cholesky(l: &Matrix, mu: &[f64]) -> Result<AutoregressiveTransform> {
    check_cholesky(l, mu)?;
    let n = l.rows;
    let a = l.inverse_lower();
    let d = l.diag();
    let bias: Vec<f64> = (0..n).map(|i| d[i] * (0..=i).map(|j| a.get(i, j) * mu[j]).sum::<f64>()).collect();
    let log_diag: Vec<f64> = d.iter().map(|v| v.ln()).collect();
    let params = made_from_linear(n, |i, j| -d[i] * a.get(i, j), &bias, &log_diag);
    Ok(AutoregressiveTransform {
        conditioner: ConditionerSpec::Made { dim: n },
        params,
        prefix: "flow".into(),
        direction: Direction::Maf,
    })
}
