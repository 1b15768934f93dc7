//! Parameterised networks: the prior producing the base distribution, the
//! low-rank SSN head, the continuous-time flow network and the autoregressive
//! conditioners, plus parameter storage and checkpoints.

mod checkpoint;
mod conditioner;
pub mod layers;
mod params;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conditioner::{made_mask, ConditionerSpec, TokenAttentionSpec};
pub use params::{Bound, ParameterSet};
pub use unet::UNetSpec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inv, Var};
use crate::distributions::SCALE_FLOOR;
use crate::tensor::Tensor;

/// Produces the pixel-independent base `N(μ(x), diag σ²(x))` over `k·h·w` logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorNetworkSpec {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    /// `None` gives free global parameters (unconditional model).
    pub unet: Option<UNetSpec>,
    /// Freezes σ = 1.
    #[serde(default)]
    pub fixed_scale: bool,
}

impl PriorNetworkSpec {
    pub fn unconditional(k: usize, height: usize, width: usize) -> Self {
        PriorNetworkSpec { k, height, width, unet: None, fixed_scale: false }
    }

    /// Default desk-scale encoder-decoder prior.
    pub fn conditional(k: usize, height: usize, width: usize, in_channels: usize) -> Self {
        let unet = UNetSpec {
            in_channels,
            out_channels: 2 * k,
            width: 16,
            mults: vec![1, 2, 2, 2],
            res_blocks: 1,
            attention: vec![],
            time_features: 0,
            groups: 4,
        };
        PriorNetworkSpec { k, height, width, unet: Some(unet), fixed_scale: false }
    }

    pub fn dim(&self) -> usize {
        self.k * self.height * self.width
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, prefix: &str, rng: &mut R) {
        match &self.unet {
            None => {
                ps.zeros(format!("{prefix}.mean"), &[1, self.dim()]);
                if !self.fixed_scale {
                    ps.zeros(format!("{prefix}.scale"), &[1, self.dim()]);
                }
            }
            Some(u) => {
                assert_eq!(u.out_channels, 2 * self.k, "prior network must output 2k channels");
                u.init(ps, &format!("{prefix}.net"), rng)
            }
        }
    }

    /// `(mean, log_scale)`, each `[B, n]` (`[1, n]` when unconditional).
    pub fn forward<'g>(&self, p: &Bound<'g>, prefix: &str, x: Option<Var<'g>>) -> (Var<'g>, Var<'g>) {
        let n = self.dim();
        let (mean, raw) = match &self.unet {
            None => (p.get(&format!("{prefix}.mean")), p.try_get(&format!("{prefix}.scale"))),
            Some(u) => {
                let x = x.expect("conditional prior needs an input image");
                let b = x.shape()[0];
                let out = u.forward(p, &format!("{prefix}.net"), x, None);
                let mean = out.narrow(1, 0, self.k).reshape(&[b, n]);
                let raw = out.narrow(1, self.k, self.k).reshape(&[b, n]);
                (mean, Some(raw))
            }
        };
        let log_scale = match raw {
            Some(r) if !self.fixed_scale => positive(r).ln(),
            _ => mean.scale(0.0),
        };
        (mean, log_scale)
    }
}

/// `softplus(raw + softplus⁻¹(1)) + floor`, so a zero raw value maps to ≈ 1.
pub fn positive(raw: Var<'_>) -> Var<'_> {
    raw.add_scalar(softplus_inv(1.0)).softplus().add_scalar(SCALE_FLOOR)
}

/// Low-rank Gaussian logit head of the SSN baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsnSpec {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub rank: usize,
    pub unet: Option<UNetSpec>,
}

impl SsnSpec {
    pub fn unconditional(k: usize, height: usize, width: usize, rank: usize) -> Self {
        SsnSpec { k, height, width, rank, unet: None }
    }

    pub fn conditional(k: usize, height: usize, width: usize, rank: usize, in_channels: usize) -> Self {
        let mut unet = PriorNetworkSpec::conditional(k, height, width, in_channels).unet.unwrap();
        unet.out_channels = k * (2 + rank);
        SsnSpec { k, height, width, rank, unet: Some(unet) }
    }

    pub fn dim(&self) -> usize {
        self.k * self.height * self.width
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, prefix: &str, rng: &mut R) {
        let n = self.dim();
        match &self.unet {
            None => {
                ps.zeros(format!("{prefix}.mean"), &[1, n]);
                ps.zeros(format!("{prefix}.diag"), &[1, n]);
                ps.randn(format!("{prefix}.factors"), &[n, self.rank], 0.1, rng);
            }
            Some(u) => {
                assert_eq!(u.out_channels, self.k * (2 + self.rank));
                u.init(ps, &format!("{prefix}.net"), rng);
            }
        }
    }

    /// `(mean [B, n], diag [B, n], factors)`; factors are `[n, r]` when
    /// unconditional and `[B, n, r]` otherwise.
    pub fn forward<'g>(&self, p: &Bound<'g>, prefix: &str, x: Option<Var<'g>>) -> (Var<'g>, Var<'g>, Var<'g>) {
        let n = self.dim();
        match &self.unet {
            None => (
                p.get(&format!("{prefix}.mean")),
                positive(p.get(&format!("{prefix}.diag"))),
                p.get(&format!("{prefix}.factors")),
            ),
            Some(u) => {
                let x = x.expect("conditional SSN needs an input image");
                let b = x.shape()[0];
                let out = u.forward(p, &format!("{prefix}.net"), x, None);
                let mean = out.narrow(1, 0, self.k).reshape(&[b, n]);
                let diag = positive(out.narrow(1, self.k, self.k).reshape(&[b, n]));
                let factors =
                    out.narrow(1, 2 * self.k, self.k * self.rank).reshape(&[b, self.rank, n]).permute(&[0, 2, 1]);
                (mean, diag, factors)
            }
        }
    }
}

/// Continuous-time network `η(y_t, t, x)` returning `k` logit channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowNetworkSpec {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub context_channels: usize,
    pub unet: UNetSpec,
}

impl FlowNetworkSpec {
    /// Default small time-conditioned encoder-decoder.
    pub fn default_for(k: usize, height: usize, width: usize, context_channels: usize) -> Self {
        let unet = UNetSpec {
            in_channels: k + context_channels,
            out_channels: k,
            width: 8,
            mults: vec![1, 1],
            res_blocks: 1,
            attention: vec![],
            time_features: 16,
            groups: 4,
        };
        FlowNetworkSpec { k, height, width, context_channels, unet }
    }

    pub fn dim(&self) -> usize {
        self.k * self.height * self.width
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, prefix: &str, rng: &mut R) {
        assert_eq!(self.unet.in_channels, self.k + self.context_channels);
        assert_eq!(self.unet.out_channels, self.k);
        self.unet.init(ps, &format!("{prefix}.net"), rng);
    }

    /// Logits `[B, k, h·w]` for state `y_t` `[B, n]` at times `t` (one per row).
    pub fn forward<'g>(&self, p: &Bound<'g>, prefix: &str, y_t: Var<'g>, t: &[f64], x: Option<Var<'g>>) -> Var<'g> {
        let b = y_t.shape()[0];
        assert_eq!(t.len(), b, "one time value per batch row");
        let (k, h, w) = (self.k, self.height, self.width);
        let mut input = y_t.reshape(&[b, k, h, w]);
        if self.context_channels > 0 {
            let x = x.expect("flow network expects a context image");
            input = Var::concat(&[input, x], 1);
        }
        self.unet.forward(p, &format!("{prefix}.net"), input, Some(t)).reshape(&[b, k, h * w])
    }
}

/// Builds a `[B, c, h, w]` tensor from per-image `f32` pixels.
pub fn image_batch(images: &[&[f32]], c: usize, h: usize, w: usize) -> Tensor {
    let data: Vec<f64> = images.iter().flat_map(|im| im.iter().map(|&v| v as f64)).collect();
    Tensor::new(&[images.len(), c, h, w], data)
}
