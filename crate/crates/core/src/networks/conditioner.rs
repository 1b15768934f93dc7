use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{init_attention, init_layer_norm, init_linear, layer_norm, linear, self_attention};
use super::params::{Bound, ParameterSet};
use crate::autodiff::Var;
use crate::flows_discrete::{patch_groups, patchify_var, unpatchify_var};
use crate::tensor::Tensor;

/// Autoregressive conditioner producing a shift and a log-scale for every
/// dimension of a flattened `(k, h, w)` field. Output `i` depends only on
/// inputs that precede it in the raster ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionerSpec {
    /// Single masked linear layer; dimension `i` sees inputs `j < i`.
    Made { dim: usize },
    /// Causal transformer over raster-ordered patch tokens.
    TokenAttention(TokenAttentionSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAttentionSpec {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub patch: [usize; 2],
    pub embed: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Channels of the conditioning image; 0 for none.
    #[serde(default)]
    pub context_channels: usize,
}

impl TokenAttentionSpec {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch[0]) * (self.width / self.patch[1])
    }

    pub fn token_dim(&self) -> usize {
        self.k * self.patch[0] * self.patch[1]
    }
}

impl ConditionerSpec {
    pub fn dim(&self) -> usize {
        match self {
            ConditionerSpec::Made { dim } => *dim,
            ConditionerSpec::TokenAttention(s) => s.k * s.height * s.width,
        }
    }

    /// Groups of flat dimensions that can be solved together, in order:
    /// outputs in a group depend only on inputs in earlier groups.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        match self {
            ConditionerSpec::Made { dim } => (0..*dim).map(|i| vec![i]).collect(),
            ConditionerSpec::TokenAttention(s) => patch_groups(s.k, s.height, s.width, s.patch),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, prefix: &str, rng: &mut R) {
        match self {
            ConditionerSpec::Made { dim } => {
                // starts as the identity transform
                ps.zeros(format!("{prefix}.w"), &[*dim, 2 * dim]);
                ps.zeros(format!("{prefix}.b"), &[2 * dim]);
            }
            ConditionerSpec::TokenAttention(s) => {
                assert!(s.height % s.patch[0] == 0 && s.width % s.patch[1] == 0, "patch must tile the field");
                let (p, e) = (s.token_dim(), s.embed);
                ps.randn(format!("{prefix}.start"), &[1, 1, p], 1.0, rng);
                ps.randn(format!("{prefix}.pos"), &[s.tokens(), e], 0.1, rng);
                init_linear(ps, &format!("{prefix}.embed"), p, e, false, rng);
                if s.context_channels > 0 {
                    let cp = s.context_channels * s.patch[0] * s.patch[1];
                    init_linear(ps, &format!("{prefix}.context"), cp, e, false, rng);
                }
                for b in 0..s.blocks {
                    init_layer_norm(ps, &format!("{prefix}.block{b}.norm1"), e);
                    init_attention(ps, &format!("{prefix}.block{b}.att"), e, rng);
                    init_layer_norm(ps, &format!("{prefix}.block{b}.norm2"), e);
                    init_linear(ps, &format!("{prefix}.block{b}.mlp0"), e, 2 * e, false, rng);
                    init_linear(ps, &format!("{prefix}.block{b}.mlp1"), 2 * e, e, false, rng);
                }
                init_layer_norm(ps, &format!("{prefix}.head_norm"), e);
                init_linear(ps, &format!("{prefix}.head"), e, 2 * p, true, rng);
            }
        }
    }

    /// Raw `(shift, log_scale)`, each `[B, n]`, for input `[B, n]`.
    /// `context` is `[B, c, h, w]` with rows matching `input`.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        prefix: &str,
        input: Var<'g>,
        context: Option<Var<'g>>,
    ) -> (Var<'g>, Var<'g>) {
        let g = input.graph();
        let b = input.shape()[0];
        match self {
            ConditionerSpec::Made { dim } => {
                let n = *dim;
                let w = p.get(&format!("{prefix}.w")) * g.constant(made_mask(n));
                let out = input.matmul(w) + p.get(&format!("{prefix}.b"));
                (out.narrow(1, 0, n), out.narrow(1, n, n))
            }
            ConditionerSpec::TokenAttention(s) => {
                let (t, pd) = (s.tokens(), s.token_dim());
                let tokens = patchify_var(input.reshape(&[b, s.k, s.height, s.width]), s.patch);
                let start = p.get(&format!("{prefix}.start")) + g.constant(Tensor::zeros(&[b, 1, pd]));
                let shifted = if t > 1 { Var::concat(&[start, tokens.narrow(1, 0, t - 1)], 1) } else { start };
                let mut h = linear(p, &format!("{prefix}.embed"), shifted) + p.get(&format!("{prefix}.pos"));
                if s.context_channels > 0 {
                    let ctx = context.expect("conditioner expects a context image");
                    h = h + linear(p, &format!("{prefix}.context"), patchify_var(ctx, s.patch));
                }
                for blk in 0..s.blocks {
                    let q = format!("{prefix}.block{blk}");
                    h = h + self_attention(p, &format!("{q}.att"), layer_norm(p, &format!("{q}.norm1"), h), s.heads, true);
                    let m = linear(p, &format!("{q}.mlp0"), layer_norm(p, &format!("{q}.norm2"), h)).silu();
                    h = h + linear(p, &format!("{q}.mlp1"), m);
                }
                let out = linear(p, &format!("{prefix}.head"), layer_norm(p, &format!("{prefix}.head_norm"), h));
                let field = |o: usize| {
                    unpatchify_var(out.narrow(2, o, pd), s.k, s.height, s.width, s.patch).reshape(&[b, self.dim()])
                };
                (field(0), field(pd))
            }
        }
    }
}

/// `[n, 2n]` mask: column `i` (and `n + i`) admits input rows `j < i`.
pub fn made_mask(n: usize) -> Tensor {
    Tensor::from_fn(&[n, 2 * n], |idx| {
        let (j, col) = (idx / (2 * n), idx % (2 * n));
        if j < col % n {
            1.0
        } else {
            0.0
        }
    })
}
