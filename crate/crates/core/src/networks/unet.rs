use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv, group_norm, init_conv, init_group_norm, init_layer_norm, init_attention, init_linear, layer_norm, linear,
    self_attention, sinusoidal_embedding,
};
use super::params::{Bound, ParameterSet};
use crate::autodiff::Var;

/// Encoder-decoder with skip connections, residual blocks, group norm and
/// SiLU activations. Every stage but the last halves the resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub mults: Vec<usize>,
    pub res_blocks: usize,
    /// Stage indices with a spatial self-attention block after the residual blocks.
    #[serde(default)]
    pub attention: Vec<usize>,
    /// Sinusoidal time-feature size; 0 disables time conditioning.
    #[serde(default)]
    pub time_features: usize,
    pub groups: usize,
}

impl UNetSpec {
    pub fn stage_channels(&self) -> Vec<usize> {
        self.mults.iter().map(|m| m * self.width).collect()
    }

    fn time_dim(&self) -> usize {
        2 * self.width
    }

    /// Spatial sides must be divisible by this.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.mults.len() - 1)
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, prefix: &str, rng: &mut R) {
        assert!(!self.mults.is_empty() && self.res_blocks >= 1);
        let chans = self.stage_channels();
        let td = if self.time_features > 0 { Some(self.time_dim()) } else { None };
        if let Some(td) = td {
            init_linear(ps, &format!("{prefix}.time0"), self.time_features, td, false, rng);
            init_linear(ps, &format!("{prefix}.time1"), td, td, false, rng);
        }
        init_conv(ps, &format!("{prefix}.stem"), self.in_channels, chans[0], 3, false, rng);
        let mut c = chans[0];
        for (s, &cs) in chans.iter().enumerate() {
            for r in 0..self.res_blocks {
                init_res_block(ps, &format!("{prefix}.down{s}.res{r}"), c, cs, td, rng);
                c = cs;
            }
            if self.attention.contains(&s) {
                init_spatial_attention(ps, &format!("{prefix}.down{s}.attn"), c, rng);
            }
        }
        init_res_block(ps, &format!("{prefix}.mid"), c, c, td, rng);
        for (s, &cs) in chans.iter().enumerate().rev() {
            init_res_block(ps, &format!("{prefix}.up{s}.res"), c + cs, cs, td, rng);
            c = cs;
            if self.attention.contains(&s) {
                init_spatial_attention(ps, &format!("{prefix}.up{s}.attn"), c, rng);
            }
        }
        init_group_norm(ps, &format!("{prefix}.out_norm"), c);
        // zero head: the untrained network outputs exactly zero
        init_conv(ps, &format!("{prefix}.out"), c, self.out_channels, 3, true, rng);
    }

    /// `x`: `[B, in, h, w]`, `t`: one time per batch row when time-conditioned.
    pub fn forward<'g>(&self, p: &Bound<'g>, prefix: &str, x: Var<'g>, t: Option<&[f64]>) -> Var<'g> {
        let temb = match (self.time_features, t) {
            (0, _) => None,
            (f, Some(t)) => {
                let feats = x.graph().constant(sinusoidal_embedding(t, f));
                let h = linear(p, &format!("{prefix}.time0"), feats).silu();
                Some(linear(p, &format!("{prefix}.time1"), h))
            }
            (_, None) => panic!("time-conditioned network called without t"),
        };
        let g = self.groups;
        let mut h = conv(p, &format!("{prefix}.stem"), x);
        let mut skips = Vec::with_capacity(self.mults.len());
        let last = self.mults.len() - 1;
        for s in 0..=last {
            for r in 0..self.res_blocks {
                h = res_block(p, &format!("{prefix}.down{s}.res{r}"), h, temb, g);
            }
            if self.attention.contains(&s) {
                h = spatial_attention(p, &format!("{prefix}.down{s}.attn"), h);
            }
            skips.push(h);
            if s < last {
                h = h.avg_pool2();
            }
        }
        h = res_block(p, &format!("{prefix}.mid"), h, temb, g);
        for s in (0..=last).rev() {
            if s < last {
                h = h.upsample2();
            }
            h = Var::concat(&[h, skips[s]], 1);
            h = res_block(p, &format!("{prefix}.up{s}.res"), h, temb, g);
            if self.attention.contains(&s) {
                h = spatial_attention(p, &format!("{prefix}.up{s}.attn"), h);
            }
        }
        let h = group_norm(p, &format!("{prefix}.out_norm"), h, g).silu();
        conv(p, &format!("{prefix}.out"), h)
    }
}

fn init_res_block<R: Rng + ?Sized>(
    ps: &mut ParameterSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    time_dim: Option<usize>,
    rng: &mut R,
) {
    init_group_norm(ps, &format!("{prefix}.norm1"), cin);
    init_conv(ps, &format!("{prefix}.conv1"), cin, cout, 3, false, rng);
    if let Some(td) = time_dim {
        init_linear(ps, &format!("{prefix}.time"), td, cout, false, rng);
    }
    init_group_norm(ps, &format!("{prefix}.norm2"), cout);
    init_conv(ps, &format!("{prefix}.conv2"), cout, cout, 3, false, rng);
    if cin != cout {
        init_conv(ps, &format!("{prefix}.skip"), cin, cout, 1, false, rng);
    }
}

fn res_block<'g>(p: &Bound<'g>, prefix: &str, x: Var<'g>, temb: Option<Var<'g>>, groups: usize) -> Var<'g> {
    let mut h = group_norm(p, &format!("{prefix}.norm1"), x, groups).silu();
    h = conv(p, &format!("{prefix}.conv1"), h);
    if let Some(te) = temb {
        let proj = linear(p, &format!("{prefix}.time"), te.silu());
        let s = proj.shape();
        h = h + proj.reshape(&[s[0], s[1], 1, 1]);
    }
    h = group_norm(p, &format!("{prefix}.norm2"), h, groups).silu();
    h = conv(p, &format!("{prefix}.conv2"), h);
    let skip = match p.try_get(&format!("{prefix}.skip.w")) {
        Some(_) => conv(p, &format!("{prefix}.skip"), x),
        None => x,
    };
    skip + h
}

fn init_spatial_attention<R: Rng + ?Sized>(ps: &mut ParameterSet, prefix: &str, c: usize, rng: &mut R) {
    init_layer_norm(ps, &format!("{prefix}.norm"), c);
    init_attention(ps, &format!("{prefix}.att"), c, rng);
}

fn spatial_attention<'g>(p: &Bound<'g>, prefix: &str, x: Var<'g>) -> Var<'g> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let tokens = x.reshape(&[b, c, h * w]).permute(&[0, 2, 1]);
    let att = self_attention(p, &format!("{prefix}.att"), layer_norm(p, &format!("{prefix}.norm"), tokens), 1, false);
    x + att.permute(&[0, 2, 1]).reshape(&[b, c, h, w])
}
