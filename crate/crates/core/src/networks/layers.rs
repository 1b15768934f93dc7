//! Layer building blocks. Each layer is a pair of functions: one registers its
//! parameters under a name prefix, the other applies it to bound parameters.

use rand::Rng;

use super::params::{Bound, ParameterSet};
use crate::autodiff::Var;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

fn key(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

/// `[fan_in, fan_out]` weight and bias; `zero` gives an all-zero layer.
pub fn init_linear<R: Rng + ?Sized>(ps: &mut ParameterSet, prefix: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut R) {
    let std = if zero { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
    ps.randn(key(prefix, "w"), &[fan_in, fan_out], std, rng);
    ps.zeros(key(prefix, "b"), &[fan_out]);
}

/// Applies over the last axis of `x`.
pub fn linear<'g>(p: &Bound<'g>, prefix: &str, x: Var<'g>) -> Var<'g> {
    x.matmul(p.get(&key(prefix, "w"))) + p.get(&key(prefix, "b"))
}

pub fn init_conv<R: Rng + ?Sized>(
    ps: &mut ParameterSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    zero: bool,
    rng: &mut R,
) {
    let fan_in = cin * kernel * kernel;
    let std = if zero { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
    ps.randn(key(prefix, "w"), &[cout, cin, kernel, kernel], std, rng);
    ps.zeros(key(prefix, "b"), &[cout]);
}

/// Same-size convolution (odd kernels).
pub fn conv<'g>(p: &Bound<'g>, prefix: &str, x: Var<'g>) -> Var<'g> {
    let w = p.get(&key(prefix, "w"));
    let pad = w.shape()[2] / 2;
    x.conv2d(w, Some(p.get(&key(prefix, "b"))), pad)
}

/// Group norm affine parameters, stored `[c, 1, 1]` to broadcast over `[B, c, h, w]`.
pub fn init_group_norm(ps: &mut ParameterSet, prefix: &str, channels: usize) {
    ps.insert(key(prefix, "gamma"), Tensor::ones(&[channels, 1, 1]));
    ps.zeros(key(prefix, "beta"), &[channels, 1, 1]);
}

/// Largest divisor of `channels` not exceeding `groups`.
pub fn group_count(channels: usize, groups: usize) -> usize {
    (1..=groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

pub fn group_norm<'g>(p: &Bound<'g>, prefix: &str, x: Var<'g>, groups: usize) -> Var<'g> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let g = group_count(c, groups);
    let xg = x.reshape(&[b, g, (c / g) * h * w]);
    let mean = xg.mean_axis(2, true);
    let centred = xg - mean;
    let var = centred.square().mean_axis(2, true);
    let normed = (centred / var.add_scalar(NORM_EPS).sqrt()).reshape(&[b, c, h, w]);
    normed * p.get(&key(prefix, "gamma")) + p.get(&key(prefix, "beta"))
}

pub fn init_layer_norm(ps: &mut ParameterSet, prefix: &str, dim: usize) {
    ps.insert(key(prefix, "gamma"), Tensor::ones(&[dim]));
    ps.zeros(key(prefix, "beta"), &[dim]);
}

/// Normalises over the last axis.
pub fn layer_norm<'g>(p: &Bound<'g>, prefix: &str, x: Var<'g>) -> Var<'g> {
    let last = x.shape().len() - 1;
    let centred = x - x.mean_axis(last, true);
    let var = centred.square().mean_axis(last, true);
    centred / var.add_scalar(NORM_EPS).sqrt() * p.get(&key(prefix, "gamma")) + p.get(&key(prefix, "beta"))
}

/// Sinusoidal features `[sin(t·f_i), cos(t·f_i)]` with geometric frequencies.
pub fn sinusoidal_embedding(t: &[f64], dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dimension must be even");
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            // t ∈ [0, 1]; frequencies span 1 … 1000
            (1000f64.ln() * frac).exp()
        })
        .collect();
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        out.extend(freqs.iter().map(|f| (ti * f).sin()));
        out.extend(freqs.iter().map(|f| (ti * f).cos()));
    }
    Tensor::new(&[t.len(), dim], out)
}

pub fn init_attention<R: Rng + ?Sized>(ps: &mut ParameterSet, prefix: &str, dim: usize, rng: &mut R) {
    init_linear(ps, &key(prefix, "qkv"), dim, 3 * dim, false, rng);
    init_linear(ps, &key(prefix, "proj"), dim, dim, false, rng);
}

/// Multi-head self-attention over `[B, T, E]`; `causal` lets token `t`
/// attend to tokens `≤ t` only.
pub fn self_attention<'g>(p: &Bound<'g>, prefix: &str, x: Var<'g>, heads: usize, causal: bool) -> Var<'g> {
    let s = x.shape();
    let (b, t, e) = (s[0], s[1], s[2]);
    assert!(e % heads == 0, "width {e} not divisible by {heads} heads");
    let hd = e / heads;
    let qkv = linear(p, &key(prefix, "qkv"), x);
    let split = |i: usize| qkv.narrow(2, i * e, e).reshape(&[b, t, heads, hd]).permute(&[0, 2, 1, 3]);
    let (q, k, v) = (split(0), split(1), split(2));
    let mut scores = q.matmul(k.t()).scale(1.0 / (hd as f64).sqrt());
    if causal {
        scores = scores + x.graph().constant(causal_mask(t));
    }
    let att = scores.softmax(3);
    let out = att.matmul(v).permute(&[0, 2, 1, 3]).reshape(&[b, t, e]);
    linear(p, &key(prefix, "proj"), out)
}

/// Additive mask with `-1e30` above the diagonal.
pub fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn(&[t, t], |i| if i % t > i / t { -1e30 } else { 0.0 })
}

/// Repeats every leading row `m` times: `[B, ..] → [B·m, ..]`.
pub fn repeat_rows<'g>(x: Var<'g>, m: usize) -> Var<'g> {
    if m == 1 {
        return x;
    }
    let s = x.shape();
    let rest: usize = s[1..].iter().product();
    let ones = x.graph().constant(Tensor::ones(&[1, m, 1]));
    let mut out_shape = vec![s[0] * m];
    out_shape.extend_from_slice(&s[1..]);
    (x.reshape(&[s[0], 1, rest]) * ones).reshape(&out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::autodiff::Graph;

    #[test]
    fn group_norm_normalises_each_group() {
        let mut ps = ParameterSet::new();
        init_group_norm(&mut ps, "gn", 4);
        let g = Graph::new();
        let p = ps.bind_const(&g);
        let x = Tensor::randn(&[2, 4, 3, 3], 2.0, &mut ChaCha8Rng::seed_from_u64(0)).map(|v| v + 5.0);
        let y = group_norm(&p, "gn", g.constant(x), 2).value();
        for b in 0..2 {
            for grp in 0..2 {
                let s = &y.data()[(b * 4 + grp * 2) * 9..(b * 4 + grp * 2 + 2) * 9];
                let m: f64 = s.iter().sum::<f64>() / 18.0;
                let v: f64 = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 18.0;
                assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn causal_attention_ignores_future_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterSet::new();
        init_attention(&mut ps, "att", 4, &mut rng);
        let x = Tensor::randn(&[1, 5, 4], 1.0, &mut rng);
        let mut x2 = x.clone();
        x2.data_mut()[3 * 4 + 1] += 1.0;
        let run = |x: &Tensor| {
            let g = Graph::new();
            let p = ps.bind_const(&g);
            (*self_attention(&p, "att", g.constant(x.clone()), 2, true).value()).clone()
        };
        let (a, b) = (run(&x), run(&x2));
        assert_eq!(a.data()[..12], b.data()[..12]);
        assert_ne!(a.data()[12..16], b.data()[12..16]);
    }

    #[test]
    fn repeat_rows_layout() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let r = repeat_rows(x, 3).value();
        assert_eq!(r.shape(), &[6, 2]);
        assert_eq!(r.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn sinusoidal_embedding_distinguishes_endpoints() {
        let e = sinusoidal_embedding(&[0.0, 1.0], 8);
        assert_eq!(e.shape(), &[2, 8]);
        assert_ne!(e.data()[..8], e.data()[8..]);
        assert_eq!(e.data()[4], 1.0);
    }
}
