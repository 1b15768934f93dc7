use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named tensors with an exponential-moving-average shadow.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    live: BTreeMap<String, Tensor>,
    ema: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// Parameters registered as leaves of one graph.
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Var<'g> {
        *self.vars.get(name).unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g>> {
        self.vars.get(name).copied()
    }

    /// Gradients keyed by parameter name.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    /// Registers a tensor; the shadow starts equal to it.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.live.contains_key(&name), "duplicate parameter {name}");
        self.ema.insert(name.clone(), t.clone());
        self.live.insert(name, t);
    }

    pub fn randn<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) {
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.live.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.live.get_mut(name)
    }

    pub fn ema(&self, name: &str) -> Option<&Tensor> {
        self.ema.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.live.keys()
    }

    pub fn live(&self) -> &BTreeMap<String, Tensor> {
        &self.live
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor> {
        &self.ema
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    /// Total number of scalar parameters, optionally restricted to a prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.live.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// Binds the live tensors as differentiable leaves.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound { vars: self.live.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect() }
    }

    /// Binds the live tensors as constants.
    pub fn bind_const<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound { vars: self.live.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect() }
    }

    /// Binds the EMA shadow as constants.
    pub fn bind_ema<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound { vars: self.ema.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect() }
    }

    /// Copy whose live tensors are this set's EMA shadow.
    pub fn ema_snapshot(&self) -> ParameterSet {
        ParameterSet { live: self.ema.clone(), ema: self.ema.clone(), step: self.step }
    }

    /// `shadow ← rate·shadow + (1 − rate)·live`.
    pub fn ema_update(&mut self, rate: f64) {
        assert!((0.0..1.0).contains(&rate), "EMA rate {rate} outside [0, 1)");
        for (name, live) in &self.live {
            let shadow = self.ema.get_mut(name).expect("shadow mirrors live set");
            for (s, l) in shadow.data_mut().iter_mut().zip(live.data()) {
                *s = rate * *s + (1.0 - rate) * l;
            }
        }
    }

    /// Replaces both live and shadow tensors; shapes must match.
    pub fn load(&mut self, live: BTreeMap<String, Tensor>, ema: BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for (src, dst) in [(&live, &self.live), (&ema, &self.ema)] {
            if src.len() != dst.len() {
                return Err(Error::invalid(format!("expected {} tensors, got {}", dst.len(), src.len())));
            }
            for (name, t) in dst {
                let other = src.get(name).ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
                if other.shape() != t.shape() {
                    return Err(Error::ShapeMismatch { expected: t.shape().to_vec(), actual: other.shape().to_vec() });
                }
            }
        }
        self.live = live;
        self.ema = ema;
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_rate_zero_copies_live() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(&[3]));
        *p.get_mut("a").unwrap() = Tensor::new(&[3], vec![1.0, 2.0, 3.0]);
        p.ema_update(0.0);
        assert_eq!(p.ema("a").unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn ema_geometric_convergence() {
        let c = 2.5;
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(&[1]));
        *p.get_mut("a").unwrap() = Tensor::new(&[1], vec![c]);
        let rate: f64 = 0.999;
        for n in 1..=1000 {
            p.ema_update(rate);
            if n == 10 {
                let err = c - p.ema("a").unwrap().data()[0];
                assert!((err - c * rate.powi(10)).abs() < 1e-12);
            }
        }
        let got = p.ema("a").unwrap().data()[0];
        assert!((got - c * (1.0 - rate.powi(1000))).abs() < 1e-6);
        assert!((got / c - 0.6323).abs() < 1e-4);
    }

    #[test]
    fn shadow_mirrors_live_names_and_shapes() {
        let mut p = ParameterSet::new();
        p.zeros("x.w", &[2, 3]);
        p.zeros("x.b", &[3]);
        assert!(p.live().iter().zip(p.shadow()).all(|((a, s), (b, t))| a == b && s.shape() == t.shape()));
        assert_eq!(p.count("x."), 9);
    }
}
