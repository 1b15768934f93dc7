//! Continuous-time flow over logit space: straight paths from a base sample
//! `u` to a one-hot label `y`, and ODE sampling with the velocity
//! `E[y | y_t] − u`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::networks::{Bound, FlowNetworkSpec, ParameterSet};
use crate::tensor::Tensor;

/// A point on the path `y_t = (1 − t)·u + t·y`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathPoint {
    pub y_t: Tensor,
    pub t: f64,
    pub u: Tensor,
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { expected: a.shape().to_vec(), actual: b.shape().to_vec() });
    }
    Ok(())
}

pub fn interpolate(u: &Tensor, y: &Tensor, t: f64) -> Result<PathPoint> {
    check_time(t)?;
    check_shapes(u, y)?;
    let y_t = u.zip_map(y, |a, b| (1.0 - t) * a + t * b);
    Ok(PathPoint { y_t, t, u: u.clone() })
}

/// Path points on the tape with one time per row: `u`, `y` are `[B, n]`.
pub fn interpolate_var<'g>(u: Var<'g>, y: Var<'g>, t: &[f64]) -> Var<'g> {
    let b = u.shape()[0];
    assert_eq!(t.len(), b, "one time per row");
    let tt = u.graph().constant(Tensor::new(&[b, 1], t.to_vec()));
    let one_minus = u.graph().constant(Tensor::new(&[b, 1], t.iter().map(|t| 1.0 - t).collect()));
    u * one_minus + y * tt
}

/// `expectation − u`.
pub fn velocity(expectation: &Tensor, u: &Tensor) -> Result<Tensor> {
    check_shapes(expectation, u)?;
    Ok(expectation.zip_map(u, |e, u| e - u))
}

/// Per-pixel class probabilities `[B, n]` (class-major rows) from logits
/// `[B, k, d]` on the tape.
pub fn predict_expectation_var<'g>(
    spec: &FlowNetworkSpec,
    p: &Bound<'g>,
    prefix: &str,
    y_t: Var<'g>,
    t: &[f64],
    x: Option<Var<'g>>,
) -> Var<'g> {
    let b = y_t.shape()[0];
    spec.forward(p, prefix, y_t, t, x).softmax(1).reshape(&[b, spec.dim()])
}

/// Anything that maps `(y_t, t)` to `E[y | y_t]` for a batch `[B, n]`.
pub trait ExpectationModel {
    fn classes(&self) -> usize;
    fn expectation(&self, y_t: &Tensor, t: f64) -> Tensor;
}

/// The flow network with fixed parameters and optional conditioning images
/// (one per batch row).
pub struct NetworkExpectation<'a> {
    pub spec: &'a FlowNetworkSpec,
    pub params: &'a ParameterSet,
    pub prefix: &'a str,
    pub context: Option<&'a Tensor>,
}

impl ExpectationModel for NetworkExpectation<'_> {
    fn classes(&self) -> usize {
        self.spec.k
    }

    fn expectation(&self, y_t: &Tensor, t: f64) -> Tensor {
        let g = Graph::new();
        let p = self.params.bind_const(&g);
        let b = y_t.shape()[0];
        let ctx = self.context.map(|c| g.constant(c.clone()));
        let out = predict_expectation_var(self.spec, &p, self.prefix, g.constant(y_t.clone()), &vec![t; b], ctx);
        (*out.value()).clone()
    }
}

pub fn predict_expectation(model: &dyn ExpectationModel, y_t: &Tensor, t: f64) -> Result<Tensor> {
    check_time(t)?;
    Ok(model.expectation(y_t, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SolverConfig {
    Euler { steps: usize },
    Dopri5 { atol: f64, rtol: f64 },
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::Euler { steps: 50 }
    }
}

impl SolverConfig {
    pub fn dopri5(tol: f64) -> Self {
        SolverConfig::Dopri5 { atol: tol, rtol: tol }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SolverConfig::Euler { steps } if steps == 0 => Err(Error::Config("Euler needs at least one step".into())),
            SolverConfig::Dopri5 { atol, rtol } if !(atol > 0.0 && rtol > 0.0) => {
                Err(Error::Config("solver tolerances must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Integration {
    /// Final state `y₁`, `[B, n]`.
    pub state: Tensor,
    /// `E[y | y₁]` at the final state.
    pub expectation: Tensor,
    /// Per-row, per-pixel argmax of the final expectation.
    pub classes: Vec<Vec<usize>>,
    /// Network evaluations used by the solve, excluding the readout.
    pub evaluations: usize,
}

/// Integrates `dy/dt = E[y | y_t] − u` from `y₀ = u` over `[0, 1]`.
pub fn integrate(u: &Tensor, model: &dyn ExpectationModel, solver: &SolverConfig) -> Result<Integration> {
    solver.validate()?;
    if !u.all_finite() {
        return Err(Error::invalid("base sample is not finite"));
    }
    let mut evaluations = 0;
    let mut rhs = |t: f64, y: &Tensor| {
        evaluations += 1;
        model.expectation(y, t).zip_map(u, |e, u| e - u)
    };
    let state = match *solver {
        SolverConfig::Euler { steps } => euler(&mut rhs, u.clone(), steps),
        SolverConfig::Dopri5 { atol, rtol } => dopri5(&mut rhs, u.clone(), 0.0, 1.0, atol, rtol)?,
    };
    if !state.all_finite() {
        return Err(Error::invalid("ODE state overflowed"));
    }
    let expectation = model.expectation(&state, 1.0);
    let classes = argmax_classes(&expectation, model.classes());
    Ok(Integration { state, expectation, classes, evaluations })
}

/// Per-row argmax over classes for class-major rows `[B, k·d]`.
pub fn argmax_classes(probs: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = probs.shape()[1];
    let d = n / k;
    probs
        .data()
        .chunks(n)
        .map(|row| {
            (0..d)
                .map(|j| {
                    let mut best = 0;
                    for c in 1..k {
                        if row[c * d + j] > row[best * d + j] {
                            best = c;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

/// Fixed-step Euler on the grid `{0, 1/T, …}`.
pub fn euler(f: &mut dyn FnMut(f64, &Tensor) -> Tensor, y0: Tensor, steps: usize) -> Tensor {
    let h = 1.0 / steps as f64;
    let mut y = y0;
    for i in 0..steps {
        let v = f(i as f64 * h, &y);
        y = y.zip_map(&v, |a, b| a + h * b);
    }
    y
}

// Dormand–Prince 5(4) tableau
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

const MIN_STEP: f64 = 1e-12;

/// Adaptive Dormand–Prince with first-same-as-last stages and an RMS error
/// norm scaled by `atol + rtol·max(|y|, |y_new|)`.
pub fn dopri5(
    f: &mut dyn FnMut(f64, &Tensor) -> Tensor,
    y0: Tensor,
    t0: f64,
    t1: f64,
    atol: f64,
    rtol: f64,
) -> Result<Tensor> {
    let n = y0.len() as f64;
    let norm = |v: &Tensor, scale: &Tensor| -> f64 {
        (v.data().iter().zip(scale.data()).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n).sqrt()
    };
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);

    // initial step from the local scale of the solution and its derivative
    let sc = y.map(|v| atol + rtol * v.abs());
    let (d0, d1) = (norm(&y, &sc), norm(&k1, &sc));
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(t1 - t0);

    while t < t1 {
        if t + h > t1 {
            h = t1 - t;
        }
        let mut ks: Vec<Tensor> = vec![k1.clone()];
        for s in 1..7 {
            let mut yi = y.clone();
            for (j, a) in A[s].iter().enumerate() {
                if *a != 0.0 {
                    yi = yi.zip_map(&ks[j], |y, k| y + h * a * k);
                }
            }
            ks.push(f(t + C[s] * h, &yi));
        }
        let combine = |b: &[f64; 7]| {
            let mut out = y.clone();
            for (j, bj) in b.iter().enumerate() {
                if *bj != 0.0 {
                    out = out.zip_map(&ks[j], |o, k| o + h * bj * k);
                }
            }
            out
        };
        let y5 = combine(&B5);
        let y4 = combine(&B4);
        let scale = Tensor::from_fn(y.shape(), |i| atol + rtol * y.data()[i].abs().max(y5.data()[i].abs()));
        let err = norm(&y5.zip_map(&y4, |a, b| a - b), &scale);
        if !err.is_finite() {
            h *= 0.2;
        } else if err <= 1.0 {
            t += h;
            y = y5;
            k1 = ks.pop().expect("seven stages");
            let factor = if err == 0.0 { 10.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 10.0) };
            h *= factor;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
        if h < MIN_STEP && t < t1 {
            return Err(Error::StepSizeUnderflow { t });
        }
    }
    Ok(y)
}
