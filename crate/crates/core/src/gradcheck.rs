//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// One-sided differences disagreeing by more than this (relative to
/// `max(1, |numeric|)`) mark a coordinate whose probe straddles a kink of a
/// piecewise-linear op; such coordinates are counted but not scored.
pub const KINK_TOL: f64 = 1e-2;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    /// Largest `|analytic - numeric| / max(1, |numeric|)` seen.
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude among checked coordinates.
    pub max_abs_grad: f64,
    /// Coordinates skipped because the probe crossed a kink.
    pub kinks: usize,
}

impl GradReport {
    fn record(&mut self, analytic: f64, up: f64, center: f64, down: f64) {
        let numeric = (up - down) / (2.0 * FD_STEP);
        let forward = (up - center) / FD_STEP;
        let backward = (center - down) / FD_STEP;
        if (forward - backward).abs() > KINK_TOL * numeric.abs().max(1.0) {
            self.kinks += 1;
            return;
        }
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(err);
        self.max_abs_grad = self.max_abs_grad.max(analytic.abs());
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_grad = self.max_abs_grad.max(other.max_abs_grad);
        self.kinks += other.kinks;
    }
}

fn pick(n: usize, samples: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if samples >= n {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, samples).into_vec();
        v.sort_unstable();
        v
    }
}

fn eval_scalar(tape: &Tape, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::Usage("gradient check needs a scalar loss".into()));
    }
    Ok(v.item())
}

/// Checks d loss / d input at up to `samples` coordinates of every input.
/// `f` maps leaves holding `inputs` to a scalar loss.
pub fn check_inputs<F>(inputs: &[Tensor], samples: usize, seed: u64, mut f: F) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &leaves)?;
    let center = eval_scalar(&tape, loss)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let mut probe = |shifted: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = shifted.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let l = f(&mut t, &vars)?;
        eval_scalar(&t, l)
    };
    for (i, input) in inputs.iter().enumerate() {
        for k in pick(input.numel(), samples, &mut rng) {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[k] = input.data()[k] + FD_STEP;
            let up = probe(&shifted)?;
            shifted[i].data_mut()[k] = input.data()[k] - FD_STEP;
            let down = probe(&shifted)?;
            report.record(analytic[i].data()[k], up, center, down);
        }
    }
    Ok(report)
}

/// Checks d loss / d param for every trainable parameter of `model`.
pub fn check_params<M, F>(model: &mut M, samples: usize, seed: u64, mut f: F) -> Result<GradReport>
where
    M: Module,
    F: FnMut(&mut M, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(model, &mut tape)?;
    let center = eval_scalar(&tape, loss)?;
    tape.backward(loss)?;
    let mut analytic: Vec<Option<Tensor>> = Vec::new();
    model.visit(&mut |p: &Param| {
        analytic.push(if p.trainable {
            Some(tape.param_grad(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        } else {
            None
        })
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for (pi, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for k in pick(grad.numel(), samples, &mut rng) {
            let mut values = [0.0; 2];
            for (slot, delta) in [FD_STEP, -FD_STEP].into_iter().enumerate() {
                let mut orig = 0.0;
                nth_param(model, pi, |p| {
                    orig = p.value.data()[k];
                    p.value.data_mut()[k] = orig + delta;
                });
                let mut t = Tape::new();
                let l = f(model, &mut t);
                nth_param(model, pi, |p| p.value.data_mut()[k] = orig);
                values[slot] = eval_scalar(&t, l?)?;
            }
            report.record(grad.data()[k], values[0], center, values[1]);
        }
    }
    Ok(report)
}

fn nth_param<M: Module>(model: &mut M, n: usize, mut f: impl FnMut(&mut Param)) {
    let mut i = 0;
    model.visit_mut(&mut |p| {
        if i == n {
            f(p);
        }
        i += 1;
    });
}
