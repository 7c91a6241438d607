//! Central-difference verification of analytic gradients.

use rand::Rng;

use super::layers::{ForwardCtx, Stack};
use super::loss::softmax_cross_entropy;
use super::tensor::{Parameter, Tensor};
use crate::error::Result;
use crate::seed;

pub const DEFAULT_STEP: f64 = 1e-5;

/// A model whose eval-mode classification loss can be differentiated with
/// respect to its parameters.
pub trait Differentiable {
    type Input;

    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;
    fn eval_loss(&self, input: &Self::Input, target: usize) -> Result<f64>;
    /// Loss plus one gradient per parameter, in `parameters()` order.
    fn loss_and_grads(&self, input: &Self::Input, target: usize) -> Result<(f64, Vec<Vec<f64>>)>;
}

/// `|a - n| / max(1, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let plus = f(&probe);
    probe[i] = x[i] - h;
    let minus = f(&probe);
    (plus - minus) / (2.0 * h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
    /// Only sample coordinates whose analytic gradient is nonzero, i.e. that
    /// are reached through at least one active ReLU path.
    pub active_only: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: 200,
            step: DEFAULT_STEP,
            seed: 0,
            active_only: false,
        }
    }
}

/// Compares analytic parameter gradients with central differences at
/// `options.samples` randomly chosen coordinates and returns the worst
/// relative error.
pub fn grad_check<N: Differentiable>(
    network: &mut N,
    input: &N::Input,
    target: usize,
    options: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = network.loss_and_grads(input, target)?;
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (p, g) in grads.iter().enumerate() {
        for (i, &v) in g.iter().enumerate() {
            if !options.active_only || v != 0.0 {
                candidates.push((p, i));
            }
        }
    }
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    if candidates.is_empty() {
        return Ok(report);
    }
    let mut rng = seed::rng(options.seed);
    for _ in 0..options.samples {
        let (p, i) = candidates[rng.random_range(0..candidates.len())];
        let original = network.parameters()[p].data()[i];
        network.parameters_mut()[p].data_mut()[i] = original + options.step;
        let plus = network.eval_loss(input, target)?;
        network.parameters_mut()[p].data_mut()[i] = original - options.step;
        let minus = network.eval_loss(input, target)?;
        network.parameters_mut()[p].data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * options.step);
        let err = relative_error(grads[p][i], numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = err.max(report.max_relative_error);
            report.worst = Some((network.parameters()[p].name.clone(), i));
        }
    }
    Ok(report)
}

/// A stack ending in flat logits, trained with softmax cross-entropy.
impl Differentiable for Stack {
    type Input = Tensor;

    fn parameters(&self) -> Vec<&Parameter> {
        Stack::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        Stack::parameters_mut(self)
    }

    fn eval_loss(&self, input: &Tensor, target: usize) -> Result<f64> {
        let (logits, _) = self.forward(input, &ForwardCtx::eval())?;
        Ok(softmax_cross_entropy(&logits, target)?.loss)
    }

    fn loss_and_grads(&self, input: &Tensor, target: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        let (logits, caches) = self.forward(input, &ForwardCtx::eval())?;
        let ce = softmax_cross_entropy(&logits, target)?;
        let (_, grads) = self.backward(&caches, &ce.grad, false)?;
        Ok((ce.loss, grads))
    }
}
