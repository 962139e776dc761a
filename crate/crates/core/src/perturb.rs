//! Continuous observation perturbations: Gaussian measurement noise and the
//! PGD adversary that pushes the policy toward its least-chosen action.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Continuous observation-noise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContinuousNoise {
    Gaussian { std: f64 },
    Pgd(PgdParams),
}

impl ContinuousNoise {
    pub fn validate(&self) -> Result<()> {
        match self {
            ContinuousNoise::Gaussian { std } => {
                if *std < 0.0 || !std.is_finite() {
                    return Err(Error::config(format!("gaussian std {std} must be >= 0")));
                }
            }
            ContinuousNoise::Pgd(params) => params.validate()?,
        }
        Ok(())
    }

    /// Strength knob for reports: std for Gaussian, epsilon for PGD.
    pub fn strength(&self) -> f64 {
        match self {
            ContinuousNoise::Gaussian { std } => *std,
            ContinuousNoise::Pgd(p) => p.epsilon,
        }
    }
}

/// Projected-gradient adversary configuration (ℓ∞ ball of radius epsilon).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdParams {
    pub epsilon: f64,
    pub iterations: usize,
    pub step_size: f64,
}

impl PgdParams {
    /// Step size defaults to `epsilon / iterations`.
    pub fn new(epsilon: f64, iterations: usize) -> Self {
        let step = if iterations > 0 { epsilon / iterations as f64 } else { epsilon };
        Self { epsilon, iterations, step_size: step.max(f64::MIN_POSITIVE) }
    }

    pub fn with_step(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::config(format!("pgd epsilon {} must be >= 0", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::config("pgd needs at least one iteration"));
        }
        if self.step_size <= 0.0 {
            return Err(Error::config("pgd step size must be positive"));
        }
        Ok(())
    }
}

/// Add i.i.d. zero-mean Gaussian noise per coordinate. `std = 0` returns the
/// state unchanged without consuming the stream.
pub fn apply_gaussian<R: Rng>(state: &[f64], std: f64, rng: &mut R) -> Vec<f64> {
    if std == 0.0 {
        return state.to_vec();
    }
    state
        .iter()
        .map(|&x| x + std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Index of the least-chosen action under a softmax policy (lowest logit),
/// ties broken by the lowest action index.
pub fn least_chosen_action(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v < logits[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of a softmax policy toward a one-hot target action:
/// `logsumexp(logits) - logits[target]`.
pub fn cross_entropy_toward(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln() - logits[target]
}

/// PGD perturbation with an analytic objective gradient.
///
/// `grad_j(x, target)` must return the gradient of
/// `cross_entropy_toward(logits_fn(x), target)` with respect to `x`. The
/// target action is fixed at the unperturbed state. Each iteration takes a
/// sign-gradient descent step and clips to `[-epsilon, epsilon]^d`.
pub fn pgd_perturbation_with_grad(
    state: &[f64],
    logits_fn: impl Fn(&[f64]) -> Vec<f64>,
    grad_j: impl Fn(&[f64], usize) -> Vec<f64>,
    params: PgdParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    let target = least_chosen_action(&logits_fn(state));
    let mut eta = vec![0.0; state.len()];
    let mut probe = state.to_vec();
    for _ in 0..params.iterations {
        for (p, (&x, &e)) in probe.iter_mut().zip(state.iter().zip(eta.iter())) {
            *p = x + e;
        }
        let grad = grad_j(&probe, target);
        for (e, g) in eta.iter_mut().zip(grad) {
            *e = (*e - params.step_size * sign(g)).clamp(-params.epsilon, params.epsilon);
        }
    }
    Ok(eta)
}

/// PGD perturbation with the objective gradient taken by central finite
/// differences (per-coordinate step `1e-5 * (1 + |x_i|)`). Prefer
/// [`pgd_perturbation_with_grad`] when the head exposes gradients.
pub fn pgd_perturbation(
    state: &[f64],
    logits_fn: impl Fn(&[f64]) -> Vec<f64>,
    params: PgdParams,
) -> Result<Vec<f64>> {
    let objective =
        |x: &[f64], target: usize| cross_entropy_toward(&logits_fn(x), target);
    let grad = |x: &[f64], target: usize| {
        let mut g = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let h = 1e-5 * (1.0 + x[i].abs());
            probe[i] = x[i] + h;
            let up = objective(&probe, target);
            probe[i] = x[i] - h;
            let down = objective(&probe, target);
            probe[i] = x[i];
            g[i] = (up - down) / (2.0 * h);
        }
        g
    };
    pgd_perturbation_with_grad(state, &logits_fn, grad, params)
}
