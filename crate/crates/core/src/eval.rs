//! Expectation-based policy evaluation in the state-noisy MDP.
//!
//! The noisy Bellman operator folds the observation kernel into the policy
//! and then behaves exactly like clean evaluation of the merged policy, so
//! its fixed point is the clean value function of that merged policy. The
//! adversarial operator re-selects a greedy deterministic kernel before
//! every backup and converges to the minimum over noise selections.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::lu_solve;
use crate::mdp::{greedy_adversarial_noise, merged_policy, AllowedSets, Policy, TabularMdp, TabularNoise};

/// Iteration cap for fixed-point solvers; unreachable for gamma < 1 with
/// sensible tolerances.
pub const MAX_SWEEPS: usize = 1_000_000;

/// State values plus optionally the matching state-action values.
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub v: Array1<f64>,
    pub q: Option<Array2<f64>>,
}

impl ValueTable {
    pub fn zeros(n_states: usize) -> Self {
        Self { v: Array1::zeros(n_states), q: None }
    }

    pub fn from_values(v: Array1<f64>) -> Self {
        Self { v, q: None }
    }
}

/// One-step state-action values from `v`:
/// `Q(s,a) = sum_s' p(s'|s,a) [R(s,a,s') + gamma v(s')]`.
pub fn q_backup(mdp: &TabularMdp, v: &Array1<f64>) -> Array2<f64> {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let mut q = Array2::zeros((n, m));
    for s in 0..n {
        for a in 0..m {
            let mut acc = 0.0;
            for next in 0..n {
                let p = mdp.transition(s, a, next);
                if p > 0.0 {
                    acc += p * (mdp.reward(s, a, next) + mdp.gamma() * v[next]);
                }
            }
            q[[s, a]] = acc;
        }
    }
    q
}

fn backup_with_policy(mdp: &TabularMdp, merged: &Policy, v: &Array1<f64>) -> Array1<f64> {
    let q = q_backup(mdp, v);
    let mut out = Array1::zeros(mdp.n_states());
    for s in 0..mdp.n_states() {
        let mut acc = 0.0;
        for a in 0..mdp.n_actions() {
            acc += merged.prob(s, a) * q[[s, a]];
        }
        out[s] = acc;
    }
    out
}

/// One synchronous sweep of the noisy Bellman operator.
pub fn bellman_backup(
    mdp: &TabularMdp,
    pi: &Policy,
    noise: &TabularNoise,
    v: &ValueTable,
) -> Result<ValueTable> {
    if v.v.len() != mdp.n_states() {
        return Err(Error::config("value table length differs from state count"));
    }
    let merged = merged_policy(mdp, pi, noise)?;
    Ok(ValueTable::from_values(backup_with_policy(mdp, &merged, &v.v)))
}

/// Transition matrix and expected reward vector of the merged policy.
pub fn merged_system(mdp: &TabularMdp, merged: &Policy) -> (Array2<f64>, Array1<f64>) {
    let n = mdp.n_states();
    let mut p = Array2::zeros((n, n));
    let mut r = Array1::zeros(n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let w = merged.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for next in 0..n {
                let t = mdp.transition(s, a, next);
                p[[s, next]] += w * t;
                r[s] += w * t * mdp.reward(s, a, next);
            }
        }
    }
    (p, r)
}

/// Direct linear solve of `(I - gamma P') V = R'` for the merged policy.
pub fn solve_merged_direct(mdp: &TabularMdp, pi: &Policy, noise: &TabularNoise) -> Result<Array1<f64>> {
    let merged = merged_policy(mdp, pi, noise)?;
    let (p, r) = merged_system(mdp, &merged);
    let n = mdp.n_states();
    let mut a = Array2::eye(n);
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] -= mdp.gamma() * p[[i, j]];
        }
    }
    lu_solve(&a, &r)
}

fn iterate_to_fixed_point(
    mdp: &TabularMdp,
    merged: &Policy,
    init: Array1<f64>,
    tol: f64,
) -> Result<Array1<f64>> {
    if tol <= 0.0 {
        return Err(Error::config("tolerance must be positive"));
    }
    let mut v = init;
    let mut last_change = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        let next = backup_with_policy(mdp, merged, &v);
        last_change = v
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if last_change <= tol {
            return Ok(v);
        }
    }
    Err(Error::NonConvergence { iterations: MAX_SWEEPS, last_change })
}

/// Fixed point of the noisy Bellman operator by synchronous sweeps from
/// zero, stopping when the sup-norm change drops to `tol`. The returned
/// iterate satisfies `||T V - V||_inf <= tol`.
pub fn solve_fixed_point(
    mdp: &TabularMdp,
    pi: &Policy,
    noise: &TabularNoise,
    tol: f64,
) -> Result<ValueTable> {
    solve_fixed_point_from(mdp, pi, noise, Array1::zeros(mdp.n_states()), tol)
}

/// Same as [`solve_fixed_point`] but from a caller-provided initialization.
pub fn solve_fixed_point_from(
    mdp: &TabularMdp,
    pi: &Policy,
    noise: &TabularNoise,
    init: Array1<f64>,
    tol: f64,
) -> Result<ValueTable> {
    let merged = merged_policy(mdp, pi, noise)?;
    let v = iterate_to_fixed_point(mdp, &merged, init, tol)?;
    let q = q_backup(mdp, &v);
    Ok(ValueTable { v, q: Some(q) })
}

/// One application of the adversarial operator: greedy kernel re-selection
/// from the current values, then a backup under the re-selected kernel.
pub fn adversarial_step(
    mdp: &TabularMdp,
    pi: &Policy,
    allowed: &AllowedSets,
    v: &Array1<f64>,
) -> Result<(Array1<f64>, TabularNoise)> {
    let q = q_backup(mdp, v);
    let noise = greedy_adversarial_noise(pi, &q, allowed)?;
    let merged = merged_policy(mdp, pi, &noise)?;
    Ok((backup_with_policy(mdp, &merged, v), noise))
}

/// Fixed point of the adversarial operator, alternating greedy kernel
/// selection and backups. Iteration starts from the identity-noise fixed
/// point, which makes each sweep an elementwise descent.
pub fn adversarial_fixed_point(
    mdp: &TabularMdp,
    pi: &Policy,
    allowed: &AllowedSets,
    tol: f64,
) -> Result<(ValueTable, TabularNoise)> {
    if tol <= 0.0 {
        return Err(Error::config("tolerance must be positive"));
    }
    let identity = TabularNoise::identity(mdp.n_states());
    let mut v = solve_fixed_point(mdp, pi, &identity, tol)?.v;
    let mut last_change = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        let (next, noise) = adversarial_step(mdp, pi, allowed, &v)?;
        last_change = v
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if last_change <= tol {
            let q = q_backup(mdp, &v);
            return Ok((ValueTable { v, q: Some(q) }, noise));
        }
    }
    Err(Error::NonConvergence { iterations: MAX_SWEEPS, last_change })
}
