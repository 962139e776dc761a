//! Shared fixtures for unit tests.

use ndarray::Array3;
use rand::Rng;

use crate::mdp::TabularMdp;

/// Two-state MDP: action 0 stays, action 1 swaps; reward 1 on entering
/// state 1.
pub(crate) fn two_state_mdp() -> TabularMdp {
    let mut t = Array3::zeros((2, 2, 2));
    t[[0, 0, 0]] = 1.0;
    t[[0, 1, 1]] = 1.0;
    t[[1, 0, 1]] = 1.0;
    t[[1, 1, 0]] = 1.0;
    let mut r = Array3::zeros((2, 2, 2));
    r[[0, 1, 1]] = 1.0;
    r[[1, 0, 1]] = 1.0;
    TabularMdp::new(t, r, 0.9).unwrap()
}

/// Random dense MDP with Dirichlet(1) transition rows and rewards in
/// [-1, 1].
pub(crate) fn random_mdp<R: Rng>(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rng: &mut R,
) -> TabularMdp {
    let mut t = Array3::zeros((n_states, n_actions, n_states));
    let mut r = Array3::zeros((n_states, n_actions, n_states));
    for s in 0..n_states {
        for a in 0..n_actions {
            let row: Vec<f64> =
                (0..n_states).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let sum: f64 = row.iter().sum();
            for (k, v) in row.iter().enumerate() {
                t[[s, a, k]] = v / sum;
                r[[s, a, k]] = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
    }
    TabularMdp::new(t, r, gamma).unwrap()
}
