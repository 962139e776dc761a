//! Finite MDPs, policies, and tabular state-observation noise kernels.
//!
//! A noise kernel maps each true state `s` to a distribution over an
//! allowed set `B(s)` of observed states. Composing the kernel with the
//! agent's policy yields the merged policy, which is what actually drives
//! the environment.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};

/// Absolute tolerance for probability normalization checks.
pub const PROB_TOL: f64 = 1e-12;

/// Finite MDP with per-(s, a, s') rewards and discount in (0, 1).
#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Array3<f64>,
    reward: Array3<f64>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Array3<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let (s, a, s2) = transition.dim();
        if s == 0 || a == 0 {
            return Err(Error::config("MDP needs at least one state and action"));
        }
        if s != s2 {
            return Err(Error::config(format!(
                "transition kernel is {s}x{a}x{s2}, expected square in states"
            )));
        }
        if reward.dim() != transition.dim() {
            return Err(Error::config("reward table shape differs from transition kernel"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::config(format!("gamma {gamma} not strictly inside (0, 1)")));
        }
        for i in 0..s {
            for j in 0..a {
                let mut sum = 0.0;
                for k in 0..s {
                    let p = transition[[i, j, k]];
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::config(format!(
                            "transition({i},{j},{k}) = {p} outside [0, 1]"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::config(format!(
                        "transition row ({i},{j}) sums to {sum}, expected 1"
                    )));
                }
            }
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::config("non-finite reward entry"));
        }
        Ok(Self { n_states: s, n_actions: a, transition, reward, gamma })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[[s, a, next]]
    }

    pub fn reward(&self, s: usize, a: usize, next: usize) -> f64 {
        self.reward[[s, a, next]]
    }

    /// Smallest and largest reward entries.
    pub fn reward_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &r in self.reward.iter() {
            lo = lo.min(r);
            hi = hi.max(r);
        }
        (lo, hi)
    }

    /// Return-range `[r_min, r_max] / (1 - gamma)`, the support of any
    /// discounted return in this MDP.
    pub fn return_support(&self) -> (f64, f64) {
        let (lo, hi) = self.reward_bounds();
        (lo / (1.0 - self.gamma), hi / (1.0 - self.gamma))
    }
}

/// Stochastic policy over a finite MDP, rows indexed by state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: Array2<f64>,
}

impl Policy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let (s, _a) = probs.dim();
        for i in 0..s {
            let row = probs.row(i);
            if row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                return Err(Error::config(format!("policy row {i} has invalid entries")));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::config(format!(
                    "policy row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { probs })
    }

    /// Uniform-random policy.
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64) }
    }

    /// Deterministic policy from a per-state action choice.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::config(format!("action {a} out of range for state {s}")));
            }
            probs[[s, a]] = 1.0;
        }
        Ok(Self { probs })
    }

    /// Random stochastic policy with Dirichlet(1) rows.
    pub fn random<R: Rng>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut probs = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            let mut row: Vec<f64> = (0..n_actions)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let sum: f64 = row.iter().sum();
            for v in &mut row {
                *v /= sum;
            }
            for (a, v) in row.iter().enumerate() {
                probs[[s, a]] = *v;
            }
        }
        Self { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[[s, a]]
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }
}

/// Per-state allowed observation sets `B(s)`; each must contain `s` so the
/// identity kernel is always representable.
#[derive(Debug, Clone)]
pub struct AllowedSets {
    sets: Vec<Vec<usize>>,
}

impl AllowedSets {
    pub fn new(mut sets: Vec<Vec<usize>>) -> Result<Self> {
        let n = sets.len();
        for (s, set) in sets.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(Error::config(format!("allowed set B({s}) is empty")));
            }
            if set.iter().any(|v| *v >= n) {
                return Err(Error::config(format!("allowed set B({s}) references missing state")));
            }
            if !set.contains(&s) {
                return Err(Error::config(format!("allowed set B({s}) must contain {s}")));
            }
        }
        Ok(Self { sets })
    }

    /// Singleton sets `B(s) = {s}`.
    pub fn identity(n_states: usize) -> Self {
        Self { sets: (0..n_states).map(|s| vec![s]).collect() }
    }

    /// Every state may be observed as any state.
    pub fn full(n_states: usize) -> Self {
        Self { sets: (0..n_states).map(|_| (0..n_states).collect()).collect() }
    }

    /// Random sets of size at most `max_size` (always containing the true
    /// state), drawn with the provided stream.
    pub fn random<R: Rng>(n_states: usize, max_size: usize, rng: &mut R) -> Self {
        let sets = (0..n_states)
            .map(|s| {
                let mut set = vec![s];
                let extra = rng.random_range(0..max_size.max(1));
                for _ in 0..extra {
                    set.push(rng.random_range(0..n_states));
                }
                set.sort_unstable();
                set.dedup();
                set
            })
            .collect();
        Self { sets }
    }

    pub fn n_states(&self) -> usize {
        self.sets.len()
    }

    pub fn set(&self, s: usize) -> &[usize] {
        &self.sets[s]
    }

    /// Iterate over every deterministic observation map `s -> v(s)` with
    /// `v(s) in B(s)`. Exponential in the number of states; meant for
    /// exhaustive oracles on tiny instances.
    pub fn enumerate_deterministic(&self) -> Vec<Vec<usize>> {
        let mut maps = vec![Vec::new()];
        for set in &self.sets {
            let mut next = Vec::with_capacity(maps.len() * set.len());
            for map in &maps {
                for &v in set {
                    let mut m = map.clone();
                    m.push(v);
                    next.push(m);
                }
            }
            maps = next;
        }
        maps
    }
}

/// Tabular observation-noise kernel `N(v | s)` supported on `B(s)`.
#[derive(Debug, Clone)]
pub struct TabularNoise {
    allowed: AllowedSets,
    kernel: Array2<f64>,
}

impl TabularNoise {
    pub fn new(allowed: AllowedSets, kernel: Array2<f64>) -> Result<Self> {
        let n = allowed.n_states();
        if kernel.dim() != (n, n) {
            return Err(Error::config("noise kernel shape differs from allowed sets"));
        }
        for s in 0..n {
            let mut sum = 0.0;
            for v in 0..n {
                let p = kernel[[s, v]];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::config(format!("kernel({s},{v}) = {p} outside [0, 1]")));
                }
                if p > 0.0 && !allowed.set(s).contains(&v) {
                    return Err(Error::config(format!(
                        "kernel({s},{v}) positive but {v} not in B({s})"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::config(format!("kernel row {s} sums to {sum}, expected 1")));
            }
        }
        Ok(Self { allowed, kernel })
    }

    /// Identity kernel over singleton (or wider) allowed sets.
    pub fn identity(n_states: usize) -> Self {
        let mut kernel = Array2::zeros((n_states, n_states));
        for s in 0..n_states {
            kernel[[s, s]] = 1.0;
        }
        Self { allowed: AllowedSets::identity(n_states), kernel }
    }

    /// Deterministic kernel from an observation map `s -> v(s)`.
    pub fn deterministic(allowed: AllowedSets, map: &[usize]) -> Result<Self> {
        let n = allowed.n_states();
        if map.len() != n {
            return Err(Error::config("observation map length differs from state count"));
        }
        let mut kernel = Array2::zeros((n, n));
        for (s, &v) in map.iter().enumerate() {
            if !allowed.set(s).contains(&v) {
                return Err(Error::config(format!("map sends {s} to {v} outside B({s})")));
            }
            kernel[[s, v]] = 1.0;
        }
        Ok(Self { allowed, kernel })
    }

    /// Random kernel with Dirichlet(1) mass over each allowed set.
    pub fn random<R: Rng>(allowed: AllowedSets, rng: &mut R) -> Self {
        let n = allowed.n_states();
        let mut kernel = Array2::zeros((n, n));
        for s in 0..n {
            let set = allowed.set(s).to_vec();
            let mut mass: Vec<f64> =
                set.iter().map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let sum: f64 = mass.iter().sum();
            for m in &mut mass {
                *m /= sum;
            }
            for (v, m) in set.iter().zip(mass) {
                kernel[[s, *v]] = m;
            }
        }
        Self { allowed, kernel }
    }

    pub fn allowed(&self) -> &AllowedSets {
        &self.allowed
    }

    pub fn prob(&self, s: usize, v: usize) -> f64 {
        self.kernel[[s, v]]
    }

    pub fn n_states(&self) -> usize {
        self.allowed.n_states()
    }

    /// For a deterministic kernel, the observation map; `None` otherwise.
    pub fn deterministic_map(&self) -> Option<Vec<usize>> {
        let n = self.n_states();
        let mut map = Vec::with_capacity(n);
        for s in 0..n {
            let mut hit = None;
            for v in 0..n {
                let p = self.kernel[[s, v]];
                if p == 1.0 && hit.is_none() {
                    hit = Some(v);
                } else if p != 0.0 && p != 1.0 {
                    return None;
                } else if p == 1.0 {
                    return None;
                }
            }
            map.push(hit?);
        }
        Some(map)
    }
}

/// Merged policy `pi'(a|s) = sum_v N(v|s) pi(a|v)`: the effective policy
/// obtained by folding observation noise into the agent's policy.
pub fn merged_policy(mdp: &TabularMdp, pi: &Policy, noise: &TabularNoise) -> Result<Policy> {
    let n = mdp.n_states();
    if pi.n_states() != n || pi.n_actions() != mdp.n_actions() || noise.n_states() != n {
        return Err(Error::config("policy/noise dimensions do not match the MDP"));
    }
    let mut probs = Array2::zeros((n, mdp.n_actions()));
    for s in 0..n {
        for &v in noise.allowed().set(s) {
            let w = noise.prob(s, v);
            if w == 0.0 {
                continue;
            }
            for a in 0..mdp.n_actions() {
                probs[[s, a]] += w * pi.prob(v, a);
            }
        }
    }
    // Rows are convex combinations of policy rows; renormalization is not
    // needed, construction just re-validates the invariant.
    Policy::new(probs)
}

/// Greedy adversarial kernel: for each state picks the observation
/// `v in B(s)` minimizing `sum_a pi(a|v) values(s, a)`, ties broken by the
/// lowest state index.
pub fn greedy_adversarial_noise(
    pi: &Policy,
    values: &Array2<f64>,
    allowed: &AllowedSets,
) -> Result<TabularNoise> {
    let n = allowed.n_states();
    if pi.n_states() != n || values.nrows() != n || values.ncols() != pi.n_actions() {
        return Err(Error::config("policy/value dimensions do not match the allowed sets"));
    }
    let mut map = Vec::with_capacity(n);
    for s in 0..n {
        let mut best_v = usize::MAX;
        let mut best = f64::INFINITY;
        for &v in allowed.set(s) {
            let mut expected = 0.0;
            for a in 0..pi.n_actions() {
                expected += pi.prob(v, a) * values[[s, a]];
            }
            if expected < best {
                best = expected;
                best_v = v;
            }
        }
        map.push(best_v);
    }
    TabularNoise::deterministic(allowed.clone(), &map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_mdp, two_state_mdp};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn rejects_bad_rows() {
        let mut t = Array3::zeros((2, 1, 2));
        t[[0, 0, 0]] = 0.6;
        t[[0, 0, 1]] = 0.5;
        t[[1, 0, 1]] = 1.0;
        let r = Array3::zeros((2, 1, 2));
        assert!(TabularMdp::new(t, r, 0.9).is_err());
    }

    #[test]
    fn rejects_gamma_bounds() {
        let mut t = Array3::zeros((1, 1, 1));
        t[[0, 0, 0]] = 1.0;
        let r = Array3::zeros((1, 1, 1));
        assert!(TabularMdp::new(t.clone(), r.clone(), 1.0).is_err());
        assert!(TabularMdp::new(t, r, 0.0).is_err());
    }

    #[test]
    fn merged_policy_identity_noise_is_identity() {
        let mdp = two_state_mdp();
        let pi = Policy::new(array![[0.3, 0.7], [0.9, 0.1]]).unwrap();
        let merged = merged_policy(&mdp, &pi, &TabularNoise::identity(2)).unwrap();
        assert_eq!(merged.probs(), pi.probs());
    }

    #[test]
    fn merged_policy_deterministic_relabeling() {
        let mdp = two_state_mdp();
        let pi = Policy::deterministic(&[0, 1], 2).unwrap();
        // Noise maps state 0 to observation 1 (and keeps 1 at 1).
        let noise =
            TabularNoise::deterministic(AllowedSets::full(2), &[1, 1]).unwrap();
        let merged = merged_policy(&mdp, &pi, &noise).unwrap();
        assert_eq!(merged.prob(0, 1), 1.0);
        assert_eq!(merged.prob(1, 1), 1.0);
    }

    #[test]
    fn merged_policy_matches_double_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mdp = random_mdp(3, 2, 0.9, &mut rng);
        let pi = Policy::random(3, 2, &mut rng);
        let noise = TabularNoise::random(AllowedSets::full(3), &mut rng);
        let merged = merged_policy(&mdp, &pi, &noise).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                let mut expect = 0.0;
                for v in 0..3 {
                    expect += noise.prob(s, v) * pi.prob(v, a);
                }
                assert_abs_diff_eq!(merged.prob(s, a), expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn greedy_noise_singleton_sets_is_identity() {
        let pi = Policy::uniform(3, 2);
        let values = array![[1.0, 2.0], [0.5, 0.1], [3.0, -1.0]];
        let noise =
            greedy_adversarial_noise(&pi, &values, &AllowedSets::identity(3)).unwrap();
        assert_eq!(noise.deterministic_map().unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn greedy_noise_breaks_ties_low() {
        let pi = Policy::uniform(3, 2);
        let values = Array2::zeros((3, 2));
        let noise = greedy_adversarial_noise(&pi, &values, &AllowedSets::full(3)).unwrap();
        assert_eq!(noise.deterministic_map().unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn greedy_noise_routes_to_worse_action() {
        // Policy at observation 0 picks action 0, at observation 1 picks
        // action 1. Q(s, 1) < Q(s, 0), so observing 1 is adversarial.
        let pi = Policy::deterministic(&[0, 1], 2).unwrap();
        let values = array![[1.0, 0.0], [1.0, 0.0]];
        let noise = greedy_adversarial_noise(&pi, &values, &AllowedSets::full(2)).unwrap();
        assert_eq!(noise.deterministic_map().unwrap(), vec![1, 1]);
    }

    #[test]
    fn greedy_noise_is_idempotent() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let pi = Policy::random(4, 3, &mut rng);
        let values = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() * 4.0 - 2.0);
        let allowed = AllowedSets::random(4, 3, &mut rng);
        let first = greedy_adversarial_noise(&pi, &values, &allowed).unwrap();
        let second = greedy_adversarial_noise(&pi, &values, &allowed).unwrap();
        assert_eq!(first.deterministic_map(), second.deterministic_map());
    }
}
