//! Desk-scale environments: pole balancing and valley climbing with
//! standard dynamics, plus parameterized tabular test beds.
//!
//! Noise is never injected here; the agent layer perturbs observations
//! while the true state drives these dynamics.

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Episode step cap for both control tasks.
pub const EPISODE_CAP: usize = 200;

const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const TOTAL_MASS: f64 = CART_MASS + POLE_MASS;
const POLE_HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = POLE_MASS * POLE_HALF_LENGTH;
const FORCE_MAG: f64 = 10.0;
const TAU: f64 = 0.02;
const ANGLE_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
const POSITION_LIMIT: f64 = 2.4;

const MC_MIN_POSITION: f64 = -1.2;
const MC_MAX_POSITION: f64 = 0.6;
const MC_MAX_SPEED: f64 = 0.07;
const MC_GOAL_POSITION: f64 = 0.5;

/// One Euler-integrated pole-on-cart step. The returned flag covers the
/// angle/position thresholds only; the step cap is handled by the episode
/// driver.
pub fn cartpole_step(state: &[f64; 4], action: usize) -> ([f64; 4], f64, bool) {
    let [x, x_dot, theta, theta_dot] = *state;
    let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
    let cos = theta.cos();
    let sin = theta.sin();

    let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
    let theta_acc = (GRAVITY * sin - cos * temp)
        / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / TOTAL_MASS));
    let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;

    let next = [
        x + TAU * x_dot,
        x_dot + TAU * x_acc,
        theta + TAU * theta_dot,
        theta_dot + TAU * theta_acc,
    ];
    let done = next[0].abs() > POSITION_LIMIT || next[2].abs() > ANGLE_LIMIT;
    (next, 1.0, done)
}

/// One valley-climbing step: velocity gains `0.001 (action - 1)` minus the
/// slope term, both state components clipped to their bounds; hitting the
/// left wall zeroes negative velocity.
pub fn mountaincar_step(state: &[f64; 2], action: usize) -> ([f64; 2], f64, bool) {
    let [position, velocity] = *state;
    let mut v = velocity + 0.001 * (action as f64 - 1.0) - 0.0025 * (3.0 * position).cos();
    v = v.clamp(-MC_MAX_SPEED, MC_MAX_SPEED);
    let mut p = position + v;
    p = p.clamp(MC_MIN_POSITION, MC_MAX_POSITION);
    if p <= MC_MIN_POSITION && v < 0.0 {
        v = 0.0;
    }
    let done = p >= MC_GOAL_POSITION;
    ([p, v], -1.0, done)
}

/// Which control task an environment instance runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    CartPole,
    MountainCar,
}

impl EnvKind {
    pub fn obs_dim(&self) -> usize {
        match self {
            EnvKind::CartPole => 4,
            EnvKind::MountainCar => 2,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            EnvKind::CartPole => 2,
            EnvKind::MountainCar => 3,
        }
    }

    /// Per-step reward bounds (used to size return supports).
    pub fn reward_bounds(&self) -> (f64, f64) {
        match self {
            EnvKind::CartPole => (1.0, 1.0),
            EnvKind::MountainCar => (-1.0, -1.0),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EnvKind::CartPole => "cartpole",
            EnvKind::MountainCar => "mountaincar",
        }
    }
}

/// Stateful episode wrapper: deterministic dynamics, stochastic reset,
/// step counter with the 200-step cap.
#[derive(Debug, Clone)]
pub struct ControlEnv {
    kind: EnvKind,
    state: Vec<f64>,
    steps: usize,
    done: bool,
}

impl ControlEnv {
    pub fn new(kind: EnvKind) -> Self {
        Self { kind, state: vec![0.0; kind.obs_dim()], steps: 0, done: true }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Draw the initial state: uniform [-0.05, 0.05]^4 for the pole task,
    /// position uniform [-0.6, -0.4] at zero velocity for the valley task.
    pub fn reset<R: Rng>(&mut self, rng: &mut R) -> Vec<f64> {
        self.state = match self.kind {
            EnvKind::CartPole => {
                (0..4).map(|_| rng.random::<f64>() * 0.1 - 0.05).collect()
            }
            EnvKind::MountainCar => {
                vec![rng.random::<f64>() * 0.2 - 0.6, 0.0]
            }
        };
        self.steps = 0;
        self.done = false;
        self.state.clone()
    }

    /// Deterministic transition; `done` includes the step cap.
    pub fn step(&mut self, action: usize) -> (Vec<f64>, f64, bool) {
        assert!(!self.done, "episode is finished; reset first");
        assert!(action < self.kind.n_actions(), "action out of range");
        let (next, reward, terminal) = match self.kind {
            EnvKind::CartPole => {
                let s = [self.state[0], self.state[1], self.state[2], self.state[3]];
                let (n, r, d) = cartpole_step(&s, action);
                (n.to_vec(), r, d)
            }
            EnvKind::MountainCar => {
                let s = [self.state[0], self.state[1]];
                let (n, r, d) = mountaincar_step(&s, action);
                (n.to_vec(), r, d)
            }
        };
        self.state = next;
        self.steps += 1;
        self.done = terminal || self.steps >= EPISODE_CAP;
        (self.state.clone(), reward, self.done)
    }
}

/// Tabular test-bed generator spec.
#[derive(Debug, Clone)]
pub enum TabularEnvSpec {
    /// Left/right chain with 0.9 move success, reward on reaching the
    /// right end.
    Chain { n: usize, gamma: f64 },
    /// Dense random MDP: Dirichlet(1) transition rows, uniform rewards.
    Random {
        n_states: usize,
        n_actions: usize,
        reward_range: (f64, f64),
        seed: u64,
        gamma: f64,
    },
}

/// Build the tabular MDP described by a spec.
pub fn make_tabular(spec: &TabularEnvSpec) -> Result<TabularMdp> {
    match spec {
        TabularEnvSpec::Chain { n, gamma } => {
            let n = *n;
            if n < 2 {
                return Err(Error::config("chain needs at least 2 states"));
            }
            let mut t = Array3::zeros((n, 2, n));
            let mut r = Array3::zeros((n, 2, n));
            for s in 0..n {
                let left = s.saturating_sub(1);
                let right = (s + 1).min(n - 1);
                // Action 0 moves left, action 1 moves right; both succeed
                // with probability 0.9 and stay put otherwise.
                t[[s, 0, left]] += 0.9;
                t[[s, 0, s]] += 0.1;
                t[[s, 1, right]] += 0.9;
                t[[s, 1, s]] += 0.1;
            }
            for s in 0..n {
                for a in 0..2 {
                    r[[s, a, n - 1]] = 1.0;
                }
            }
            TabularMdp::new(t, r, *gamma)
        }
        TabularEnvSpec::Random { n_states, n_actions, reward_range, seed, gamma } => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(*seed);
            let (lo, hi) = *reward_range;
            if !(hi >= lo) {
                return Err(Error::config("reward range is inverted"));
            }
            let mut t = Array3::zeros((*n_states, *n_actions, *n_states));
            let mut r = Array3::zeros((*n_states, *n_actions, *n_states));
            for s in 0..*n_states {
                for a in 0..*n_actions {
                    let row: Vec<f64> = (0..*n_states)
                        .map(|_| -(1.0 - rng.random::<f64>()).ln())
                        .collect();
                    let sum: f64 = row.iter().sum();
                    for (k, v) in row.iter().enumerate() {
                        t[[s, a, k]] = v / sum;
                        r[[s, a, k]] = lo + (hi - lo) * rng.random::<f64>();
                    }
                }
            }
            TabularMdp::new(t, r, *gamma)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::solve_fixed_point;
    use crate::mdp::{Policy, TabularNoise};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn cartpole_step_matches_hand_integration() {
        let state = [0.1, -0.2, 0.05, 0.3];
        let action = 1;
        let (next, reward, done) = cartpole_step(&state, action);

        // Hand Euler step with the standard constants.
        let force = 10.0;
        let (sin, cos) = (0.05f64.sin(), 0.05f64.cos());
        let temp = (force + 0.05 * 0.3 * 0.3 * sin) / 1.1;
        let theta_acc = (9.8 * sin - cos * temp) / (0.5 * (4.0 / 3.0 - 0.1 * cos * cos / 1.1));
        let x_acc = temp - 0.05 * theta_acc * cos / 1.1;
        assert_abs_diff_eq!(next[0], 0.1 + 0.02 * -0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(next[1], -0.2 + 0.02 * x_acc, epsilon = 1e-15);
        assert_abs_diff_eq!(next[2], 0.05 + 0.02 * 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(next[3], 0.3 + 0.02 * theta_acc, epsilon = 1e-15);
        assert_eq!(reward, 1.0);
        assert!(!done);
    }

    #[test]
    fn cartpole_balanced_alternation_stays_up_briefly() {
        let mut state = [0.0, 0.0, 0.0, 0.0];
        for (i, action) in [0usize, 1].iter().enumerate() {
            let (next, _, done) = cartpole_step(&state, *action);
            assert!(!done, "fell after {} steps", i + 1);
            state = next;
        }
        assert!(state[2].abs() < ANGLE_LIMIT);
    }

    #[test]
    fn cartpole_position_threshold_triggers_done() {
        // Just inside the limit, moving fast enough to cross it.
        let state = [2.39, 10.0, 0.0, 0.0];
        let (next, _, done) = cartpole_step(&state, 1);
        assert!(next[0] > POSITION_LIMIT);
        assert!(done);
        // Landing exactly on the limit does not trigger (strict inequality):
        // zero velocity keeps the position at 2.4 bit-exactly.
        let state = [POSITION_LIMIT, 0.0, 0.0, 0.0];
        let (next, _, done) = cartpole_step(&state, 1);
        assert_eq!(next[0], POSITION_LIMIT);
        assert!(!done);
    }

    #[test]
    fn mountaincar_valley_bottom_noop_is_stationary() {
        // cos(3 * -0.5236) ~ 0, so gravity vanishes at the valley bottom.
        let state = [-0.5236, 0.0];
        let (next, reward, done) = mountaincar_step(&state, 1);
        assert!(next[1].abs() < 1e-5);
        assert_eq!(reward, -1.0);
        assert!(!done);
    }

    #[test]
    fn mountaincar_left_wall_zeroes_velocity() {
        let state = [-1.19, -0.05];
        let (next, _, _) = mountaincar_step(&state, 0);
        assert_eq!(next[0], MC_MIN_POSITION);
        assert_eq!(next[1], 0.0);
    }

    #[test]
    fn mountaincar_full_throttle_cannot_climb_directly() {
        let mut env = ControlEnv::new(EnvKind::MountainCar);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        env.reset(&mut rng);
        let mut reached = false;
        for _ in 0..EPISODE_CAP {
            let (state, _, done) = env.step(2);
            if done {
                reached = state[0] >= MC_GOAL_POSITION;
                break;
            }
        }
        assert!(!reached, "monotone climb should fail");
    }

    #[test]
    fn episodes_replay_bit_exactly() {
        for kind in [EnvKind::CartPole, EnvKind::MountainCar] {
            let mut env_a = ControlEnv::new(kind);
            let mut env_b = ControlEnv::new(kind);
            let mut rng_a = ChaCha12Rng::seed_from_u64(9);
            let mut rng_b = ChaCha12Rng::seed_from_u64(9);
            let init_a = env_a.reset(&mut rng_a);
            let init_b = env_b.reset(&mut rng_b);
            assert_eq!(init_a, init_b);
            let mut action_rng = ChaCha12Rng::seed_from_u64(10);
            for _ in 0..50 {
                let a = action_rng.random_range(0..kind.n_actions());
                let out_a = env_a.step(a);
                let out_b = env_b.step(a);
                assert_eq!(out_a, out_b);
                if out_a.2 {
                    break;
                }
            }
        }
    }

    #[test]
    fn cartpole_episode_cap_stops_at_200() {
        let mut env = ControlEnv::new(EnvKind::CartPole);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        // A pathological policy alternating forces can survive past 200
        // steps only through the cap.
        let mut done_at = None;
        env.reset(&mut rng);
        for t in 0..400 {
            let (_, _, done) = env.step(t % 2);
            if done {
                done_at = Some(t + 1);
                break;
            }
        }
        assert!(done_at.unwrap() <= EPISODE_CAP);
    }

    #[test]
    fn chain_rows_sum_to_one() {
        let mdp = make_tabular(&TabularEnvSpec::Chain { n: 2, gamma: 0.9 }).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                let total: f64 = (0..2).map(|k| mdp.transition(s, a, k)).sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn random_spec_is_seed_deterministic() {
        let spec = TabularEnvSpec::Random {
            n_states: 5,
            n_actions: 3,
            reward_range: (-1.0, 2.0),
            seed: 42,
            gamma: 0.9,
        };
        let a = make_tabular(&spec).unwrap();
        let b = make_tabular(&spec).unwrap();
        for s in 0..5 {
            for ac in 0..3 {
                for k in 0..5 {
                    assert_eq!(a.transition(s, ac, k), b.transition(s, ac, k));
                    assert_eq!(a.reward(s, ac, k), b.reward(s, ac, k));
                }
            }
        }
    }

    #[test]
    fn chain_value_matches_geometric_series_solve() {
        // Go-right policy on chain(5), gamma 0.9. From the right end both
        // outcomes stay there and collect 1 per step: V(4) = 1/(1-0.9).
        // One state left: V(3) = 0.9 (1 + g V(4)) + 0.1 g V(3).
        let mdp = make_tabular(&TabularEnvSpec::Chain { n: 5, gamma: 0.9 }).unwrap();
        let pi = Policy::deterministic(&[1, 1, 1, 1, 1], 2).unwrap();
        let noise = TabularNoise::identity(5);
        let v = solve_fixed_point(&mdp, &pi, &noise, 1e-12).unwrap().v;

        let g = 0.9;
        let v4 = 1.0 / (1.0 - g);
        let v3 = 0.9 * (1.0 + g * v4) / (1.0 - 0.1 * g);
        assert_abs_diff_eq!(v[4], v4, epsilon = 1e-9);
        assert_abs_diff_eq!(v[3], v3, epsilon = 1e-9);
    }
}
