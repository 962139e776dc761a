//! Replay-based value agents: a least-squares (DQN-style) learner and a
//! histogram-distributional learner sharing the same skeleton, with
//! configurable observation-noise injection on the current, next, or both
//! stored observations.
//!
//! The true state always drives the environment; noise only touches what
//! the agent sees and stores. In the "both" site each visited state is
//! perturbed once and the perturbed vector is reused as the next-state of
//! the previous transition and the current observation of the next step.

use rand_chacha::ChaCha12Rng;

use rand::Rng;

use crate::dist::AtomDistribution;
use crate::envs::{ControlEnv, EnvKind};
use crate::error::{Error, Result};
use crate::heads::{
    log_softmax, project_row_norms, project_target_distribution, softmax, TargetHistogram,
};
use crate::mlp::{FeatureMap, LayerGrads};
use crate::perturb::{apply_gaussian, pgd_perturbation_with_grad, ContinuousNoise};
use crate::replay::{ReplayBuffer, Transition};
use crate::seed::derive_substream;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    LeastSquares,
    Histogram,
}

impl LossKind {
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::LeastSquares => "dqn",
            LossKind::Histogram => "histdqn",
        }
    }
}

/// Representation under the output rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Linear,
    /// Two tanh layers of the given width.
    Nonlinear { width: usize },
}

/// Which stored observation(s) the noise touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionSite {
    None,
    Current,
    Next,
    Both,
}

impl InjectionSite {
    pub fn label(&self) -> &'static str {
        match self {
            InjectionSite::None => "none",
            InjectionSite::Current => "current",
            InjectionSite::Next => "next",
            InjectionSite::Both => "both",
        }
    }
}

/// Noise model plus where it is injected.
#[derive(Debug, Clone, Copy)]
pub struct NoiseInjection {
    pub site: InjectionSite,
    pub noise: ContinuousNoise,
}

impl NoiseInjection {
    pub fn none() -> Self {
        Self { site: InjectionSite::None, noise: ContinuousNoise::Gaussian { std: 0.0 } }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()
    }
}

/// Agent hyperparameters.
#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub loss_kind: LossKind,
    pub head_mode: HeadMode,
    /// Bin count for the histogram loss.
    pub k: usize,
    /// Final-layer row-norm bound, projection-enforced when set.
    pub norm_bound: Option<f64>,
    pub gamma: f64,
    pub learning_rate: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Target-network sync period, in updates.
    pub target_sync: usize,
    pub total_steps: usize,
    /// Exploration decays linearly from `eps_start` to `eps_end` over the
    /// first `eps_fraction` of total steps.
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_fraction: f64,
    /// Softmax temperature of the policy the PGD adversary attacks.
    pub pgd_temperature: f64,
}

impl AgentConfig {
    pub fn defaults(loss_kind: LossKind, env: EnvKind) -> Self {
        let (learning_rate, k, total_steps) = match env {
            EnvKind::CartPole => (1e-3, 20, 200_000),
            EnvKind::MountainCar => (5e-4, 2, 100_000),
        };
        Self {
            loss_kind,
            head_mode: HeadMode::Nonlinear { width: 32 },
            k,
            norm_bound: match loss_kind {
                LossKind::LeastSquares => None,
                LossKind::Histogram => Some(1.0),
            },
            gamma: 0.99,
            learning_rate,
            replay_capacity: 10_000,
            batch_size: 32,
            target_sync: 100,
            total_steps,
            eps_start: 1.0,
            eps_end: 0.02,
            eps_fraction: 0.1,
            pgd_temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.loss_kind == LossKind::Histogram && self.k < 2 {
            return Err(Error::config("histogram agent needs k >= 2"));
        }
        if self.loss_kind == LossKind::Histogram && self.norm_bound.is_none() {
            return Err(Error::config("histogram agent needs a row-norm bound"));
        }
        if let Some(l) = self.norm_bound {
            if l <= 0.0 {
                return Err(Error::config("norm bound must be positive"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma must lie strictly inside (0, 1)"));
        }
        if self.learning_rate <= 0.0
            || self.replay_capacity == 0
            || self.batch_size == 0
            || self.target_sync == 0
            || self.total_steps == 0
        {
            return Err(Error::config("rates, capacities, and step counts must be positive"));
        }
        if let HeadMode::Nonlinear { width } = self.head_mode {
            if width == 0 {
                return Err(Error::config("nonlinear width must be positive"));
            }
        }
        if self.pgd_temperature <= 0.0 {
            return Err(Error::config("pgd temperature must be positive"));
        }
        Ok(())
    }

    pub fn epsilon_at(&self, step: usize) -> f64 {
        let horizon = (self.eps_fraction * self.total_steps as f64).max(1.0);
        let frac = step as f64 / horizon;
        if frac >= 1.0 {
            return self.eps_end;
        }
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Shared network shape for both agents: a feature map (identity in the
/// linear mode) under `n_actions * outputs_per_action` linear rows without
/// bias, so the histogram norm-bound theory applies to the rows directly.
#[derive(Debug, Clone)]
struct QNetwork {
    phi: FeatureMap,
    rows: Vec<Vec<f64>>,
    outputs_per_action: usize,
}

impl QNetwork {
    fn new<R: Rng>(
        obs_dim: usize,
        n_actions: usize,
        outputs_per_action: usize,
        mode: HeadMode,
        norm_bound: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let phi = match mode {
            HeadMode::Linear => FeatureMap::identity(obs_dim),
            HeadMode::Nonlinear { width } => FeatureMap::random(obs_dim, &[width, width], rng),
        };
        let m = phi.out_dim();
        let scale = 0.1 / (m as f64).sqrt();
        let mut rows: Vec<Vec<f64>> = (0..n_actions * outputs_per_action)
            .map(|_| (0..m).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect())
            .collect();
        if let Some(l) = norm_bound {
            project_row_norms(&mut rows, l);
        }
        Self { phi, rows, outputs_per_action }
    }

    fn action_rows(&self, action: usize) -> &[Vec<f64>] {
        let k = self.outputs_per_action;
        &self.rows[action * k..(action + 1) * k]
    }

    /// Per-action raw outputs at the given features.
    fn outputs(&self, feat: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().zip(feat).map(|(w, x)| w * x).sum())
            .collect()
    }
}

/// Scalar loss/gradient diagnostics of one update.
#[derive(Debug, Clone)]
pub struct UpdateDiagnostics {
    pub loss: f64,
    /// Batch mean of per-transition state-gradient norms.
    pub mean_state_grad_norm: f64,
    pub max_state_grad_norm: f64,
    pub finite: bool,
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Value agent with online and target networks.
#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: AgentConfig,
    env: EnvKind,
    online: QNetwork,
    target: QNetwork,
    /// Histogram support and bin centers (empty for least squares).
    support: (f64, f64),
    centers: Vec<f64>,
    updates_done: usize,
}

impl Agent {
    pub fn new<R: Rng>(cfg: AgentConfig, env: EnvKind, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let outputs = match cfg.loss_kind {
            LossKind::LeastSquares => 1,
            LossKind::Histogram => cfg.k,
        };
        let online = QNetwork::new(
            env.obs_dim(),
            env.n_actions(),
            outputs,
            cfg.head_mode,
            cfg.norm_bound,
            rng,
        );
        let target = online.clone();

        // Episodes terminate with a zero bootstrap, so the realizable
        // return range always includes 0 alongside r/(1-gamma).
        let (r_lo, r_hi) = env.reward_bounds();
        let lo = (r_lo / (1.0 - cfg.gamma)).min(0.0);
        let hi = (r_hi / (1.0 - cfg.gamma)).max(0.0);
        let support = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let k = outputs;
        let width = (support.1 - support.0) / k as f64;
        let centers = (0..k).map(|i| support.0 + (i as f64 + 0.5) * width).collect();

        Ok(Self { cfg, env, online, target, support, centers, updates_done: 0 })
    }

    pub fn env_kind(&self) -> EnvKind {
        self.env
    }

    pub fn n_actions(&self) -> usize {
        self.env.n_actions()
    }

    /// `k * l * L` for the histogram agent with a configured bound.
    pub fn gradient_bound(&self) -> Option<f64> {
        match (self.cfg.loss_kind, self.cfg.norm_bound) {
            (LossKind::Histogram, Some(l)) => {
                Some(self.cfg.k as f64 * l * self.online.phi.lipschitz_bound())
            }
            _ => None,
        }
    }

    fn q_from_outputs(&self, outputs: &[f64]) -> Vec<f64> {
        match self.cfg.loss_kind {
            LossKind::LeastSquares => outputs.to_vec(),
            LossKind::Histogram => {
                let k = self.cfg.k;
                (0..self.n_actions())
                    .map(|a| {
                        let f = softmax(&outputs[a * k..(a + 1) * k]);
                        f.iter().zip(&self.centers).map(|(p, c)| p * c).sum()
                    })
                    .collect()
            }
        }
    }

    /// Online-network action values.
    pub fn q_values(&self, obs: &[f64]) -> Vec<f64> {
        let feat = self.online.phi.forward(obs);
        self.q_from_outputs(&self.online.outputs(&feat))
    }

    fn q_values_target(&self, obs: &[f64]) -> Vec<f64> {
        let feat = self.target.phi.forward(obs);
        self.q_from_outputs(&self.target.outputs(&feat))
    }

    /// Greedy action, ties to the lowest index.
    pub fn greedy_action(&self, obs: &[f64]) -> usize {
        let q = self.q_values(obs);
        let mut best = 0;
        for (a, v) in q.iter().enumerate() {
            if *v > q[best] {
                best = a;
            }
        }
        best
    }

    /// Epsilon-greedy action selection.
    pub fn act<R: Rng>(&self, obs: &[f64], epsilon: f64, rng: &mut R) -> usize {
        if rng.random::<f64>() < epsilon {
            rng.random_range(0..self.n_actions())
        } else {
            self.greedy_action(obs)
        }
    }

    /// Logits of the softmax policy the PGD adversary attacks: the online
    /// action values over temperature.
    pub fn policy_logits(&self, obs: &[f64]) -> Vec<f64> {
        self.q_values(obs).iter().map(|q| q / self.cfg.pgd_temperature).collect()
    }

    /// Analytic gradient with respect to the observation of the
    /// cross-entropy toward `target` under the softmax policy.
    pub fn policy_ce_state_grad(&self, obs: &[f64], target: usize) -> Vec<f64> {
        let trace = self.online.phi.trace(obs);
        let feat = trace.output().to_vec();
        let outputs = self.online.outputs(&feat);
        let logits = self.q_from_outputs(&outputs);
        let logits: Vec<f64> = logits.iter().map(|q| q / self.cfg.pgd_temperature).collect();
        let probs = softmax(&logits);

        // Upstream in feature space: sum_a coeff_a * grad_feat q_a with
        // coeff_a = (pi_a - one_hot_target) / temperature.
        let m = feat.len();
        let mut upstream = vec![0.0; m];
        for a in 0..self.n_actions() {
            let coeff =
                (probs[a] - if a == target { 1.0 } else { 0.0 }) / self.cfg.pgd_temperature;
            if coeff == 0.0 {
                continue;
            }
            match self.cfg.loss_kind {
                LossKind::LeastSquares => {
                    for (u, w) in upstream.iter_mut().zip(&self.online.rows[a]) {
                        *u += coeff * w;
                    }
                }
                LossKind::Histogram => {
                    let k = self.cfg.k;
                    let f = softmax(&outputs[a * k..(a + 1) * k]);
                    let mean_c: f64 = f.iter().zip(&self.centers).map(|(p, c)| p * c).sum();
                    for (i, row) in self.online.action_rows(a).iter().enumerate() {
                        let w_i = coeff * f[i] * (self.centers[i] - mean_c);
                        for (u, w) in upstream.iter_mut().zip(row) {
                            *u += w_i * w;
                        }
                    }
                }
            }
        }
        if self.online.phi.is_identity() {
            upstream
        } else {
            self.online.phi.backward_input(&trace, &upstream)
        }
    }

    /// Apply the configured noise to one observation.
    pub fn perturb_observation<R: Rng>(
        &self,
        state: &[f64],
        noise: &ContinuousNoise,
        rng: &mut R,
    ) -> Vec<f64> {
        match noise {
            ContinuousNoise::Gaussian { std } => apply_gaussian(state, *std, rng),
            ContinuousNoise::Pgd(params) => {
                let eta = pgd_perturbation_with_grad(
                    state,
                    |x| self.policy_logits(x),
                    |x, target| self.policy_ce_state_grad(x, target),
                    *params,
                )
                .expect("pgd parameters validated at injection construction");
                state.iter().zip(&eta).map(|(s, e)| s + e).collect()
            }
        }
    }

    /// Bootstrap target distribution for one transition: the target head's
    /// histogram at the greedy-by-expectation next action, shifted by the
    /// reward and discount, collapsed to a point mass at the reward on
    /// terminal transitions, then projected onto the support bins.
    pub fn histogram_target(&self, transition: &Transition) -> Result<TargetHistogram> {
        let k = self.cfg.k;
        let atoms = if transition.done {
            AtomDistribution::dirac(transition.reward)
        } else {
            let feat = self.target.phi.forward(&transition.next_obs);
            let outputs = self.target.outputs(&feat);
            let q = self.q_from_outputs(&outputs);
            let mut best = 0;
            for (a, v) in q.iter().enumerate() {
                if *v > q[best] {
                    best = a;
                }
            }
            let f = softmax(&outputs[best * k..(best + 1) * k]);
            let pairs: Vec<(f64, f64)> = self
                .centers
                .iter()
                .zip(&f)
                .map(|(c, p)| (transition.reward + self.cfg.gamma * c, *p))
                .collect();
            AtomDistribution::from_weighted(pairs, 1e-12)?
        };
        project_target_distribution(&atoms, self.support, k)
    }

    /// Scalar bootstrap target for the least-squares agent.
    fn scalar_target(&self, transition: &Transition) -> f64 {
        if transition.done {
            transition.reward
        } else {
            let q = self.q_values_target(&transition.next_obs);
            let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            transition.reward + self.cfg.gamma * best
        }
    }

    /// Mean batch loss without updating; used by finite-difference checks.
    pub fn batch_loss(&self, batch: &[&Transition]) -> Result<f64> {
        let mut loss = 0.0;
        for t in batch {
            match self.cfg.loss_kind {
                LossKind::LeastSquares => {
                    let u = self.scalar_target(t);
                    let feat = self.online.phi.forward(&t.obs);
                    let q = self.online.outputs(&feat)[t.action];
                    loss += 0.5 * (u - q) * (u - q);
                }
                LossKind::Histogram => {
                    let p = self.histogram_target(t)?;
                    let feat = self.online.phi.forward(&t.obs);
                    let outputs = self.online.outputs(&feat);
                    let k = self.cfg.k;
                    let scores = &outputs[t.action * k..(t.action + 1) * k];
                    let logf = log_softmax(scores);
                    loss -= p.masses().iter().zip(&logf).map(|(pi, lf)| pi * lf).sum::<f64>();
                }
            }
        }
        Ok(loss / batch.len() as f64)
    }

    /// One SGD step on the mean batch loss, followed by row projection when
    /// a norm bound is configured. Targets come from the frozen target
    /// network, which re-syncs every `target_sync` updates.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<UpdateDiagnostics> {
        if batch.is_empty() {
            return Err(Error::config("update needs a non-empty batch"));
        }
        let diag = match self.cfg.loss_kind {
            LossKind::LeastSquares => self.update_least_squares(batch),
            LossKind::Histogram => self.update_histogram(batch)?,
        };
        if let Some(l) = self.cfg.norm_bound {
            project_row_norms(&mut self.online.rows, l);
        }
        self.updates_done += 1;
        if self.updates_done % self.cfg.target_sync == 0 {
            self.target = self.online.clone();
        }
        Ok(diag)
    }

    fn update_least_squares(&mut self, batch: &[&Transition]) -> UpdateDiagnostics {
        let scale = 1.0 / batch.len() as f64;
        let m = self.online.phi.out_dim();
        let mut row_grads = vec![vec![0.0; m]; self.online.rows.len()];
        let mut map_grads = zero_map_grads(&self.online.phi);
        let mut loss = 0.0;
        let mut grad_sum = 0.0;
        let mut grad_max: f64 = 0.0;

        for t in batch {
            let u = self.scalar_target(t);
            let trace = self.online.phi.trace(&t.obs);
            let feat = trace.output().to_vec();
            let q: f64 =
                self.online.rows[t.action].iter().zip(&feat).map(|(w, x)| w * x).sum();
            let residual = u - q;
            loss += 0.5 * residual * residual * scale;

            for (g, x) in row_grads[t.action].iter_mut().zip(&feat) {
                *g += -residual * x * scale;
            }
            let upstream: Vec<f64> =
                self.online.rows[t.action].iter().map(|w| -residual * w).collect();
            let state_grad = if self.online.phi.is_identity() {
                upstream.clone()
            } else {
                let (g, input_grad) = self.online.phi.backward_params(&trace, &upstream);
                accumulate_map_grads(&mut map_grads, &g, scale);
                input_grad
            };
            let n = vec_norm(&state_grad);
            grad_sum += n;
            grad_max = grad_max.max(n);
        }

        self.apply_step(&row_grads, &map_grads);
        UpdateDiagnostics {
            loss,
            mean_state_grad_norm: grad_sum / batch.len() as f64,
            max_state_grad_norm: grad_max,
            finite: loss.is_finite(),
        }
    }

    fn update_histogram(&mut self, batch: &[&Transition]) -> Result<UpdateDiagnostics> {
        let scale = 1.0 / batch.len() as f64;
        let k = self.cfg.k;
        let m = self.online.phi.out_dim();
        let mut row_grads = vec![vec![0.0; m]; self.online.rows.len()];
        let mut map_grads = zero_map_grads(&self.online.phi);
        let mut loss = 0.0;
        let mut grad_sum = 0.0;
        let mut grad_max: f64 = 0.0;

        for t in batch {
            let p = self.histogram_target(t)?;
            let trace = self.online.phi.trace(&t.obs);
            let feat = trace.output().to_vec();
            let outputs = self.online.outputs(&feat);
            let scores = &outputs[t.action * k..(t.action + 1) * k];
            let logf = log_softmax(scores);
            loss -= p.masses().iter().zip(&logf).map(|(pi, lf)| pi * lf).sum::<f64>() * scale;

            let f = softmax(scores);
            let mut upstream = vec![0.0; m];
            for i in 0..k {
                let coeff = f[i] - p.masses()[i];
                let row_idx = t.action * k + i;
                for (g, x) in row_grads[row_idx].iter_mut().zip(&feat) {
                    *g += coeff * x * scale;
                }
                for (u, w) in upstream.iter_mut().zip(&self.online.rows[row_idx]) {
                    *u += coeff * w;
                }
            }
            let state_grad = if self.online.phi.is_identity() {
                upstream.clone()
            } else {
                let (g, input_grad) = self.online.phi.backward_params(&trace, &upstream);
                accumulate_map_grads(&mut map_grads, &g, scale);
                input_grad
            };
            let n = vec_norm(&state_grad);
            grad_sum += n;
            grad_max = grad_max.max(n);
        }

        self.apply_step(&row_grads, &map_grads);
        Ok(UpdateDiagnostics {
            loss,
            mean_state_grad_norm: grad_sum / batch.len() as f64,
            max_state_grad_norm: grad_max,
            finite: loss.is_finite(),
        })
    }

    fn apply_step(&mut self, row_grads: &[Vec<f64>], map_grads: &[LayerGrads]) {
        let lr = self.cfg.learning_rate;
        for (row, grad) in self.online.rows.iter_mut().zip(row_grads) {
            for (w, g) in row.iter_mut().zip(grad) {
                *w -= lr * g;
            }
        }
        if !map_grads.is_empty() {
            self.online.phi.apply_step(map_grads, lr);
        }
    }

    /// Largest absolute parameter, for divergence monitoring.
    pub fn max_abs_param(&self) -> f64 {
        let rows = self
            .online
            .rows
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        let map = self
            .online
            .phi
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        rows.max(map)
    }

    /// Bitwise parameter equality with the target network, for sync tests.
    pub fn target_matches_online(&self) -> bool {
        self.online.rows == self.target.rows
            && self
                .online
                .phi
                .layers
                .iter()
                .zip(&self.target.phi.layers)
                .all(|(a, b)| a.weights == b.weights && a.bias == b.bias)
    }
}

fn zero_map_grads(phi: &FeatureMap) -> Vec<LayerGrads> {
    phi.layers
        .iter()
        .map(|l| LayerGrads { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.out_dim] })
        .collect()
}

fn accumulate_map_grads(acc: &mut [LayerGrads], grads: &[LayerGrads], scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.weights.iter_mut().zip(&g.weights) {
            *x += y * scale;
        }
        for (x, y) in a.bias.iter_mut().zip(&g.bias) {
            *x += y * scale;
        }
    }
}

/// Return and transitions of one noise-injected episode (no learning).
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub ret: f64,
    pub transitions: Vec<Transition>,
}

/// Drive one episode: the true state advances the environment while the
/// acted-on and stored observations follow the injection site semantics.
pub fn run_episode(
    agent: &Agent,
    env: &mut ControlEnv,
    injection: &NoiseInjection,
    epsilon: f64,
    rng: &mut ChaCha12Rng,
) -> EpisodeOutcome {
    let true_state = env.reset(rng);
    let mut cur_obs = match injection.site {
        InjectionSite::Current | InjectionSite::Both => {
            agent.perturb_observation(&true_state, &injection.noise, rng)
        }
        InjectionSite::None | InjectionSite::Next => true_state,
    };
    let mut ret = 0.0;
    let mut transitions = Vec::new();

    loop {
        let action = agent.act(&cur_obs, epsilon, rng);
        let (next_true, reward, done) = env.step(action);
        ret += reward;

        let (stored_next, next_cur) = next_observations(agent, injection, &next_true, rng);
        transitions.push(Transition {
            obs: cur_obs,
            action,
            reward,
            next_obs: stored_next,
            done,
        });
        cur_obs = next_cur;
        if done {
            break;
        }
    }
    EpisodeOutcome { ret, transitions }
}

/// Stored next-observation and the following step's acted-on observation
/// for a freshly reached true state.
fn next_observations(
    agent: &Agent,
    injection: &NoiseInjection,
    next_true: &[f64],
    rng: &mut ChaCha12Rng,
) -> (Vec<f64>, Vec<f64>) {
    match injection.site {
        InjectionSite::None => (next_true.to_vec(), next_true.to_vec()),
        // Stored next stays clean; the agent sees a fresh perturbation.
        InjectionSite::Current => (
            next_true.to_vec(),
            agent.perturb_observation(next_true, &injection.noise, rng),
        ),
        // Stored next is perturbed; the agent acts on the clean state.
        InjectionSite::Next => (
            agent.perturb_observation(next_true, &injection.noise, rng),
            next_true.to_vec(),
        ),
        // One perturbation per visited state, reused for both roles.
        InjectionSite::Both => {
            let obs = agent.perturb_observation(next_true, &injection.noise, rng);
            (obs.clone(), obs)
        }
    }
}

/// Per-run training log.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub episode_returns: Vec<f64>,
    /// Mean per-update state-gradient norm within each episode.
    pub episode_grad_norms: Vec<f64>,
    pub diverged: bool,
    pub steps_completed: usize,
    pub grad_bound: Option<f64>,
    pub max_state_grad_norm: f64,
}

impl TrainLog {
    /// Mean return over the last tenth of episodes.
    pub fn final_performance(&self) -> f64 {
        if self.episode_returns.is_empty() {
            return f64::NAN;
        }
        let n = self.episode_returns.len();
        let tail = (n / 10).max(1);
        self.episode_returns[n - tail..].iter().sum::<f64>() / tail as f64
    }
}

/// Full training run, bit-reproducible from `(config, master_seed, run_id)`.
/// Interaction (reset, exploration, noise), replay sampling, and weight
/// initialization each own an independent derived stream.
pub fn train_run(
    cfg: &AgentConfig,
    env_kind: EnvKind,
    injection: &NoiseInjection,
    master_seed: u64,
    run_id: &str,
) -> Result<TrainLog> {
    cfg.validate()?;
    injection.validate()?;
    let mut init_rng = derive_substream(master_seed, run_id, "init");
    let mut interaction_rng = derive_substream(master_seed, run_id, "interaction");
    let mut update_rng = derive_substream(master_seed, run_id, "update");

    let mut agent = Agent::new(cfg.clone(), env_kind, &mut init_rng)?;
    let grad_bound = agent.gradient_bound();
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut env = ControlEnv::new(env_kind);

    let mut log = TrainLog {
        episode_returns: Vec::new(),
        episode_grad_norms: Vec::new(),
        diverged: false,
        steps_completed: 0,
        grad_bound,
        max_state_grad_norm: 0.0,
    };

    let mut step = 0usize;
    'training: while step < cfg.total_steps {
        let true_state = env.reset(&mut interaction_rng);
        let mut cur_obs = match injection.site {
            InjectionSite::Current | InjectionSite::Both => {
                agent.perturb_observation(&true_state, &injection.noise, &mut interaction_rng)
            }
            InjectionSite::None | InjectionSite::Next => true_state,
        };
        let mut ep_return = 0.0;
        let mut ep_grad_sum = 0.0;
        let mut ep_updates = 0usize;

        loop {
            let eps = cfg.epsilon_at(step);
            let action = agent.act(&cur_obs, eps, &mut interaction_rng);
            let (next_true, reward, done) = env.step(action);
            ep_return += reward;

            let (stored_next, next_cur) =
                next_observations(&agent, injection, &next_true, &mut interaction_rng);
            replay.push(Transition {
                obs: cur_obs,
                action,
                reward,
                next_obs: stored_next,
                done,
            });
            cur_obs = next_cur;
            step += 1;

            if replay.len() >= cfg.batch_size {
                let idx = replay.sample_indices(cfg.batch_size, &mut update_rng);
                let batch: Vec<&Transition> = idx.iter().map(|&i| replay.get(i)).collect();
                let diag = agent.update(&batch)?;
                ep_grad_sum += diag.mean_state_grad_norm;
                ep_updates += 1;
                log.max_state_grad_norm = log.max_state_grad_norm.max(diag.max_state_grad_norm);
                if !diag.finite || agent.max_abs_param() > 1e12 {
                    log.diverged = true;
                    log.steps_completed = step;
                    break 'training;
                }
            }

            if done {
                log.episode_returns.push(ep_return);
                log.episode_grad_norms
                    .push(if ep_updates > 0 { ep_grad_sum / ep_updates as f64 } else { 0.0 });
                break;
            }
            if step >= cfg.total_steps {
                // Incomplete final episode is dropped from the log.
                break;
            }
        }
    }
    log.steps_completed = step.min(cfg.total_steps);
    Ok(log)
}
