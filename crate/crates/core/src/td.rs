//! Linear TD(0) convergence analysis under feature perturbations, TD
//! simulation, and the influence function of one outlier transition.
//!
//! The update `w += a_t (R + gamma w'x_next - w'x_t) x_t` has expected
//! dynamics governed by a case-specific matrix: noise can enter the current
//! feature, the next feature, or both, and each case has its own positive
//! definiteness condition for convergence to the corresponding fixed point.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigenvalues, lu_solve, symmetric_part};

/// Which feature(s) the perturbation row is added to during a TD step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseCase {
    None,
    Current,
    Next,
    Both,
}

impl NoiseCase {
    pub const ALL: [NoiseCase; 4] = [NoiseCase::None, NoiseCase::Current, NoiseCase::Next, NoiseCase::Both];

    pub fn label(&self) -> &'static str {
        match self {
            NoiseCase::None => "none",
            NoiseCase::Current => "current",
            NoiseCase::Next => "next",
            NoiseCase::Both => "both",
        }
    }

    fn perturb_current(&self) -> bool {
        matches!(self, NoiseCase::Current | NoiseCase::Both)
    }

    fn perturb_next(&self) -> bool {
        matches!(self, NoiseCase::Next | NoiseCase::Both)
    }
}

/// Markov reward process with linear features and a perturbation matrix.
#[derive(Debug, Clone)]
pub struct LinearTdSystem {
    features: Array2<f64>,     // |S| x d
    transition: Array2<f64>,   // |S| x |S|
    stationary: Array1<f64>,   // mu
    perturbation: Array2<f64>, // |S| x d
    rewards: Array2<f64>,      // R(s, s')
    gamma: f64,
}

impl LinearTdSystem {
    pub fn new(
        features: Array2<f64>,
        transition: Array2<f64>,
        perturbation: Array2<f64>,
        rewards: Array2<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let n = features.nrows();
        if transition.dim() != (n, n) || rewards.dim() != (n, n) {
            return Err(Error::config("transition/reward shapes differ from feature rows"));
        }
        if perturbation.dim() != features.dim() {
            return Err(Error::config("perturbation shape differs from features"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::config(format!("gamma {gamma} not strictly inside (0, 1)")));
        }
        for s in 0..n {
            let sum: f64 = transition.row(s).sum();
            if (sum - 1.0).abs() > 1e-12 || transition.row(s).iter().any(|p| *p < 0.0) {
                return Err(Error::config(format!("transition row {s} is not a distribution")));
            }
        }
        let stationary = stationary_distribution(&transition)?;
        Ok(Self { features, transition, stationary, perturbation, rewards, gamma })
    }

    /// Random system: strictly positive Dirichlet(1) chain, standard-normal
    /// features, rewards uniform in [0, 1], and a normal perturbation scaled
    /// so its Frobenius norm is `rho` times that of the features.
    pub fn random<R: Rng>(
        n_states: usize,
        dim: usize,
        gamma: f64,
        rho: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut transition = Array2::zeros((n_states, n_states));
        for s in 0..n_states {
            let row: Vec<f64> =
                (0..n_states).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let sum: f64 = row.iter().sum();
            for (k, v) in row.iter().enumerate() {
                transition[[s, k]] = v / sum;
            }
        }
        let normal = |rng: &mut R| -> f64 {
            // Box-Muller keeps this independent of rand_distr.
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random::<f64>();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let features = Array2::from_shape_fn((n_states, dim), |_| normal(rng));
        let raw = Array2::from_shape_fn((n_states, dim), |_| normal(rng));
        let fx: f64 = features.iter().map(|v| v * v).sum::<f64>().sqrt();
        let fr: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let perturbation = raw * (rho * fx / fr);
        let rewards = Array2::from_shape_fn((n_states, n_states), |_| rng.random::<f64>());
        Self::new(features, transition, perturbation, rewards, gamma)
    }

    pub fn n_states(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn stationary(&self) -> &Array1<f64> {
        &self.stationary
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn perturbation(&self) -> &Array2<f64> {
        &self.perturbation
    }

    pub fn transition(&self) -> &Array2<f64> {
        &self.transition
    }

    pub fn reward(&self, s: usize, next: usize) -> f64 {
        self.rewards[[s, next]]
    }

    fn current_feature(&self, s: usize, case: NoiseCase) -> Array1<f64> {
        let mut x = self.features.row(s).to_owned();
        if case.perturb_current() {
            x += &self.perturbation.row(s);
        }
        x
    }

    fn next_feature(&self, s: usize, case: NoiseCase) -> Array1<f64> {
        let mut x = self.features.row(s).to_owned();
        if case.perturb_next() {
            x += &self.perturbation.row(s);
        }
        x
    }
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
///
/// The chain must be primitive, checked by strict positivity of
/// `P^{|S|}`; otherwise an analysis error is returned.
pub fn stationary_distribution(p: &Array2<f64>) -> Result<Array1<f64>> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::config("transition matrix must be square"));
    }
    let mut power = Array2::eye(n);
    for _ in 0..n {
        power = power.dot(p);
    }
    if power.iter().any(|v| *v <= 0.0) {
        return Err(Error::analysis(
            "chain is not primitive (P^{|S|} has non-positive entries)",
        ));
    }

    let mut mu = Array1::from_elem(n, 1.0 / n as f64);
    for _ in 0..1_000_000 {
        let mut next = mu.dot(p);
        let total: f64 = next.sum();
        next /= total;
        let change = mu
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        mu = next;
        if change <= 1e-13 {
            return Ok(mu);
        }
    }
    Err(Error::analysis("power iteration did not reach tolerance"))
}

/// Case-specific convergence matrix, assembled from the definitional sum
/// `sum_s mu(s) sum_s' P(s,s') x_t(s) (x_t(s) - gamma x_next(s'))^T` with
/// the perturbation row added per case.
pub fn convergence_matrix(sys: &LinearTdSystem, case: NoiseCase) -> Array2<f64> {
    let (n, d) = (sys.n_states(), sys.dim());
    let mut out = Array2::zeros((d, d));
    for s in 0..n {
        let mu = sys.stationary[s];
        let x_t = sys.current_feature(s, case);
        // Expected discounted next feature under P(s, .).
        let mut x_next = Array1::zeros(d);
        for next in 0..n {
            let p = sys.transition[[s, next]];
            if p > 0.0 {
                x_next += &(sys.next_feature(next, case) * p);
            }
        }
        for i in 0..d {
            for j in 0..d {
                out[[i, j]] += mu * x_t[i] * (x_t[j] - sys.gamma * x_next[j]);
            }
        }
    }
    out
}

/// The factored forms of the convergence matrices, used as an algebraic
/// cross-check of the definitional sums.
pub fn convergence_matrix_factored(sys: &LinearTdSystem, case: NoiseCase) -> Array2<f64> {
    let n = sys.n_states();
    let x = &sys.features;
    let e = &sys.perturbation;
    let xe = x + e;
    let d_mat = Array2::from_diag(&sys.stationary);
    let mut i_gp = Array2::eye(n);
    i_gp -= &(sys.gamma * &sys.transition);
    let dp = d_mat.dot(&sys.transition);

    match case {
        NoiseCase::None => x.t().dot(&d_mat).dot(&i_gp).dot(x),
        NoiseCase::Both => xe.t().dot(&d_mat).dot(&i_gp).dot(&xe),
        NoiseCase::Current => {
            let base = xe.t().dot(&d_mat).dot(&i_gp).dot(&xe);
            base + &(sys.gamma * xe.t().dot(&dp).dot(e))
        }
        NoiseCase::Next => {
            let base = x.t().dot(&d_mat).dot(&i_gp).dot(x);
            base - &(sys.gamma * x.t().dot(&dp).dot(e))
        }
    }
}

/// `X^T D P E`, the cross term whose definiteness governs cases with
/// single-sided noise.
pub fn cross_term(sys: &LinearTdSystem) -> Array2<f64> {
    let d_mat = Array2::from_diag(&sys.stationary);
    sys.features.t().dot(&d_mat).dot(&sys.transition).dot(&sys.perturbation)
}

/// `(X+E)^T D P E`, the condition matrix for current-feature noise.
pub fn current_condition_matrix(sys: &LinearTdSystem) -> Array2<f64> {
    let d_mat = Array2::from_diag(&sys.stationary);
    let xe = &sys.features + &sys.perturbation;
    xe.t().dot(&d_mat).dot(&sys.transition).dot(&sys.perturbation)
}

/// Target vector `b`: the perturbation enters through whichever feature
/// multiplies the TD error, i.e. the (possibly perturbed) current feature.
pub fn td_target_vector(sys: &LinearTdSystem, case: NoiseCase) -> Array1<f64> {
    let (n, d) = (sys.n_states(), sys.dim());
    let mut b = Array1::zeros(d);
    for s in 0..n {
        let mu = sys.stationary[s];
        let x_t = sys.current_feature(s, case);
        let mut expected_reward = 0.0;
        for next in 0..n {
            expected_reward += sys.transition[[s, next]] * sys.rewards[[s, next]];
        }
        b += &(x_t * (mu * expected_reward));
    }
    b
}

/// Fixed point `A_case^{-1} b_case` of the expected TD update.
pub fn td_fixed_point(sys: &LinearTdSystem, case: NoiseCase) -> Result<Array1<f64>> {
    let a = convergence_matrix(sys, case);
    let b = td_target_vector(sys, case);
    lu_solve(&a, &b)
}

/// Positive definiteness via the minimum eigenvalue of the symmetric part,
/// computed with cyclic Jacobi sweeps. The flag is `min_eig > 1e-10`.
pub fn is_positive_definite(m: &Array2<f64>) -> Result<(bool, f64)> {
    if m.nrows() != m.ncols() {
        return Err(Error::config("matrix must be square"));
    }
    let eigs = jacobi_eigenvalues(&symmetric_part(m))?;
    let min_eig = eigs[0];
    Ok((min_eig > 1e-10, min_eig))
}

/// Robbins-Monro style schedule `alpha_t = a / (b + t)`.
#[derive(Debug, Clone, Copy)]
pub struct StepSchedule {
    pub a: f64,
    pub b: f64,
}

impl StepSchedule {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if a <= 0.0 || b <= 0.0 {
            return Err(Error::config("schedule parameters must be positive"));
        }
        if a / b > 1.0 {
            return Err(Error::config("alpha_0 = a/b must not exceed 1"));
        }
        Ok(Self { a, b })
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.a / (self.b + t as f64)
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { a: 1.0, b: 100.0 }
    }
}

/// Threshold on any weight coordinate beyond which a run is flagged
/// divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Weight trajectory from a TD simulation.
#[derive(Debug, Clone)]
pub struct TdTrajectory {
    /// (step, weights) at logarithmically spaced checkpoints.
    pub checkpoints: Vec<(usize, Array1<f64>)>,
    pub final_w: Array1<f64>,
    pub diverged: bool,
    pub steps_run: usize,
}

/// Simulate TD(0) along the stationary chain, injecting the perturbation
/// row into the current/next feature per case. Weights start at zero; the
/// trajectory is truncated and flagged when any coordinate passes the
/// divergence threshold.
pub fn td_simulate<R: Rng>(
    sys: &LinearTdSystem,
    case: NoiseCase,
    steps: usize,
    schedule: StepSchedule,
    rng: &mut R,
) -> TdTrajectory {
    let d = sys.dim();
    let mut w: Array1<f64> = Array1::zeros(d);
    let mut checkpoints = vec![(0usize, w.clone())];
    let mut next_checkpoint = 1usize;

    let sample = |cdf_row: ndarray::ArrayView1<f64>, u: f64| -> usize {
        let mut acc = 0.0;
        for (i, p) in cdf_row.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        cdf_row.len() - 1
    };

    // Initial state from the stationary distribution.
    let mut s = {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = sys.n_states() - 1;
        for (i, p) in sys.stationary.iter().enumerate() {
            acc += p;
            if u < acc {
                idx = i;
                break;
            }
        }
        idx
    };

    for t in 0..steps {
        let next = sample(sys.transition.row(s), rng.random());
        let reward = sys.rewards[[s, next]];
        let x_t = sys.current_feature(s, case);
        let x_next = sys.next_feature(next, case);

        let pred_next: f64 = w.dot(&x_next);
        let pred_cur: f64 = w.dot(&x_t);
        let delta = reward + sys.gamma * pred_next - pred_cur;
        let alpha = schedule.alpha(t);
        w.scaled_add(alpha * delta, &x_t);

        if w.iter().any(|v| v.abs() > DIVERGENCE_THRESHOLD || !v.is_finite()) {
            checkpoints.push((t + 1, w.clone()));
            return TdTrajectory { checkpoints, final_w: w, diverged: true, steps_run: t + 1 };
        }
        if t + 1 == next_checkpoint {
            checkpoints.push((t + 1, w.clone()));
            next_checkpoint *= 2;
        }
        s = next;
    }
    checkpoints.push((steps, w.clone()));
    TdTrajectory { checkpoints, final_w: w, diverged: false, steps_run: steps }
}

/// Influence of one outlier transition on the TD least-squares estimator.
#[derive(Debug, Clone)]
pub struct InfluenceResult {
    pub psi: Array1<f64>,
}

/// Closed-form influence function
/// `psi = (A^T A)^{-1} d_t (x_t^T x_t) (R - d_t^T w)` with
/// `d_t = x_t - gamma x_next`. Errors when `A^T A` has an eigenvalue at or
/// below 1e-12.
pub fn influence_function(
    a: &Array2<f64>,
    x_t: &Array1<f64>,
    x_next: &Array1<f64>,
    reward: f64,
    w: &Array1<f64>,
    gamma: f64,
) -> Result<InfluenceResult> {
    let ata = a.t().dot(a);
    let eigs = jacobi_eigenvalues(&symmetric_part(&ata))?;
    if eigs[0] <= 1e-12 {
        return Err(Error::analysis(format!(
            "A^T A is numerically singular (min eigenvalue {:e})",
            eigs[0]
        )));
    }
    let d_t = x_t - &(gamma * x_next);
    let residual = reward - d_t.dot(w);
    let rhs = &d_t * (x_t.dot(x_t) * residual);
    let psi = lu_solve(&ata, &rhs)?;
    Ok(InfluenceResult { psi })
}

/// Estimator of the contaminated regression
/// `min_w (1-eps) ||b - A w||^2 + eps ||y - x_A^T w||^2` for the outlier
/// pair, solved in closed form. `(refit(eps) - refit(0)) / eps` converges
/// to the influence function at a first-order rate in eps.
pub fn contaminated_refit(
    a: &Array2<f64>,
    b: &Array1<f64>,
    x_t: &Array1<f64>,
    x_next: &Array1<f64>,
    reward: f64,
    gamma: f64,
    epsilon: f64,
) -> Result<Array1<f64>> {
    let d_t = x_t - &(gamma * x_next);
    let xtx = x_t.dot(x_t);
    // x_A = d_t x_t^T, y = R x_t, so x_A x_A^T = (x_t^T x_t) d_t d_t^T and
    // x_A y = R (x_t^T x_t) d_t.
    let d = a.ncols();
    let mut m = a.t().dot(a) * (1.0 - epsilon);
    for i in 0..d {
        for j in 0..d {
            m[[i, j]] += epsilon * xtx * d_t[i] * d_t[j];
        }
    }
    let mut rhs = a.t().dot(b) * (1.0 - epsilon);
    rhs += &(&d_t * (epsilon * reward * xtx));
    lu_solve(&m, &rhs)
}

/// Both sides of the current-vs-next perturbation trade-off.
#[derive(Debug, Clone)]
pub struct TradeoffResult {
    /// Exact change of the (prefactor-free) influence term when eta is
    /// added to the current feature.
    pub delta_current: Array1<f64>,
    /// Exact change when eta is added to the next feature.
    pub delta_next: Array1<f64>,
    /// `gamma * delta_current + delta_next`.
    pub lhs: Array1<f64>,
    /// First-order right side `2 gamma (eta^T x_t) (R - d_t^T w) d_t`.
    pub rhs: Array1<f64>,
    /// `|| lhs - rhs ||`, second order in `||eta||`.
    pub residual: f64,
    /// True when `||eta|| / ||x_t||` exceeds 0.1 and the first-order
    /// comparison is unreliable.
    pub eta_ratio_warning: bool,
}

fn influence_core(d_t: &Array1<f64>, x_t: &Array1<f64>, reward: f64, w: &Array1<f64>) -> Array1<f64> {
    d_t * (x_t.dot(x_t) * (reward - d_t.dot(w)))
}

/// Exact left side, first-order right side, and their gap for the
/// influence trade-off between perturbing the current and the next state
/// feature with the same eta.
pub fn corollary_tradeoff(
    x_t: &Array1<f64>,
    x_next: &Array1<f64>,
    reward: f64,
    w: &Array1<f64>,
    eta: &Array1<f64>,
    gamma: f64,
) -> TradeoffResult {
    let d_t = x_t - &(gamma * x_next);
    let base = influence_core(&d_t, x_t, reward, w);

    let x_cur = x_t + eta;
    let d_cur = &x_cur - &(gamma * x_next);
    let delta_current = influence_core(&d_cur, &x_cur, reward, w) - &base;

    let d_next = &d_t - &(gamma * eta);
    let delta_next = influence_core(&d_next, x_t, reward, w) - &base;

    let lhs = &(gamma * &delta_current) + &delta_next;
    let rhs = &d_t * (2.0 * gamma * eta.dot(x_t) * (reward - d_t.dot(w)));
    let residual = (&lhs - &rhs).iter().map(|v| v * v).sum::<f64>().sqrt();

    let eta_norm = eta.dot(eta).sqrt();
    let x_norm = x_t.dot(x_t).sqrt().max(1e-300);
    TradeoffResult {
        delta_current,
        delta_next,
        lhs,
        rhs,
        residual,
        eta_ratio_warning: eta_norm / x_norm > 0.1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_system(rng: &mut ChaCha12Rng) -> LinearTdSystem {
        LinearTdSystem::random(4, 3, 0.9, 0.05, rng).unwrap()
    }

    #[test]
    fn stationary_single_state() {
        let p = array![[1.0]];
        let mu = stationary_distribution(&p).unwrap();
        assert_eq!(mu[0], 1.0);
    }

    #[test]
    fn stationary_symmetric_two_state() {
        let p = array![[0.5, 0.5], [0.5, 0.5]];
        let mu = stationary_distribution(&p).unwrap();
        assert_abs_diff_eq!(mu[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(mu[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn periodic_chain_is_rejected() {
        let p = array![[0.0, 1.0], [1.0, 0.0]];
        assert!(stationary_distribution(&p).is_err());
    }

    #[test]
    fn stationary_matches_dense_eigen_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let sys = random_system(&mut rng);
        let p = sys.transition();
        let mu = stationary_distribution(p).unwrap();

        // Oracle: solve (P^T - I) mu = 0 with the last equation replaced by
        // the normalization sum(mu) = 1.
        let n = p.nrows();
        let mut m = p.t().to_owned();
        for i in 0..n {
            m[[i, i]] -= 1.0;
        }
        for j in 0..n {
            m[[n - 1, j]] = 1.0;
        }
        let mut rhs = Array1::zeros(n);
        rhs[n - 1] = 1.0;
        let oracle = lu_solve(&m, &rhs).unwrap();
        for s in 0..n {
            assert_abs_diff_eq!(mu[s], oracle[s], epsilon = 1e-10);
        }
        // And mu^T P = mu^T.
        let mu_p = mu.dot(p);
        for s in 0..n {
            assert_abs_diff_eq!(mu_p[s], mu[s], epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_perturbation_makes_cases_identical() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut sys = random_system(&mut rng);
        sys.perturbation = Array2::zeros(sys.perturbation.dim());
        let base = convergence_matrix(&sys, NoiseCase::None);
        for case in NoiseCase::ALL {
            assert_eq!(convergence_matrix(&sys, case), base);
        }
    }

    #[test]
    fn definitional_sums_match_factored_forms() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let sys = random_system(&mut rng);
        for case in NoiseCase::ALL {
            let sum = convergence_matrix(&sys, case);
            let factored = convergence_matrix_factored(&sys, case);
            for (a, b) in sum.iter().zip(factored.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn current_minus_both_is_the_cross_condition_matrix() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let sys = random_system(&mut rng);
        let diff = convergence_matrix(&sys, NoiseCase::Current)
            - convergence_matrix(&sys, NoiseCase::Both);
        let expect = sys.gamma * current_condition_matrix(&sys);
        for (a, b) in diff.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn convergence_matrix_matches_monte_carlo() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let sys = LinearTdSystem::random(3, 2, 0.9, 0.05, &mut rng).unwrap();
        let case = NoiseCase::Current;
        let expect = convergence_matrix(&sys, case);

        let n_samples = 1_000_000usize;
        let d = sys.dim();
        let mut sum = Array2::<f64>::zeros((d, d));
        let mut sum_sq = Array2::<f64>::zeros((d, d));
        // Draw (s, s') from mu x P directly; averaging the outer product
        // x_t (x_t - gamma x_next)^T reproduces the definitional sum.
        for _ in 0..n_samples {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut s = sys.n_states() - 1;
            for (i, p) in sys.stationary().iter().enumerate() {
                acc += p;
                if u < acc {
                    s = i;
                    break;
                }
            }
            let u2: f64 = rng.random();
            let mut acc2 = 0.0;
            let mut next = sys.n_states() - 1;
            for i in 0..sys.n_states() {
                acc2 += sys.transition()[[s, i]];
                if u2 < acc2 {
                    next = i;
                    break;
                }
            }
            let x_t = sys.current_feature(s, case);
            let x_n = sys.next_feature(next, case);
            for i in 0..d {
                for j in 0..d {
                    let term = x_t[i] * (x_t[j] - sys.gamma * x_n[j]);
                    sum[[i, j]] += term;
                    sum_sq[[i, j]] += term * term;
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                let mean = sum[[i, j]] / n_samples as f64;
                let var = (sum_sq[[i, j]] / n_samples as f64 - mean * mean).max(0.0);
                let se = (var / n_samples as f64).sqrt();
                assert!(
                    (mean - expect[[i, j]]).abs() <= 3.0 * se + 1e-9,
                    "entry ({i},{j}): mc {mean} vs exact {} (se {se})",
                    expect[[i, j]]
                );
            }
        }
    }

    #[test]
    fn pd_check_identity_and_negation() {
        let eye: Array2<f64> = Array2::eye(3);
        let (flag, min_eig) = is_positive_definite(&eye).unwrap();
        assert!(flag);
        assert_abs_diff_eq!(min_eig, 1.0, epsilon = 1e-12);
        let neg = -eye;
        let (flag, min_eig) = is_positive_definite(&neg).unwrap();
        assert!(!flag);
        assert_abs_diff_eq!(min_eig, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn pd_check_gram_matrix_shift() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
        let mut m = x.t().dot(&x);
        for i in 0..3 {
            m[[i, i]] += 0.1;
        }
        let (flag, min_eig) = is_positive_definite(&m).unwrap();
        assert!(flag);
        assert!(min_eig >= 0.1 - 1e-9);
    }

    #[test]
    fn pd_check_agrees_with_unit_vector_sampling() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..20 {
            let d = 3;
            let m = Array2::from_shape_fn((d, d), |_| rng.random::<f64>() * 2.0 - 1.0);
            let (flag, _) = is_positive_definite(&m).unwrap();
            if flag {
                for _ in 0..10_000 {
                    let mut v = Array1::from_shape_fn(d, |_| rng.random::<f64>() * 2.0 - 1.0);
                    let norm = v.dot(&v).sqrt();
                    if norm < 1e-12 {
                        continue;
                    }
                    v /= norm;
                    let quad = v.dot(&m.dot(&v));
                    assert!(quad > 0.0, "sampled violation of claimed positive definiteness");
                }
            }
        }
    }

    #[test]
    fn simulation_without_noise_finds_td_fixed_point() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let sys = LinearTdSystem::random(2, 2, 0.9, 0.0, &mut rng).unwrap();
        let target = td_fixed_point(&sys, NoiseCase::None).unwrap();

        let seeds = 20;
        let mut mean = Array1::zeros(sys.dim());
        for seed in 0..seeds {
            let mut run_rng = ChaCha12Rng::seed_from_u64(100 + seed);
            let schedule = StepSchedule::new(20.0, 20.0).unwrap();
            let traj = td_simulate(&sys, NoiseCase::None, 400_000, schedule, &mut run_rng);
            assert!(!traj.diverged);
            mean += &traj.final_w;
        }
        mean /= seeds as f64;
        let err = (&mean - &target).iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = target.dot(&target).sqrt();
        assert!(err / scale < 1e-2, "relative error {}", err / scale);
    }

    #[test]
    fn both_case_converges_to_perturbed_fixed_point() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let sys = LinearTdSystem::random(3, 2, 0.9, 0.1, &mut rng).unwrap();
        let a_both = convergence_matrix(&sys, NoiseCase::Both);
        let (pd, _) = is_positive_definite(&a_both).unwrap();
        assert!(pd, "fixture should have a positive definite both-case matrix");
        let target = td_fixed_point(&sys, NoiseCase::Both).unwrap();

        let seeds = 10;
        let mut mean = Array1::zeros(sys.dim());
        for seed in 0..seeds {
            let mut run_rng = ChaCha12Rng::seed_from_u64(300 + seed);
            let schedule = StepSchedule::new(20.0, 20.0).unwrap();
            let traj = td_simulate(&sys, NoiseCase::Both, 400_000, schedule, &mut run_rng);
            assert!(!traj.diverged);
            mean += &traj.final_w;
        }
        mean /= seeds as f64;
        let err = (&mean - &target).iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = target.dot(&target).sqrt();
        assert!(err / scale < 5e-2, "relative error {}", err / scale);
    }

    #[test]
    fn constructed_next_case_with_negative_definite_cross_term_fails() {
        // E = c (D P)^{-1} X makes -X^T D P E = -c X^T X negative definite;
        // for large c the next-case dynamics lose positive definiteness and
        // the simulation diverges or lands far from the clean fixed point.
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let base = LinearTdSystem::random(3, 2, 0.9, 0.0, &mut rng).unwrap();
        let d_mat = Array2::from_diag(&base.stationary);
        let dp = d_mat.dot(&base.transition);
        let dp_inv = crate::linalg::lu_inverse(&dp).unwrap();
        let c = 40.0;
        let e = dp_inv.dot(&base.features) * c;
        let sys = LinearTdSystem::new(
            base.features.clone(),
            base.transition.clone(),
            e,
            base.rewards.clone(),
            0.9,
        )
        .unwrap();

        let neg_cross = -cross_term(&sys);
        let (pd, min_eig) = is_positive_definite(&neg_cross).unwrap();
        assert!(!pd && min_eig < 0.0, "cross term should be negative definite");
        let (a_next_pd, _) =
            is_positive_definite(&convergence_matrix(&sys, NoiseCase::Next)).unwrap();
        assert!(!a_next_pd);

        let clean_target = td_fixed_point(&sys, NoiseCase::None).unwrap();
        let schedule = StepSchedule::new(1.0, 100.0).unwrap();
        let mut run_rng = ChaCha12Rng::seed_from_u64(7);
        let traj = td_simulate(&sys, NoiseCase::Next, 200_000, schedule, &mut run_rng);
        if !traj.diverged {
            let err = (&traj.final_w - &clean_target)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let scale = clean_target.dot(&clean_target).sqrt().max(1e-12);
            assert!(err / scale > 10.0, "expected miss by >10x, got {}", err / scale);
        }
    }

    #[test]
    fn influence_zero_residual_is_zero() {
        let a = array![[2.0, 0.3], [0.1, 1.5]];
        let x_t = array![1.0, -0.5];
        let x_next = array![0.25, 0.75];
        let w = array![0.4, -0.2];
        let gamma = 0.9;
        let d_t: Array1<f64> = &x_t - &(gamma * &x_next);
        let reward = d_t.dot(&w);
        let out = influence_function(&a, &x_t, &x_next, reward, &w, gamma).unwrap();
        for v in out.psi.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn influence_is_linear_in_residual() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let a = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() + 0.2)
            + Array2::<f64>::eye(3) * 2.0;
        let x_t = Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
        let x_next = Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
        let w = Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
        let gamma = 0.9;
        let d_t = &x_t - &(gamma * &x_next);
        let base = d_t.dot(&w);

        let r1 = base + 0.7;
        let r2 = base + 1.4;
        let psi1 = influence_function(&a, &x_t, &x_next, r1, &w, gamma).unwrap().psi;
        let psi2 = influence_function(&a, &x_t, &x_next, r2, &w, gamma).unwrap().psi;
        for (one, two) in psi1.iter().zip(psi2.iter()) {
            assert_abs_diff_eq!(2.0 * one, *two, epsilon = 1e-12);
        }
    }

    #[test]
    fn influence_scaling_matches_formula_reevaluation() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let a = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() + 0.1)
            + Array2::<f64>::eye(3) * 2.0;
        let x_t = Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
        let x_next = Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
        let w = Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
        let (gamma, reward, c) = (0.9, 0.8, 3.0);

        let scaled_x = &x_t * c;
        let got = influence_function(&a, &scaled_x, &x_next, reward, &w, gamma).unwrap().psi;
        // Direct re-evaluation of the formula with the scaled inputs.
        let d_t = &scaled_x - &(gamma * &x_next);
        let rhs = &d_t * (scaled_x.dot(&scaled_x) * (reward - d_t.dot(&w)));
        let expect = lu_solve(&a.t().dot(&a), &rhs).unwrap();
        for (g, e) in got.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn contaminated_refit_converges_first_order() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let a = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() - 0.5)
            + Array2::<f64>::eye(3) * 2.0;
        let b = Array1::from_shape_fn(3, |_| rng.random::<f64>());
        let x_t = Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
        let x_next = Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
        let (gamma, reward) = (0.9, 0.6);

        let w0 = contaminated_refit(&a, &b, &x_t, &x_next, reward, gamma, 0.0).unwrap();
        let psi = influence_function(&a, &x_t, &x_next, reward, &w0, gamma).unwrap().psi;

        let mut errs = Vec::new();
        for eps in [1e-3, 1e-4, 1e-5] {
            let w_eps = contaminated_refit(&a, &b, &x_t, &x_next, reward, gamma, eps).unwrap();
            let numeric = (&w_eps - &w0) / eps;
            let err = (&numeric - &psi).iter().map(|v| v * v).sum::<f64>().sqrt();
            errs.push(err);
        }
        // First-order rate: error drops by ~10x per decade of eps.
        let slope = (errs[0] / errs[2]).log10() / 2.0;
        assert!(
            (0.8..=1.2).contains(&slope),
            "observed rate {slope} errors {errs:?}"
        );
    }

    #[test]
    fn tradeoff_zero_eta_is_exact() {
        let x_t = array![1.0, 2.0];
        let x_next = array![0.5, -0.5];
        let w = array![0.3, 0.1];
        let eta = array![0.0, 0.0];
        let out = corollary_tradeoff(&x_t, &x_next, 1.0, &w, &eta, 0.9);
        assert_eq!(out.residual, 0.0);
        assert!(out.lhs.iter().all(|v| *v == 0.0));
        assert!(out.rhs.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tradeoff_residual_shrinks_second_order() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        for _ in 0..50 {
            let d = 3;
            let x_t = Array1::from_shape_fn(d, |_| rng.random::<f64>() + 0.5);
            let x_next = Array1::from_shape_fn(d, |_| rng.random::<f64>() - 0.5);
            let w = Array1::from_shape_fn(d, |_| rng.random::<f64>() - 0.5);
            let eta = Array1::from_shape_fn(d, |_| (rng.random::<f64>() - 0.5) * 0.02);
            let reward = rng.random::<f64>();

            let full = corollary_tradeoff(&x_t, &x_next, reward, &w, &eta, 0.9);
            let half = corollary_tradeoff(&x_t, &x_next, reward, &w, &(&eta * 0.5), 0.9);
            assert!(!full.eta_ratio_warning);
            if full.residual > 1e-14 {
                assert!(
                    half.residual <= full.residual / 3.0,
                    "halving eta reduced residual only {}x",
                    full.residual / half.residual
                );
            }
        }
    }

    #[test]
    fn tradeoff_matches_scalar_symbolic_expansion() {
        // d = 1: everything is polynomial in scalars and can be expanded by
        // hand. With x, y, w, h and d = x - gamma*y:
        //   delta_cur  = (d+h)(x+h)^2 (R - (d+h)w) - d x^2 (R - d w)
        //   delta_next = (d-gamma*h) x^2 (R - d w + gamma*h*w) - d x^2 (R - d w)
        let (x, y, w, h, r, gamma) = (1.3f64, -0.7f64, 0.45f64, 0.02f64, 0.9f64, 0.9f64);
        let d = x - gamma * y;
        let delta_cur = (d + h) * (x + h) * (x + h) * (r - (d + h) * w) - d * x * x * (r - d * w);
        let delta_next =
            (d - gamma * h) * x * x * (r - d * w + gamma * h * w) - d * x * x * (r - d * w);
        let rhs = 2.0 * gamma * d * h * x * (r - d * w);

        let out = corollary_tradeoff(
            &array![x],
            &array![y],
            r,
            &array![w],
            &array![h],
            gamma,
        );
        assert_abs_diff_eq!(out.delta_current[0], delta_cur, epsilon = 1e-14);
        assert_abs_diff_eq!(out.delta_next[0], delta_next, epsilon = 1e-14);
        assert_abs_diff_eq!(out.rhs[0], rhs, epsilon = 1e-14);
        assert_abs_diff_eq!(
            out.residual,
            (gamma * delta_cur + delta_next - rhs).abs(),
            epsilon = 1e-14
        );
    }
}
