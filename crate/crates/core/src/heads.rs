//! Value heads and their losses: the squared value error whose state
//! gradient is unbounded, and the k-bin histogram (softmax + cross-entropy)
//! loss whose state gradient is bounded by `k * l * L` for row-norm bound
//! `l` and feature-map Lipschitz bound `L`.

use rand::Rng;

use crate::dist::AtomDistribution;
use crate::error::{Error, Result};
use crate::mlp::{FeatureMap, FeatureTrace, LayerGrads};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Squared value error
// ---------------------------------------------------------------------------

/// Linear value estimate `v(x) = w . x`.
#[derive(Debug, Clone)]
pub struct LinearValueHead {
    pub w: Vec<f64>,
}

impl LinearValueHead {
    pub fn value(&self, x: &[f64]) -> f64 {
        dot(&self.w, x)
    }
}

/// Gradient of the half squared error `(U - w.x)^2 / 2` with respect to the
/// state: `-(U - w.x) w`. Its norm is `|U - w.x| ||w||`.
pub fn ve_gradient_wrt_state(head: &LinearValueHead, x: &[f64], target: f64) -> Vec<f64> {
    let residual = target - head.value(x);
    head.w.iter().map(|w| -residual * w).collect()
}

/// Gradient of `(U - w.x)^2 / 2` with respect to the weights.
pub fn ve_gradient_wrt_params(head: &LinearValueHead, x: &[f64], target: f64) -> Vec<f64> {
    let residual = target - head.value(x);
    x.iter().map(|v| -residual * v).collect()
}

/// Nonlinear value estimate `v(x) = theta . phi(x)`.
#[derive(Debug, Clone)]
pub struct NonlinearValueHead {
    pub phi: FeatureMap,
    pub theta: Vec<f64>,
}

impl NonlinearValueHead {
    pub fn value(&self, x: &[f64]) -> f64 {
        dot(&self.theta, &self.phi.forward(x))
    }
}

/// State gradient of the nonlinear half squared error via the backward
/// pass: `-(U - theta.phi(x)) J_phi(x)^T theta`. Its norm is bounded by
/// `|residual| * ||theta|| * L`.
pub fn ve_gradient_wrt_state_nonlinear(
    head: &NonlinearValueHead,
    x: &[f64],
    target: f64,
) -> Vec<f64> {
    let trace = head.phi.trace(x);
    let residual = target - dot(&head.theta, trace.output());
    let upstream: Vec<f64> = head.theta.iter().map(|t| -residual * t).collect();
    head.phi.backward_input(&trace, &upstream)
}

/// Witness construction for the unbounded squared-error gradient: a head
/// with `||w|| = l`, target 0 (compatible with bounded rewards), and a
/// state scaled along `w` far enough that the gradient norm
/// `|U - w.x| ||w||` exceeds `bound`.
pub fn ve_unboundedness_witness(l: f64, bound: f64, dim: usize) -> (LinearValueHead, Vec<f64>, f64) {
    assert!(l > 0.0 && bound > 0.0 && dim > 0);
    let mut w = vec![0.0; dim];
    w[0] = l;
    // Residual |0 - w.x| = l * t must beat bound / l, so t = bound/l^2 + 1.
    let t = bound / (l * l) + 1.0;
    let mut x = vec![0.0; dim];
    x[0] = t;
    (LinearValueHead { w }, x, 0.0)
}

// ---------------------------------------------------------------------------
// Histogram head
// ---------------------------------------------------------------------------

/// Numerically stabilized softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log softmax = score - logsumexp(scores)`, safe at extreme scores.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let lse = max + z.ln();
    scores.iter().map(|s| s - lse).collect()
}

/// k-bin softmax density head over a fixed support, final rows projected to
/// norm at most `l` at construction and after every update.
#[derive(Debug, Clone)]
pub struct HistogramHead {
    /// Identity for the linear mode.
    pub phi: FeatureMap,
    /// k rows, each of the feature dimension.
    pub rows: Vec<Vec<f64>>,
    pub support: (f64, f64),
    pub norm_bound: f64,
}

impl HistogramHead {
    pub fn new(
        phi: FeatureMap,
        mut rows: Vec<Vec<f64>>,
        support: (f64, f64),
        norm_bound: f64,
    ) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::config("histogram head needs at least 2 bins"));
        }
        if norm_bound <= 0.0 {
            return Err(Error::config("row-norm bound must be positive"));
        }
        let m = phi.out_dim();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::config("row width differs from feature dimension"));
        }
        if !(support.1 > support.0) {
            return Err(Error::config("support must be a non-degenerate interval"));
        }
        project_row_norms(&mut rows, norm_bound);
        Ok(Self { phi, rows, support, norm_bound })
    }

    pub fn random_linear<R: Rng>(
        k: usize,
        dim: usize,
        support: (f64, f64),
        norm_bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let rows = (0..k)
            .map(|_| (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        Self::new(FeatureMap::identity(dim), rows, support, norm_bound)
    }

    pub fn random_nonlinear<R: Rng>(
        k: usize,
        in_dim: usize,
        widths: &[usize],
        support: (f64, f64),
        norm_bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let phi = FeatureMap::random(in_dim, widths, rng);
        let m = phi.out_dim();
        let rows = (0..k)
            .map(|_| (0..m).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        Self::new(phi, rows, support, norm_bound)
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    /// Per-bin scores `phi(x) . w_i`.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let feat = self.phi.forward(x);
        self.rows.iter().map(|r| dot(r, &feat)).collect()
    }

    /// Feature-map Lipschitz upper bound (1 in the linear mode).
    pub fn lipschitz_bound(&self) -> f64 {
        self.phi.lipschitz_bound()
    }

    /// The state-gradient bound `k * l * L`.
    pub fn gradient_bound(&self) -> f64 {
        self.k() as f64 * self.norm_bound * self.lipschitz_bound()
    }

    /// Centers of the k uniform bins over the support.
    pub fn bin_centers(&self) -> Vec<f64> {
        let (lo, hi) = self.support;
        let k = self.k();
        let width = (hi - lo) / k as f64;
        (0..k).map(|i| lo + (i as f64 + 0.5) * width).collect()
    }

    /// Mean of the head's density at `x` under the bin centers.
    pub fn expected_value(&self, x: &[f64]) -> f64 {
        let f = histogram_forward(self, x);
        dot(&f, &self.bin_centers())
    }
}

/// Bin probabilities: stabilized softmax of the per-bin scores.
pub fn histogram_forward(head: &HistogramHead, x: &[f64]) -> Vec<f64> {
    softmax(&head.scores(x))
}

/// Target bin masses for the histogram loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetHistogram {
    p: Vec<f64>,
}

impl TargetHistogram {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::config("target histogram needs at least 2 bins"));
        }
        if p.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::config("target masses must be non-negative"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::config(format!("target masses sum to {total}, expected 1")));
        }
        Ok(Self { p })
    }

    pub fn masses(&self) -> &[f64] {
        &self.p
    }

    pub fn one_hot(k: usize, bin: usize) -> Self {
        let mut p = vec![0.0; k];
        p[bin] = 1.0;
        Self { p }
    }
}

/// Cross-entropy `-sum_i p_i log f_i` from bin probabilities. Errors if a
/// bin with target mass has non-positive density.
pub fn histogram_loss(target: &TargetHistogram, f: &[f64]) -> Result<f64> {
    if f.len() != target.p.len() {
        return Err(Error::config("bin counts differ"));
    }
    let mut loss = 0.0;
    for (p, q) in target.p.iter().zip(f) {
        if *p == 0.0 {
            continue;
        }
        if *q <= 0.0 {
            return Err(Error::Numeric(format!("density {q} is not positive under target mass {p}")));
        }
        loss -= p * q.ln();
    }
    Ok(loss)
}

/// Cross-entropy straight from scores via `score - logsumexp`, which stays
/// finite at extreme inputs where the softmax itself underflows.
pub fn histogram_loss_from_scores(target: &TargetHistogram, scores: &[f64]) -> f64 {
    let logf = log_softmax(scores);
    -target.p.iter().zip(&logf).map(|(p, lf)| p * lf).sum::<f64>()
}

/// Loss of the head at `x` against a target.
pub fn histogram_loss_at(head: &HistogramHead, x: &[f64], target: &TargetHistogram) -> f64 {
    histogram_loss_from_scores(target, &head.scores(x))
}

/// Gradient of the histogram loss with respect to the state:
/// `sum_i (f_i - p_i) grad_x (phi(x) . w_i)`. The norm never exceeds
/// `k * l * L`.
pub fn histogram_grad_wrt_state(
    head: &HistogramHead,
    x: &[f64],
    target: &TargetHistogram,
) -> Vec<f64> {
    let trace = head.phi.trace(x);
    let feat = trace.output();
    let scores: Vec<f64> = head.rows.iter().map(|r| dot(r, feat)).collect();
    let f = softmax(&scores);

    let m = feat.len();
    let mut upstream = vec![0.0; m];
    for ((fi, pi), row) in f.iter().zip(target.p.iter()).zip(&head.rows) {
        let coeff = fi - pi;
        for (u, w) in upstream.iter_mut().zip(row) {
            *u += coeff * w;
        }
    }
    if head.phi.is_identity() {
        return upstream;
    }
    head.phi.backward_input(&trace, &upstream)
}

/// Parameter gradients of the histogram loss: per-row gradients
/// `(f_i - p_i) phi(x)` and, for nonlinear heads, the feature-map gradients
/// through the upstream `sum_i (f_i - p_i) w_i`.
pub struct HistogramParamGrads {
    pub rows: Vec<Vec<f64>>,
    pub map: Vec<LayerGrads>,
}

pub fn histogram_grad_wrt_params(
    head: &HistogramHead,
    trace: &FeatureTrace,
    target: &TargetHistogram,
) -> HistogramParamGrads {
    let feat = trace.output();
    let scores: Vec<f64> = head.rows.iter().map(|r| dot(r, feat)).collect();
    let f = softmax(&scores);

    let rows: Vec<Vec<f64>> = f
        .iter()
        .zip(target.p.iter())
        .map(|(fi, pi)| feat.iter().map(|v| (fi - pi) * v).collect())
        .collect();

    let map = if head.phi.is_identity() {
        Vec::new()
    } else {
        let m = feat.len();
        let mut upstream = vec![0.0; m];
        for ((fi, pi), row) in f.iter().zip(target.p.iter()).zip(&head.rows) {
            let coeff = fi - pi;
            for (u, w) in upstream.iter_mut().zip(row) {
                *u += coeff * w;
            }
        }
        head.phi.backward_params(trace, &upstream).0
    };
    HistogramParamGrads { rows, map }
}

/// Rescale any row with norm above `l` back to norm `l`; rows within the
/// bound are untouched. The gate carries a relative 1e-12 tolerance so the
/// projection is exactly idempotent despite rescaling round-off.
pub fn project_row_norms(rows: &mut [Vec<f64>], l: f64) {
    for row in rows {
        let n = norm(row);
        if n > l * (1.0 + 1e-12) {
            let scale = l / n;
            for v in row {
                *v *= scale;
            }
        }
    }
}

/// Assign each atom's mass to its uniform bin over the support. Atoms on a
/// bin boundary go to the lower bin; atoms outside are clamped to the first
/// or last bin.
pub fn project_target_distribution(
    atoms: &AtomDistribution,
    support: (f64, f64),
    k: usize,
) -> Result<TargetHistogram> {
    if k < 2 {
        return Err(Error::config("need at least 2 bins"));
    }
    let (lo, hi) = support;
    if !(hi > lo) {
        return Err(Error::config("support must be a non-degenerate interval"));
    }
    let width = (hi - lo) / k as f64;
    let mut p = vec![0.0; k];
    for (&a, &mass) in atoms.atoms().iter().zip(atoms.probs()) {
        let idx = ((a - lo) / width).ceil() as isize - 1;
        let idx = idx.clamp(0, k as isize - 1) as usize;
        p[idx] += mass;
    }
    TargetHistogram::new(p)
}
