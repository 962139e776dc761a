//! Finite-atom return distributions and the distributional Bellman backup.
//!
//! A backup produces, per (s, a), the finite mixture of reward-shifted and
//! discount-scaled next-entry distributions. Exact mixtures grow without
//! bound, so after every backup atoms closer than [`ATOM_MERGE_TOL`] are
//! merged at their mass-weighted mean (which preserves the expectation
//! exactly), and any entry still above the atom cap is projected onto a
//! uniform grid over the return support by a two-point linear split, which
//! preserves both mass and mean for in-support atoms.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mdp::{greedy_adversarial_noise, merged_policy, AllowedSets, Policy, TabularMdp, TabularNoise};
use crate::wasserstein::{wasserstein_inf_floored, wasserstein_p, Order};

/// Atoms closer than this are merged after a backup.
pub const ATOM_MERGE_TOL: f64 = 1e-9;
/// Default per-entry atom cap before grid projection.
pub const DEFAULT_ATOM_CAP: usize = 512;
/// Sweep cap for distributional fixed-point iteration.
pub const MAX_SWEEPS: usize = 1_000_000;

/// Tolerance on total probability mass.
const MASS_TOL: f64 = 1e-10;

/// Post-backup compression policy.
#[derive(Debug, Clone, Copy)]
pub struct Compression {
    pub merge_tol: f64,
    pub cap: usize,
    /// Return support used by the grid projection.
    pub support: (f64, f64),
}

impl Compression {
    /// Default compression for an MDP: cap 512 over
    /// `[r_min, r_max] / (1 - gamma)`.
    pub fn for_mdp(mdp: &TabularMdp) -> Self {
        Self { merge_tol: ATOM_MERGE_TOL, cap: DEFAULT_ATOM_CAP, support: mdp.return_support() }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap.max(2);
        self
    }
}

/// Probability distribution on finitely many real support points, atoms
/// strictly increasing, probabilities summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomDistribution {
    atoms: Vec<f64>,
    probs: Vec<f64>,
}

impl AtomDistribution {
    pub fn new(atoms: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != probs.len() {
            return Err(Error::config("atoms/probs must be non-empty and equal length"));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("non-finite atom"));
        }
        if atoms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("atoms must be strictly increasing"));
        }
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::config("probabilities must be non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::config(format!("probabilities sum to {total}, expected 1")));
        }
        let mut d = Self { atoms, probs };
        d.renormalize(total);
        Ok(d)
    }

    /// Build from unsorted weighted atoms: sorts, drops zero-mass atoms,
    /// merges atoms with adjacent gaps below `merge_tol` at their
    /// mass-weighted mean.
    pub fn from_weighted(mut pairs: Vec<(f64, f64)>, merge_tol: f64) -> Result<Self> {
        pairs.retain(|(_, p)| *p > 0.0);
        if pairs.is_empty() {
            return Err(Error::config("no positive-mass atoms"));
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        let mut atoms = Vec::with_capacity(pairs.len());
        let mut probs = Vec::with_capacity(pairs.len());
        let mut group_mass = pairs[0].1;
        let mut group_moment = pairs[0].0 * pairs[0].1;
        let mut group_last = pairs[0].0;
        for &(a, p) in &pairs[1..] {
            if a - group_last < merge_tol {
                group_mass += p;
                group_moment += a * p;
            } else {
                atoms.push(group_moment / group_mass);
                probs.push(group_mass);
                group_mass = p;
                group_moment = a * p;
            }
            group_last = a;
        }
        atoms.push(group_moment / group_mass);
        probs.push(group_mass);

        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::config(format!("weighted atoms sum to {total}, expected 1")));
        }
        let mut d = Self { atoms, probs };
        d.renormalize(total);
        Ok(d)
    }

    fn renormalize(&mut self, total: f64) {
        if total != 1.0 {
            for p in &mut self.probs {
                *p /= total;
            }
        }
    }

    /// Point mass.
    pub fn dirac(x: f64) -> Self {
        Self { atoms: vec![x], probs: vec![1.0] }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(a, p)| a * p).sum()
    }

    /// Distribution of `shift + scale * Z` for `scale > 0`.
    pub fn shift_scale(&self, shift: f64, scale: f64) -> Self {
        debug_assert!(scale > 0.0);
        Self {
            atoms: self.atoms.iter().map(|a| shift + scale * a).collect(),
            probs: self.probs.clone(),
        }
    }

    /// Distribution of `a * Z` for any scalar `a`.
    pub fn scaled(&self, a: f64) -> Self {
        if a == 0.0 {
            return Self::dirac(0.0);
        }
        let mut pairs: Vec<(f64, f64)> =
            self.atoms.iter().zip(&self.probs).map(|(x, p)| (a * x, *p)).collect();
        if a < 0.0 {
            pairs.reverse();
        }
        Self {
            atoms: pairs.iter().map(|(x, _)| *x).collect(),
            probs: pairs.iter().map(|(_, p)| *p).collect(),
        }
    }

    /// Distribution of `A + Z` for `A` independent of `Z`.
    pub fn convolve(&self, other: &Self) -> Self {
        let mut pairs = Vec::with_capacity(self.len() * other.len());
        for (a, pa) in self.atoms.iter().zip(&self.probs) {
            for (b, pb) in other.atoms.iter().zip(&other.probs) {
                pairs.push((a + b, pa * pb));
            }
        }
        Self::from_weighted(pairs, ATOM_MERGE_TOL).expect("convolution preserves mass")
    }

    /// Distribution of `B * Z` for an independent Bernoulli(q) mask `B`.
    pub fn bernoulli_mask(&self, q: f64) -> Self {
        let mut pairs: Vec<(f64, f64)> =
            self.atoms.iter().zip(&self.probs).map(|(a, p)| (*a, p * q)).collect();
        pairs.push((0.0, 1.0 - q));
        Self::from_weighted(pairs, ATOM_MERGE_TOL).expect("mask preserves mass")
    }

    /// Project onto `points` uniformly spaced atoms covering `support`,
    /// splitting each in-support atom linearly between its neighbors (mass
    /// and mean preserving); out-of-support mass is clamped to the edges.
    pub fn project_to_grid(&self, support: (f64, f64), points: usize) -> Self {
        let (lo, hi) = support;
        let m = points.max(2);
        if hi <= lo {
            return Self::dirac(lo);
        }
        let delta = (hi - lo) / (m - 1) as f64;
        let mut mass = vec![0.0; m];
        for (&a, &p) in self.atoms.iter().zip(&self.probs) {
            if a <= lo {
                mass[0] += p;
            } else if a >= hi {
                mass[m - 1] += p;
            } else {
                let pos = (a - lo) / delta;
                let j = (pos.floor() as usize).min(m - 2);
                let frac = pos - j as f64;
                mass[j] += p * (1.0 - frac);
                mass[j + 1] += p * frac;
            }
        }
        let pairs: Vec<(f64, f64)> = mass
            .into_iter()
            .enumerate()
            .filter(|(_, p)| *p > 0.0)
            .map(|(j, p)| (lo + j as f64 * delta, p))
            .collect();
        Self::from_weighted(pairs, 0.0).expect("grid projection preserves mass")
    }

    fn compressed(self, cfg: &Compression) -> Self {
        if self.len() > cfg.cap {
            self.project_to_grid(cfg.support, cfg.cap)
        } else {
            self
        }
    }
}

/// Per-(state, action) table of return distributions.
#[derive(Debug, Clone)]
pub struct ValueDistributionTable {
    n_states: usize,
    n_actions: usize,
    entries: Vec<AtomDistribution>,
}

impl ValueDistributionTable {
    pub fn constant(n_states: usize, n_actions: usize, dist: AtomDistribution) -> Self {
        Self { n_states, n_actions, entries: vec![dist; n_states * n_actions] }
    }

    pub fn from_entries(
        n_states: usize,
        n_actions: usize,
        entries: Vec<AtomDistribution>,
    ) -> Result<Self> {
        if entries.len() != n_states * n_actions {
            return Err(Error::config("entry count differs from n_states * n_actions"));
        }
        Ok(Self { n_states, n_actions, entries })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> &AtomDistribution {
        &self.entries[s * self.n_actions + a]
    }

    /// Per-entry expectations.
    pub fn expectations(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_states, self.n_actions), |(s, a)| self.get(s, a).mean())
    }

    /// Largest per-entry Wasserstein distance to another table.
    pub fn max_wasserstein(&self, other: &Self, order: Order) -> Result<f64> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::config("table shapes differ"));
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            worst = worst.max(wasserstein_p(a, b, order)?);
        }
        Ok(worst)
    }

    /// Stopping metric for fixed-point sweeps: W-infinity with a sliver
    /// floor so last-ulp mass churn in deep tails does not read as change.
    fn sweep_change(&self, other: &Self) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            worst = worst.max(wasserstein_inf_floored(a, b, 1e-13));
        }
        worst
    }
}

fn backup_with_merged(
    mdp: &TabularMdp,
    merged: &Policy,
    zt: &ValueDistributionTable,
    cfg: &Compression,
) -> Result<ValueDistributionTable> {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.gamma();
    let mut entries = Vec::with_capacity(n * m);
    for s in 0..n {
        for a in 0..m {
            let mut pairs = Vec::new();
            for next in 0..n {
                let p_next = mdp.transition(s, a, next);
                if p_next == 0.0 {
                    continue;
                }
                let r = mdp.reward(s, a, next);
                for a_next in 0..m {
                    let w = p_next * merged.prob(next, a_next);
                    if w == 0.0 {
                        continue;
                    }
                    let z = zt.get(next, a_next);
                    for (atom, prob) in z.atoms().iter().zip(z.probs()) {
                        pairs.push((r + gamma * atom, w * prob));
                    }
                }
            }
            let dist = AtomDistribution::from_weighted(pairs, cfg.merge_tol)?;
            entries.push(dist.compressed(cfg));
        }
    }
    ValueDistributionTable::from_entries(n, m, entries)
}

/// One sweep of the distributional Bellman operator under a fixed noise
/// kernel: the mixture over next states and merged-policy actions of the
/// reward-shifted, gamma-scaled next distributions.
pub fn dist_bellman_backup(
    mdp: &TabularMdp,
    pi: &Policy,
    noise: &TabularNoise,
    zt: &ValueDistributionTable,
    cfg: &Compression,
) -> Result<ValueDistributionTable> {
    if zt.n_states() != mdp.n_states() || zt.n_actions() != mdp.n_actions() {
        return Err(Error::config("table dimensions differ from the MDP"));
    }
    let merged = merged_policy(mdp, pi, noise)?;
    backup_with_merged(mdp, &merged, zt, cfg)
}

/// Adversarial sweep: re-selects the greedy deterministic kernel from the
/// expectations of the current table, then backs up under it. Returns the
/// selected kernel alongside the new table.
pub fn dist_bellman_backup_adversarial(
    mdp: &TabularMdp,
    pi: &Policy,
    allowed: &AllowedSets,
    zt: &ValueDistributionTable,
    cfg: &Compression,
) -> Result<(ValueDistributionTable, TabularNoise)> {
    let values = zt.expectations();
    let noise = greedy_adversarial_noise(pi, &values, allowed)?;
    let table = dist_bellman_backup(mdp, pi, &noise, zt, cfg)?;
    Ok((table, noise))
}

/// Iterate the distributional backup to a fixed point, stopping when the
/// max W-infinity change across entries drops to `tol`.
pub fn dist_fixed_point(
    mdp: &TabularMdp,
    pi: &Policy,
    noise: &TabularNoise,
    tol: f64,
    cfg: &Compression,
) -> Result<ValueDistributionTable> {
    if tol <= 0.0 {
        return Err(Error::config("tolerance must be positive"));
    }
    let mut z = ValueDistributionTable::constant(
        mdp.n_states(),
        mdp.n_actions(),
        AtomDistribution::dirac(0.0),
    );
    let mut last_change = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        let next = dist_bellman_backup(mdp, pi, noise, &z, cfg)?;
        last_change = next.sweep_change(&z);
        z = next;
        if last_change <= tol {
            return Ok(z);
        }
    }
    Err(Error::NonConvergence { iterations: MAX_SWEEPS, last_change })
}
