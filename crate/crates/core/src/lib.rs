//! Numerical laboratory for reinforcement-learning training robustness under
//! noisy state observations.
//!
//! The crate is organized around three layers:
//!
//! * tabular theory — finite MDPs with observation-noise kernels ([`mdp`]),
//!   expectation-based and distributional policy evaluation with contraction
//!   checks ([`eval`], [`dist`], [`wasserstein`]), and linear TD convergence
//!   / influence-function analysis ([`td`]);
//! * function approximation — value heads, the squared and histogram losses
//!   with analytic state gradients and norm bounds ([`heads`], [`mlp`]);
//! * desk-scale experiments — classic-control environments ([`envs`]) and
//!   replay-based value agents with configurable noise injection
//!   ([`agents`], [`perturb`]).

pub mod agents;
pub mod dist;
pub mod envs;
pub mod error;
pub mod eval;
pub mod heads;
pub mod linalg;
pub mod mdp;
pub mod mlp;
pub mod perturb;
pub mod replay;
pub mod seed;
pub mod td;
pub mod wasserstein;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use mdp::{AllowedSets, Policy, TabularMdp, TabularNoise};
