//! Risk-averse, epistemic-uncertainty-aware distributional actor-critic.
//!
//! The crate is organised bottom-up:
//!
//! * [`riskmeasures`]: CVaR, VaR, tails, earth mover's distance and ensemble
//!   mixtures over categorical distributions.
//! * [`gradnet`]: reverse-mode differentiation for small dense networks.
//! * [`critic`]: ensembles of categorical distributional critics.
//! * [`actor_limits`]: the CVaR actor objective and soft-clipped adaptive action limits.
//! * [`envs`]: the `cliffcar` driving task and exact tabular return oracles.
//! * [`trainer`]: replay, the off-policy update loop, metrics and evaluation.

pub mod actor_limits;
pub mod critic;
pub mod envs;
pub mod error;
pub mod gradnet;
pub mod riskmeasures;
pub mod trainer;



pub use actor_limits::{apply_limits, softclip, ActionLimits, ActionSpace, Actor};
pub use critic::{AtomGrid, CriticEnsemble};
pub use error::{Error, Result};
pub use riskmeasures::{cvar, cvar_gap, emd, mixture, tail, var, CategoricalDistribution, RiskLevel};
