//! Posterior state-abstraction sampling (PS2) for low-rank contextual bandits.
//!
//! The agent keeps two Gaussian linear hypermodels: one over state
//! abstractions (which abstract state each ground state maps to) and a
//! conditional one over the values of abstract states. Posterior samples of
//! the composed `Q*` matrix drive a variance-based information-directed
//! sampling (IDS) policy, and the hypermodels are fit with a randomized
//! least-squares value iteration (RLSVI) loss under Adam.
//!
//! Module map:
//!
//! - [`envgen`]: low-rank bandit instances, multi-task suites, regret oracle.
//! - [`hypermodel`]: index sampling, forward maps, posterior `Q` samples.
//! - [`learner`]: replay buffer, RLSVI loss with analytic gradient, Adam.
//! - [`policy`]: variance-IDS estimators, information-ratio minimizer, TS.
//! - [`agents`]: the six evaluated algorithms and the multi-task round.
//! - [`harness`]: experiment runner, confidence intervals, CSV/JSON/SVG.

pub mod agents;
pub mod envgen;
pub mod error;
pub mod harness;
pub mod hypermodel;
pub mod learner;
pub mod matrix;
pub mod policy;
pub mod seeding;

pub use error::{Ps2Error, Result};
pub use matrix::Matrix;
