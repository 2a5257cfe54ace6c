//! Estimation of optimal dynamic treatment regimes from longitudinal data.
//!
//! The crate provides Bayesian-bootstrap versions of three value estimators
//! (dynamic marginal structural models, inverse probability weighting and a
//! doubly robust estimator), a Gaussian-process emulator that searches the
//! value surface with expected improvement, and a plasmode simulator with a
//! known optimal regime.

pub mod causal;
pub mod dsl;
pub mod emucontrol;
pub mod error;
pub mod gp;
pub mod optim;
pub mod plasmode;
pub mod posterior;
pub mod regress;
pub mod rng;
pub mod tabular;

pub use error::{Error, Result};
