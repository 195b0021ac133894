#![no_std]
#![warn(missing_debug_implementations)]

//! Bellman-complete representation learning (BCRL) for offline policy
//! evaluation on finite, enumerable MDPs.
//!
//! The crate is `no_std` and only needs `alloc`. It contains:
//!
//! - [`mdp`]: finite MDPs, policies, state-action distributions, synthetic
//!   instance generators and offline dataset sampling.
//! - [`oracles`]: exact dynamic-programming ground truth (values, Bellman
//!   operator, occupancy measures, linear Bellman completeness error,
//!   relative condition numbers, performance-difference residuals).
//! - [`features`] and [`net`]: feature maps, covariance spectra and a small
//!   differentiable MLP with hand-written reverse-mode gradients.
//! - [`lspe`]: least-squares policy evaluation with ball-constrained
//!   regression.
//! - [`bcrl`]: the bilevel representation objective, the double-sampling
//!   correction, optimal-design penalties and the practical training loop.
//! - [`baselines`]: fitted Q-evaluation and ablation configurations.
//! - [`metrics`]: OPE error aggregation, Spearman ranking correlation and
//!   beyond-initial-state error profiles.
//!
//! File formats, configuration and the command line live in the companion
//! `bcrl` crate.

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod bcrl;
mod error;
pub mod features;
pub mod linalg;
pub mod lspe;
pub mod mdp;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod oracles;
pub mod rng;

pub use crate::error::{Error, Result};
pub use crate::features::{CovarianceReport, FeatureKind, FeatureMap, FeatureTable};
pub use crate::mdp::{FiniteMdp, OfflineDataset, Policy, StateActionDist, Transition};
pub use crate::net::TrainableNet;
