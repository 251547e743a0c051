//! Learning, evaluating and benchmarking *super-policies* — policies that
//! take the behavior agent's recommended action as an extra input — in
//! confounded contextual bandits and short-horizon confounded POMDPs.
//!
//! The estimation route is proximal: a bridge function `q` is fitted from
//! a conditional moment restriction (tabular linear solve on discrete
//! spaces, regularized kernel min-max estimation otherwise), projected on
//! the policy class's conditioning set, and the policy is the argmax of
//! the projection. Values of arbitrary policies are identified through
//! the same bridge.
//!
//! Module map:
//! - [`datamodel`] — datasets, validation, splits, configuration.
//! - [`kernels`] — Gaussian/indicator kernels, Gram matrices, bandwidths.
//! - [`moments`] — bridge-function and projection estimators.
//! - [`bandit`] — single-stage super-policy learning and value estimation.
//! - [`sequential`] — backward fitted-Q learning for horizon T ≥ 1.
//! - [`envs`] — fully specified simulation environments and oracles.
//! - [`eval`] — regret, replication driver, split evaluation, reports.

pub mod bandit;
pub mod datamodel;
pub mod envs;
pub mod eval;
pub mod kernels;
pub(crate) mod linalg;
pub mod moments;
pub mod sequential;

pub use datamodel::{BanditDataset, EstimatorConfig, PolicyClassKind, SequentialDataset};
pub use moments::{BridgeFunction, MomentProblem, ProjectionModel};
