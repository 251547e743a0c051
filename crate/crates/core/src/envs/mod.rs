//! Fully specified data-generating processes for every experiment, exact
//! enumeration and Monte-Carlo oracles, and the strict-improvement
//! diagnostics for finite environments.
//!
//! Everything here is pure given `(spec, n, seed)`: samplers draw from a
//! counter-seeded ChaCha stream, and enumeration oracles never touch an RNG.

mod finite;
mod mc;
mod specs;

pub use finite::{
    catt_catc, class_optimal, oracle_value_exact, u_aware_value_exact, CattRow, ConditioningSet,
    FiniteBanditPop, Lemma2Conditions, PolicyTable,
};
pub use mc::{oracle_value_mc_bandit, oracle_value_mc_seq, SeqRolloutPolicy};
pub use specs::{
    random_finite_pop, toy_values, ContinuousBanditSpec, DiscreteBanditSpec, SequentialSpec,
    ToySpec,
};

use serde::{Deserialize, Serialize};

/// A fully specified environment, usable for sampling and (where finite)
/// exact oracle computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    Toy(ToySpec),
    Discrete(DiscreteBanditSpec),
    Continuous(ContinuousBanditSpec),
    Sequential(SequentialSpec),
}

impl EnvSpec {
    pub fn is_sequential(&self) -> bool {
        matches!(self, EnvSpec::Sequential(_))
    }

    /// Exact finite population, when the spec has one.
    pub fn population(&self) -> Option<FiniteBanditPop> {
        match self {
            EnvSpec::Toy(t) => Some(t.population()),
            EnvSpec::Discrete(d) => Some(d.population()),
            _ => None,
        }
    }
}
