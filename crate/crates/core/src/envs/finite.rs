//! Exact enumeration machinery for finite bandit populations.
//!
//! A [`FiniteBanditPop`] lists the joint law of `(S, U)`, the proxy
//! conditionals `p(z | s, u)` and `p(w | s, u)`, the behavior policy
//! `π_b(a | s, u)` and the mean reward `r̄(s, u, a)`. Every oracle below is
//! an exact sum over atoms; reward noise enters only through its mean.

use nalgebra::DMatrix;

/// Finite population over scalar state/proxy levels.
#[derive(Debug, Clone)]
pub struct FiniteBanditPop {
    pub n_actions: usize,
    pub s_levels: Vec<f64>,
    pub u_levels: Vec<f64>,
    /// `su_probs[(si, ui)] = P(S = s_i, U = u_i)`.
    pub su_probs: DMatrix<f64>,
    pub z_levels: Vec<f64>,
    /// `z_given[si][ui][zi] = P(Z = z_i | s, u)`.
    pub z_given: Vec<Vec<Vec<f64>>>,
    pub w_levels: Vec<f64>,
    pub w_given: Vec<Vec<Vec<f64>>>,
    /// `behavior[si][ui][a] = π_b(a | s, u)`.
    pub behavior: Vec<Vec<Vec<f64>>>,
    /// `mean_reward[si][ui][a] = E[R(a) | s, u]`.
    pub mean_reward: Vec<Vec<Vec<f64>>>,
}

/// Which arguments an enumerated policy may depend on. The recommended
/// action `a′` is always present in the signature; `use_z` / `use_a` control
/// whether the optimum is allowed to vary with them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditioningSet {
    pub use_z: bool,
    pub use_a: bool,
}

impl ConditioningSet {
    pub const S_ONLY: Self = ConditioningSet { use_z: false, use_a: false };
    pub const SZ: Self = ConditioningSet { use_z: true, use_a: false };
    pub const SUPER: Self = ConditioningSet { use_z: true, use_a: true };
    /// The super class of the headline definition, without the action proxy.
    pub const SUPER_NO_Z: Self = ConditioningSet { use_z: false, use_a: true };
}

/// A deterministic policy tabulated over `(s, z, a′)` level indices.
#[derive(Debug, Clone)]
pub struct PolicyTable {
    /// `choice[si][zi][ap]` = chosen action index.
    pub choice: Vec<Vec<Vec<usize>>>,
}

impl PolicyTable {
    pub fn act(&self, si: usize, zi: usize, ap: usize) -> usize {
        self.choice[si][zi][ap]
    }
}

fn argmax_min_index(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl FiniteBanditPop {
    pub fn n_s(&self) -> usize {
        self.s_levels.len()
    }

    pub fn n_u(&self) -> usize {
        self.u_levels.len()
    }

    /// P(S = s_i).
    pub fn s_marginal(&self, si: usize) -> f64 {
        (0..self.n_u()).map(|ui| self.su_probs[(si, ui)]).sum()
    }

    /// Joint atom weight P(s, u, z, a′).
    fn atom(&self, si: usize, ui: usize, zi: usize, ap: usize) -> f64 {
        self.su_probs[(si, ui)] * self.z_given[si][ui][zi] * self.behavior[si][ui][ap]
    }

    /// Posterior-weighted mean counterfactual reward
    /// `E[R(a) | S, (Z), (A = a′)]` for every conditioning cell and action.
    /// Cells with zero probability get weight zero and a zero table entry.
    fn cell_mean_rewards(&self, cond: ConditioningSet) -> Vec<Vec<Vec<Vec<f64>>>> {
        let (ns, nu, nz, na) = (self.n_s(), self.n_u(), self.z_levels.len(), self.n_actions);
        let mut out = vec![vec![vec![vec![0.0; na]; na]; nz]; ns];
        for si in 0..ns {
            for zi in 0..nz {
                for ap in 0..na {
                    let mut weight = 0.0;
                    let mut sums = vec![0.0; na];
                    for ui in 0..nu {
                        // Marginalize out whichever arguments the class ignores.
                        let w_z = if cond.use_z { self.z_given[si][ui][zi] } else { 1.0 };
                        let w_a = if cond.use_a { self.behavior[si][ui][ap] } else { 1.0 };
                        let w = self.su_probs[(si, ui)] * w_z * w_a;
                        weight += w;
                        for a in 0..na {
                            sums[a] += w * self.mean_reward[si][ui][a];
                        }
                    }
                    if weight > 0.0 {
                        for a in 0..na {
                            out[si][zi][ap][a] = sums[a] / weight;
                        }
                    }
                }
            }
        }
        out
    }

    /// Behavior-policy value `E[R]` under the data-generating law.
    pub fn behavior_value(&self) -> f64 {
        let mut v = 0.0;
        for si in 0..self.n_s() {
            for ui in 0..self.n_u() {
                for a in 0..self.n_actions {
                    v += self.su_probs[(si, ui)] * self.behavior[si][ui][a] * self.mean_reward[si][ui][a];
                }
            }
        }
        v
    }
}

/// Exact value of a deterministic policy mapping level values `(s, z, a′)`
/// to an action: an expectation over all `(s, u, z, a′)` atoms; reward noise
/// contributes its mean.
pub fn oracle_value_exact<P>(pop: &FiniteBanditPop, policy: P) -> f64
where
    P: Fn(f64, f64, usize) -> usize,
{
    let mut v = 0.0;
    for si in 0..pop.n_s() {
        for ui in 0..pop.n_u() {
            for zi in 0..pop.z_levels.len() {
                for ap in 0..pop.n_actions {
                    let w = pop.atom(si, ui, zi, ap);
                    if w > 0.0 {
                        let a = policy(pop.s_levels[si], pop.z_levels[zi], ap);
                        v += w * pop.mean_reward[si][ui][a];
                    }
                }
            }
        }
    }
    v
}

/// The strongest oracle: the value of the policy that observes `U` itself.
pub fn u_aware_value_exact(pop: &FiniteBanditPop) -> f64 {
    let mut v = 0.0;
    for si in 0..pop.n_s() {
        for ui in 0..pop.n_u() {
            let best = pop.mean_reward[si][ui]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            v += pop.su_probs[(si, ui)] * best;
        }
    }
    v
}

/// Enumeration-argmax policy of a class together with its exact value.
/// Ties break toward the smallest action index.
pub fn class_optimal(pop: &FiniteBanditPop, cond: ConditioningSet) -> (PolicyTable, f64) {
    let cells = pop.cell_mean_rewards(cond);
    let (ns, nz, na) = (pop.n_s(), pop.z_levels.len(), pop.n_actions);
    let mut choice = vec![vec![vec![0usize; na]; nz]; ns];
    for si in 0..ns {
        for zi in 0..nz {
            for ap in 0..na {
                choice[si][zi][ap] = argmax_min_index(&cells[si][zi][ap]);
            }
        }
    }
    let table = PolicyTable { choice };
    let value = {
        let t = &table;
        let s_index: std::collections::BTreeMap<u64, usize> =
            pop.s_levels.iter().enumerate().map(|(i, v)| (v.to_bits(), i)).collect();
        let z_index: std::collections::BTreeMap<u64, usize> =
            pop.z_levels.iter().enumerate().map(|(i, v)| (v.to_bits(), i)).collect();
        oracle_value_exact(pop, |s, z, ap| {
            t.act(s_index[&s.to_bits()], z_index[&z.to_bits()], ap)
        })
    };
    (table, value)
}

/// Conditional average treatment effects on the treated/control for one
/// state level, and whether each is defined (positive conditioning mass).
#[derive(Debug, Clone, Copy)]
pub struct CattRow {
    pub s: f64,
    pub catt: f64,
    pub catt_defined: bool,
    pub catc: f64,
    pub catc_defined: bool,
    /// π_b(1 | s).
    pub propensity: f64,
}

/// Strict-improvement conditions for binary actions.
///
/// `over_standard` / `over_behavior` are exact characterizations (a state
/// with positive mass, interior propensity where needed, and the right
/// effect signs). `over_both` — strict gain over the better of the two —
/// is their conjunction, which follows from the two value-difference
/// identities. `single_state_witness` is the stronger one-state condition
/// (CATT < 0 and CATC > 0 at a common state with interior propensity): it
/// is sufficient for `over_both` but not necessary, since the gain over the
/// standard optimum and the gain over the behavior policy may come from
/// different states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lemma2Conditions {
    pub over_standard: bool,
    pub over_behavior: bool,
    pub over_both: bool,
    pub single_state_witness: bool,
}

/// Exact CATT/CATC table by enumeration (binary actions), plus the three
/// strict-improvement conditions. States with a deterministic behavior arm
/// have the corresponding effect flagged undefined and are excluded from the
/// conditions exactly where the conditioning event has probability zero.
pub fn catt_catc(pop: &FiniteBanditPop) -> (Vec<CattRow>, Lemma2Conditions) {
    assert_eq!(pop.n_actions, 2, "CATT/CATC require binary actions");
    let mut rows = Vec::with_capacity(pop.n_s());
    let mut over_standard = false;
    let mut over_behavior = false;
    let mut single_state_witness = false;
    for si in 0..pop.n_s() {
        let p_s = pop.s_marginal(si);
        let mut weight_a = [0.0f64; 2]; // P(S = s, A = a)
        let mut effect_a = [0.0f64; 2]; // Σ_u P(s, u, a)·(r̄(1) − r̄(0))
        let mut propensity = 0.0;
        for ui in 0..pop.n_u() {
            let p_su = pop.su_probs[(si, ui)];
            let diff = pop.mean_reward[si][ui][1] - pop.mean_reward[si][ui][0];
            for a in 0..2 {
                let w = p_su * pop.behavior[si][ui][a];
                weight_a[a] += w;
                effect_a[a] += w * diff;
            }
            propensity += p_su * pop.behavior[si][ui][1];
        }
        propensity = if p_s > 0.0 { propensity / p_s } else { 0.0 };
        let catt_defined = weight_a[1] > 0.0;
        let catc_defined = weight_a[0] > 0.0;
        let catt = if catt_defined { effect_a[1] / weight_a[1] } else { 0.0 };
        let catc = if catc_defined { effect_a[0] / weight_a[0] } else { 0.0 };
        rows.push(CattRow {
            s: pop.s_levels[si],
            catt,
            catt_defined,
            catc,
            catc_defined,
            propensity,
        });
        if p_s > 0.0 {
            let interior = propensity > 0.0 && propensity < 1.0;
            if interior && catt_defined && catc_defined && catt * catc < 0.0 {
                over_standard = true;
            }
            if (catt_defined && catt < 0.0) || (catc_defined && catc > 0.0) {
                over_behavior = true;
            }
            if interior && catt_defined && catc_defined && catt < 0.0 && catc > 0.0 {
                single_state_witness = true;
            }
        }
    }
    (
        rows,
        Lemma2Conditions {
            over_standard,
            over_behavior,
            over_both: over_standard && over_behavior,
            single_state_witness,
        },
    )
}
