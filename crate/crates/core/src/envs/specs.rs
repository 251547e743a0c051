//! Concrete environment specifications and their samplers.

use super::finite::{class_optimal, ConditioningSet, FiniteBanditPop};
use crate::datamodel::{BanditDataset, SequentialDataset, Step};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

fn check_unit_interval(name: &str, v: f64) {
    assert!((0.0..=1.0).contains(&v), "{name} must lie in [0, 1], got {v}");
}

/// Two-point toy environment: `S, U ~ Bernoulli(1/2)` independent, binary
/// behavior action revealing `U` with strength `ε`, reward
/// `R = 8(A−0.5)(S−0.2)(U−0.3)`. The proxies carry no signal here; sampling
/// fills them with independent fair coins so the bandit pipeline runs
/// unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub epsilon: f64,
}

impl ToySpec {
    pub fn new(epsilon: f64) -> Self {
        check_unit_interval("epsilon", epsilon);
        ToySpec { epsilon }
    }

    fn reward(s: f64, u: f64, a: usize) -> f64 {
        8.0 * (a as f64 - 0.5) * (s - 0.2) * (u - 0.3)
    }

    pub fn population(&self) -> FiniteBanditPop {
        let eps = self.epsilon;
        let levels = vec![0.0, 1.0];
        let mut reward = vec![vec![vec![0.0; 2]; 2]; 2];
        let mut behavior = vec![vec![vec![0.0; 2]; 2]; 2];
        for (si, &s) in levels.iter().enumerate() {
            for (ui, &u) in levels.iter().enumerate() {
                for a in 0..2 {
                    reward[si][ui][a] = Self::reward(s, u, a);
                }
                // P(A = 1 | U = 1) = 1 − ε, P(A = 1 | U = 0) = ε.
                let p1 = if u > 0.5 { 1.0 - eps } else { eps };
                behavior[si][ui] = vec![1.0 - p1, p1];
            }
        }
        FiniteBanditPop {
            n_actions: 2,
            s_levels: levels.clone(),
            u_levels: levels.clone(),
            su_probs: DMatrix::from_element(2, 2, 0.25),
            z_levels: levels.clone(),
            z_given: vec![vec![vec![0.5, 0.5]; 2]; 2],
            w_levels: levels,
            w_given: vec![vec![vec![0.5, 0.5]; 2]; 2],
            behavior,
            mean_reward: reward,
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> BanditDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut s = DMatrix::zeros(n, 1);
        let mut z = DMatrix::zeros(n, 1);
        let mut w = DMatrix::zeros(n, 1);
        let mut a = Vec::with_capacity(n);
        let mut r = DVector::zeros(n);
        for i in 0..n {
            let si = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let ui = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let p1 = if ui > 0.5 { 1.0 - self.epsilon } else { self.epsilon };
            let ai = usize::from(rng.random::<f64>() < p1);
            s[(i, 0)] = si;
            z[(i, 0)] = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            w[(i, 0)] = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            a.push(ai);
            r[i] = Self::reward(si, ui, ai);
        }
        BanditDataset { s, z, w, a, r, n_actions: 2 }
    }
}

/// Exact `(V(π_b), V(π∗), V(ν∗))` for the toy environment, by enumeration
/// over the joint atoms. The results are asserted against the closed forms
/// `(0.6 − 1.2ε, 0.4, |0.7 − ε| + |ε − 0.3|)` before being returned.
pub fn toy_values(epsilon: f64) -> (f64, f64, f64) {
    let pop = ToySpec::new(epsilon).population();
    let v_behavior = pop.behavior_value();
    let (_, v_standard) = class_optimal(&pop, ConditioningSet::S_ONLY);
    let (_, v_super) = class_optimal(&pop, ConditioningSet::SUPER_NO_Z);
    let closed_b = 0.6 - 1.2 * epsilon;
    let closed_std = 0.4;
    let closed_super = (0.7 - epsilon).abs() + (epsilon - 0.3).abs();
    assert!(
        (v_behavior - closed_b).abs() <= 1e-12
            && (v_standard - closed_std).abs() <= 1e-12
            && (v_super - closed_super).abs() <= 1e-12,
        "enumeration ({v_behavior}, {v_standard}, {v_super}) disagrees with closed forms \
         ({closed_b}, {closed_std}, {closed_super})"
    );
    (v_behavior, v_standard, v_super)
}

/// Discrete simulation design: independent fair `S, U`; binary proxies with
/// `P(W=1|U=0) = P(Z=1|U=0) = 0.4` and `0.6` under `U = 1`; behavior
/// `P(A=1|U=0) = ε`, `P(A=1|U=1) = 1−ε`; reward
/// `R = (U−0.5)(A−0.5) + Normal(0, σ)` with σ = 0.5 read as a standard
/// deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteBanditSpec {
    pub epsilon: f64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
}

fn default_noise_sd() -> f64 {
    0.5
}

impl DiscreteBanditSpec {
    pub fn new(epsilon: f64) -> Self {
        check_unit_interval("epsilon", epsilon);
        DiscreteBanditSpec { epsilon, noise_sd: default_noise_sd() }
    }

    pub fn population(&self) -> FiniteBanditPop {
        let eps = self.epsilon;
        let levels = vec![0.0, 1.0];
        let mut reward = vec![vec![vec![0.0; 2]; 2]; 2];
        let mut behavior = vec![vec![vec![0.0; 2]; 2]; 2];
        let mut z_given = vec![vec![vec![0.0; 2]; 2]; 2];
        let mut w_given = vec![vec![vec![0.0; 2]; 2]; 2];
        for si in 0..2 {
            for (ui, &u) in levels.iter().enumerate() {
                for a in 0..2 {
                    reward[si][ui][a] = (u - 0.5) * (a as f64 - 0.5);
                }
                let p_a1 = if u > 0.5 { 1.0 - eps } else { eps };
                behavior[si][ui] = vec![1.0 - p_a1, p_a1];
                let p_proxy1 = if u > 0.5 { 0.6 } else { 0.4 };
                z_given[si][ui] = vec![1.0 - p_proxy1, p_proxy1];
                w_given[si][ui] = vec![1.0 - p_proxy1, p_proxy1];
            }
        }
        FiniteBanditPop {
            n_actions: 2,
            s_levels: levels.clone(),
            u_levels: levels.clone(),
            su_probs: DMatrix::from_element(2, 2, 0.25),
            z_levels: levels.clone(),
            z_given,
            w_levels: levels,
            w_given,
            behavior,
            mean_reward: reward,
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> BanditDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut s = DMatrix::zeros(n, 1);
        let mut z = DMatrix::zeros(n, 1);
        let mut w = DMatrix::zeros(n, 1);
        let mut a = Vec::with_capacity(n);
        let mut r = DVector::zeros(n);
        for i in 0..n {
            let si = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let ui = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let p_a1 = if ui > 0.5 { 1.0 - self.epsilon } else { self.epsilon };
            let ai = usize::from(rng.random::<f64>() < p_a1);
            let p_proxy1 = if ui > 0.5 { 0.6 } else { 0.4 };
            // Independent noise streams for W and Z given U.
            w[(i, 0)] = if rng.random::<f64>() < p_proxy1 { 1.0 } else { 0.0 };
            z[(i, 0)] = if rng.random::<f64>() < p_proxy1 { 1.0 } else { 0.0 };
            let noise: f64 = StandardNormal.sample(&mut rng);
            s[(i, 0)] = si;
            a.push(ai);
            r[i] = (ui - 0.5) * (ai as f64 - 0.5) + self.noise_sd * noise;
        }
        BanditDataset { s, z, w, a, r, n_actions: 2 }
    }
}

/// Continuous simulation design: `S, U ~ N(0,1)` independent;
/// `W | S,U ~ N(S + 3U, 1)`, `Z | S,U ~ N(3S + U, 1)`;
/// behavior `P(A=1 | U>0) = ε`, `P(A=1 | U≤0) = 1−ε`;
/// reward `R = U(A−0.5) + N(0, 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousBanditSpec {
    pub epsilon: f64,
}

impl ContinuousBanditSpec {
    pub fn new(epsilon: f64) -> Self {
        check_unit_interval("epsilon", epsilon);
        ContinuousBanditSpec { epsilon }
    }

    pub fn mean_reward(u: f64, a: usize) -> f64 {
        u * (a as f64 - 0.5)
    }

    /// Draw `(s, u, z, w, a)` for one unit.
    pub fn draw_unit(&self, rng: &mut ChaCha20Rng) -> (f64, f64, f64, f64, usize) {
        let s: f64 = StandardNormal.sample(rng);
        let u: f64 = StandardNormal.sample(rng);
        let p_a1 = if u > 0.0 { self.epsilon } else { 1.0 - self.epsilon };
        let a = usize::from(rng.random::<f64>() < p_a1);
        let w_noise: f64 = StandardNormal.sample(rng);
        let z_noise: f64 = StandardNormal.sample(rng);
        let w = s + 3.0 * u + w_noise;
        let z = 3.0 * s + u + z_noise;
        (s, u, z, w, a)
    }

    pub fn sample(&self, n: usize, seed: u64) -> BanditDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut s = DMatrix::zeros(n, 1);
        let mut z = DMatrix::zeros(n, 1);
        let mut w = DMatrix::zeros(n, 1);
        let mut a = Vec::with_capacity(n);
        let mut r = DVector::zeros(n);
        for i in 0..n {
            let (si, ui, zi, wi, ai) = self.draw_unit(&mut rng);
            let noise: f64 = StandardNormal.sample(&mut rng);
            s[(i, 0)] = si;
            z[(i, 0)] = zi;
            w[(i, 0)] = wi;
            a.push(ai);
            r[i] = Self::mean_reward(ui, ai) + 0.5 * noise;
        }
        BanditDataset { s, z, w, a, r, n_actions: 2 }
    }
}

/// Two-step memoryless-confounding design. Per episode:
/// `U₁ ~ Uniform{−1, 1}`; `O₀ = U₁ + N(0, 0.3)`; `O₁ = 0.5U₁ + N(0, 0.3)`;
/// `W₁ = U₁ + N(0, 0.3)`; behavior `A₁ = 1{U₁ > 0}` flipped with
/// probability δ; `R₁ = expit(U₁(A₁−0.5)) + Uniform(−0.1, 0.1)`;
/// `U₂ = clip(0.5U₁ + (A₁−0.5), −1, 1) + N(0, 0.2)`; step 2 mirrors step 1
/// from `U₂`. The proxies' noise streams are independent of the actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequentialSpec {
    /// Flip probability of the behavior recommendation; small δ means the
    /// recommendation reveals the sign of the confounder.
    pub delta: f64,
}

pub(crate) fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SequentialSpec {
    pub const HORIZON: usize = 2;
    pub const R_MAX: f64 = 1.1;

    pub fn new(delta: f64) -> Self {
        check_unit_interval("delta", delta);
        SequentialSpec { delta }
    }

    pub fn mean_reward(u: f64, a: usize) -> f64 {
        expit(u * (a as f64 - 0.5))
    }

    fn recommend(&self, u: f64, rng: &mut ChaCha20Rng) -> usize {
        let honest = usize::from(u > 0.0);
        if rng.random::<f64>() < self.delta {
            1 - honest
        } else {
            honest
        }
    }

    fn next_confounder(u1: f64, a1: usize, rng: &mut ChaCha20Rng) -> f64 {
        let drift = (0.5 * u1 + (a1 as f64 - 0.5)).clamp(-1.0, 1.0);
        let noise: f64 = StandardNormal.sample(rng);
        drift + 0.2 * noise
    }

    fn observe(u: f64, rng: &mut ChaCha20Rng) -> (f64, f64) {
        let o_noise: f64 = StandardNormal.sample(rng);
        let w_noise: f64 = StandardNormal.sample(rng);
        (0.5 * u + 0.3 * o_noise, u + 0.3 * w_noise)
    }

    fn reward_draw(u: f64, a: usize, rng: &mut ChaCha20Rng) -> f64 {
        Self::mean_reward(u, a) + rng.random_range(-0.1..0.1)
    }

    pub fn sample(&self, n: usize, seed: u64) -> SequentialDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut o0 = DMatrix::zeros(n, 1);
        let mut o1 = DMatrix::zeros(n, 1);
        let mut w1 = DMatrix::zeros(n, 1);
        let mut a1 = Vec::with_capacity(n);
        let mut r1 = DVector::zeros(n);
        let mut o2 = DMatrix::zeros(n, 1);
        let mut w2 = DMatrix::zeros(n, 1);
        let mut a2 = Vec::with_capacity(n);
        let mut r2 = DVector::zeros(n);
        for i in 0..n {
            let u1 = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
            let o0_noise: f64 = StandardNormal.sample(&mut rng);
            o0[(i, 0)] = u1 + 0.3 * o0_noise;
            let (o, w) = Self::observe(u1, &mut rng);
            o1[(i, 0)] = o;
            w1[(i, 0)] = w;
            let act1 = self.recommend(u1, &mut rng);
            a1.push(act1);
            r1[i] = Self::reward_draw(u1, act1, &mut rng);
            let u2 = Self::next_confounder(u1, act1, &mut rng);
            let (o, w) = Self::observe(u2, &mut rng);
            o2[(i, 0)] = o;
            w2[(i, 0)] = w;
            let act2 = self.recommend(u2, &mut rng);
            a2.push(act2);
            r2[i] = Self::reward_draw(u2, act2, &mut rng);
        }
        SequentialDataset {
            o0,
            steps: vec![
                Step { o: o1, a: a1, r: r1, w: w1 },
                Step { o: o2, a: a2, r: r2, w: w2 },
            ],
            n_actions: 2,
            r_max: Self::R_MAX,
        }
    }

    /// Roll one episode under an external decision rule. The behavior agent
    /// recommends from the true confounder, the decider picks the executed
    /// action, and the environment transitions on the executed action.
    /// Returns the total (noiseless-mean) reward.
    pub fn rollout<D>(&self, rng: &mut ChaCha20Rng, mut decide: D) -> f64
    where
        D: FnMut(usize, &[Vec<f64>], &[usize], &[usize]) -> usize,
    {
        let u1 = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
        let o0_noise: f64 = StandardNormal.sample(rng);
        let _o0 = u1 + 0.3 * o0_noise;
        let (o1, _w1) = Self::observe(u1, rng);
        let rec1 = self.recommend(u1, rng);
        let act1 = decide(1, &[vec![o1]], &[], &[rec1]);
        let mut total = Self::mean_reward(u1, act1);
        let u2 = Self::next_confounder(u1, act1, rng);
        let (o2, _w2) = Self::observe(u2, rng);
        let rec2 = self.recommend(u2, rng);
        let act2 = decide(2, &[vec![o1], vec![o2]], &[act1], &[rec1, rec2]);
        total += Self::mean_reward(u2, act2);
        total
    }

    /// Roll one episode under a confounder-aware decision rule (used by
    /// reference policies); transitions use the decided action. Returns the
    /// total mean reward.
    pub fn rollout_reference<D>(&self, rng: &mut ChaCha20Rng, mut decide: D) -> f64
    where
        D: FnMut(usize, f64) -> usize,
    {
        let u1 = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
        let a1 = decide(1, u1);
        let mut total = Self::mean_reward(u1, a1);
        let u2 = Self::next_confounder(u1, a1, rng);
        let a2 = decide(2, u2);
        total += Self::mean_reward(u2, a2);
        total
    }

    /// Roll one episode while exposing the confounders, for fitting U-aware
    /// reference policies: returns `(u1, a1, r1, u2, a2, r2)` under the
    /// behavior policy.
    pub fn rollout_behavior_with_confounders(
        &self,
        rng: &mut ChaCha20Rng,
    ) -> (f64, usize, f64, f64, usize, f64) {
        let u1 = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
        let a1 = self.recommend(u1, rng);
        let r1 = Self::reward_draw(u1, a1, rng);
        let u2 = Self::next_confounder(u1, a1, rng);
        let a2 = self.recommend(u2, rng);
        let r2 = Self::reward_draw(u2, a2, rng);
        (u1, a1, r1, u2, a2, r2)
    }
}

/// Random small finite population for the property suites: 1–3 state and
/// confounder levels, binary or ternary actions, continuous random rewards
/// (so ties have measure zero), and behavior probabilities that are
/// occasionally degenerate to exercise the zero-mass corner cases.
pub fn random_finite_pop(rng: &mut ChaCha20Rng, n_actions: usize) -> FiniteBanditPop {
    let ns = rng.random_range(1..=3usize);
    let nu = rng.random_range(1..=3usize);
    let s_levels: Vec<f64> = (0..ns).map(|i| i as f64).collect();
    let u_levels: Vec<f64> = (0..nu).map(|i| i as f64).collect();
    let mut su = DMatrix::zeros(ns, nu);
    let mut total = 0.0;
    for si in 0..ns {
        for ui in 0..nu {
            let v = rng.random::<f64>() + 0.05;
            su[(si, ui)] = v;
            total += v;
        }
    }
    su /= total;
    let mut behavior = vec![vec![vec![0.0; n_actions]; nu]; ns];
    let mut reward = vec![vec![vec![0.0; n_actions]; nu]; ns];
    for si in 0..ns {
        for ui in 0..nu {
            // With some probability make the behavior arm deterministic.
            if n_actions == 2 && rng.random::<f64>() < 0.25 {
                let fixed = rng.random_range(0..2usize);
                behavior[si][ui][fixed] = 1.0;
            } else {
                let mut probs: Vec<f64> = (0..n_actions).map(|_| rng.random::<f64>() + 0.02).collect();
                let z: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= z);
                behavior[si][ui] = probs;
            }
            for a in 0..n_actions {
                reward[si][ui][a] = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
    }
    FiniteBanditPop {
        n_actions,
        s_levels,
        u_levels,
        su_probs: su,
        z_levels: vec![0.0],
        z_given: vec![vec![vec![1.0]; nu]; ns],
        w_levels: vec![0.0],
        w_given: vec![vec![vec![1.0]; nu]; ns],
        behavior,
        mean_reward: reward,
    }
}
