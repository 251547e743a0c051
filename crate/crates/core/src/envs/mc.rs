//! Monte-Carlo value oracles.

use super::specs::{ContinuousBanditSpec, SequentialSpec, ToySpec};
use crate::envs::EnvSpec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// A deterministic sequential decision rule usable in rollouts. Arguments:
/// step index (1-based), observations `o_{1:t}` as rows, own past actions,
/// behavior actions `a_{1:t}`.
pub trait SeqRolloutPolicy {
    fn decide(&self, t: usize, obs: &[Vec<f64>], own: &[usize], behavior: &[usize]) -> usize;
}

impl<F> SeqRolloutPolicy for F
where
    F: Fn(usize, &[Vec<f64>], &[usize], &[usize]) -> usize,
{
    fn decide(&self, t: usize, obs: &[Vec<f64>], own: &[usize], behavior: &[usize]) -> usize {
        self(t, obs, own, behavior)
    }
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Monte-Carlo policy value for a single-stage spec: sample units, apply the
/// policy to `(s, z, a′)`, average the realized reward of the chosen action.
pub fn oracle_value_mc_bandit<P>(
    spec: &EnvSpec,
    policy: P,
    episodes: usize,
    seed: u64,
) -> (f64, f64)
where
    P: Fn(&[f64], &[f64], usize) -> usize,
{
    assert!(episodes >= 100, "need at least 100 episodes");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(episodes);
    match spec {
        EnvSpec::Toy(ToySpec { epsilon }) => {
            for _ in 0..episodes {
                let s = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                let u = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                let p1 = if u > 0.5 { 1.0 - epsilon } else { *epsilon };
                let rec = usize::from(rng.random::<f64>() < p1);
                let z = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                let a = policy(&[s], &[z], rec);
                vals.push(8.0 * (a as f64 - 0.5) * (s - 0.2) * (u - 0.3));
            }
        }
        EnvSpec::Discrete(d) => {
            for _ in 0..episodes {
                let s = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                let u = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                let p_a1 = if u > 0.5 { 1.0 - d.epsilon } else { d.epsilon };
                let rec = usize::from(rng.random::<f64>() < p_a1);
                let p_proxy1 = if u > 0.5 { 0.6 } else { 0.4 };
                let z = if rng.random::<f64>() < p_proxy1 { 1.0 } else { 0.0 };
                let a = policy(&[s], &[z], rec);
                vals.push((u - 0.5) * (a as f64 - 0.5));
            }
        }
        EnvSpec::Continuous(c) => {
            for _ in 0..episodes {
                let (s, u, z, _w, rec) = c.draw_unit(&mut rng);
                let a = policy(&[s], &[z], rec);
                vals.push(ContinuousBanditSpec::mean_reward(u, a));
            }
        }
        EnvSpec::Sequential(_) => panic!("sequential spec needs oracle_value_mc_seq"),
    }
    mean_and_se(&vals)
}

/// Monte-Carlo policy value for the two-step spec: the behavior agent
/// recommends from the true state, the policy decides, the environment
/// transitions on the decided action.
pub fn oracle_value_mc_seq<P>(
    spec: &SequentialSpec,
    policy: &P,
    episodes: usize,
    seed: u64,
) -> (f64, f64)
where
    P: SeqRolloutPolicy + ?Sized,
{
    assert!(episodes >= 100, "need at least 100 episodes");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let total =
            spec.rollout(&mut rng, |t, obs, own, behavior| policy.decide(t, obs, own, behavior));
        vals.push(total);
    }
    mean_and_se(&vals)
}
