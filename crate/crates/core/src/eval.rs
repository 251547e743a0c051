//! Regret computation, the replication driver, the random-split evaluation
//! protocol, and table rendering.
//!
//! The regret reference is the confounder-aware optimum: exact enumeration
//! on finite specs, otherwise a reference policy fitted on fresh samples
//! with the confounder observed (per-action least squares on `(U, S)` and
//! argmax) whose value is approximated by Monte Carlo. Replications are
//! seeded `base + index` and may run in parallel; aggregation is a
//! deterministic reduction independent of completion order.

use crate::bandit::{
    estimate_value, estimate_value_behavior_clone, fit_bridge_stage, learn_from_bridge, Backends,
    BanditError, Conditioning, FittedBridge,
};
use crate::datamodel::{
    random_split_indices, BanditDataset, EstimatorConfig, PolicyClassKind,
};
use crate::envs::{
    oracle_value_exact, oracle_value_mc_bandit, oracle_value_mc_seq, u_aware_value_exact,
    ContinuousBanditSpec, EnvSpec, SequentialSpec,
};
use crate::moments::{fit_projection, ProjectionBackend, ProjectionModel};
use crate::sequential::{learn_seq, SequentialError};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("replication with seed {seed} failed: {message}")]
    Replication { seed: u64, message: String },
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("bandit pipeline: {0}")]
    Bandit(#[from] BanditError),
    #[error("sequential pipeline: {0}")]
    Sequential(#[from] SequentialError),
    #[error("kind {0:?} does not fit the spec's horizon")]
    KindMismatch(PolicyClassKind),
    #[error("split evaluation: {0}")]
    Split(String),
}

/// Estimation backend selector, serializable for config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    /// Empirical conditional averages everywhere (discrete designs).
    Tabular,
    /// Gaussian-RKHS min-max bridge + linear projections.
    RkhsLinear,
}

impl BackendChoice {
    pub fn backends(&self) -> Backends {
        match self {
            BackendChoice::Tabular => Backends::tabular(),
            BackendChoice::RkhsLinear => Backends::rkhs_linear(),
        }
    }
}

/// How oracle values are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum OracleMode {
    Exact,
    Mc { episodes: usize },
}

/// One experiment: a spec setting, a sample size, replications, and the
/// policy classes to compare.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub spec: EnvSpec,
    /// Row label in reports, e.g. `eps=0.9`.
    pub setting: String,
    pub n: usize,
    pub replications: usize,
    pub seed_base: u64,
    pub kinds: Vec<PolicyClassKind>,
    pub estimator: EstimatorConfig,
    pub backend: BackendChoice,
    pub oracle: OracleMode,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.replications < 1 {
            return Err(EvalError::InvalidConfig("replications must be ≥ 1".into()));
        }
        if self.n < 10 {
            return Err(EvalError::InvalidConfig(format!("n must be ≥ 10, got {}", self.n)));
        }
        if self.kinds.is_empty() {
            return Err(EvalError::InvalidConfig("no policy kinds requested".into()));
        }
        for k in &self.kinds {
            if k.is_sequential() != self.spec.is_sequential() {
                return Err(EvalError::KindMismatch(*k));
            }
        }
        Ok(())
    }
}

/// Which quantity a report's numbers measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Smaller is better.
    Regret,
    /// Larger is better.
    Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: String,
    pub setting: String,
    pub mean: f64,
    pub sd: f64,
    pub n_reps: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed_base: u64,
    pub replications: usize,
    pub config_hash: Option<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metric: Metric,
    pub rows: Vec<ReportRow>,
    pub provenance: Provenance,
}

/// A report plus the raw per-replication numbers (for paired tests).
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub per_rep: BTreeMap<String, Vec<f64>>,
    pub reference_value: f64,
    pub reference_se: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

// ───────────────────────── oracle references ─────────────────────────

/// Confounder-aware single-stage reference policy: per-action least squares
/// of the realized reward on `(u, s)`, argmax at decision time.
struct UAwareBandit {
    per_action: Vec<ProjectionModel>,
}

impl UAwareBandit {
    fn fit(spec: &ContinuousBanditSpec, m: usize, seed: u64) -> Result<Self, EvalError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut rows: Vec<(f64, f64, usize, f64)> = Vec::with_capacity(m);
        use rand_distr::Distribution;
        for _ in 0..m {
            let (s, u, _z, _w, a) = spec.draw_unit(&mut rng);
            let noise: f64 = rand_distr::StandardNormal.sample(&mut rng);
            rows.push((u, s, a, ContinuousBanditSpec::mean_reward(u, a) + 0.5 * noise));
        }
        let mut per_action = Vec::new();
        for a in 0..2usize {
            let sub: Vec<&(f64, f64, usize, f64)> = rows.iter().filter(|r| r.2 == a).collect();
            if sub.len() < 3 {
                return Err(EvalError::InvalidConfig("reference fit: empty action arm".into()));
            }
            let x = DMatrix::from_fn(sub.len(), 2, |i, j| if j == 0 { sub[i].0 } else { sub[i].1 });
            let y = DVector::from_fn(sub.len(), |i, _| sub[i].3);
            per_action.push(
                fit_projection(&x, &y, &ProjectionBackend::Linear)
                    .map_err(|e| EvalError::InvalidConfig(format!("reference fit: {e}")))?,
            );
        }
        Ok(UAwareBandit { per_action })
    }

    fn act(&self, u: f64, s: f64) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (a, m) in self.per_action.iter().enumerate() {
            let v = m.predict_row(&[u, s]).unwrap_or(f64::NEG_INFINITY);
            if v > best_v {
                best_v = v;
                best = a;
            }
        }
        best
    }
}

/// Confounder-aware greedy reference for the two-step spec: per-step,
/// per-action least squares of the reward on the current confounder.
struct UAwareSeq {
    per_step: Vec<Vec<ProjectionModel>>,
}

impl UAwareSeq {
    fn fit(spec: &SequentialSpec, m: usize, seed: u64) -> Result<Self, EvalError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut step1: Vec<(f64, usize, f64)> = Vec::with_capacity(m);
        let mut step2: Vec<(f64, usize, f64)> = Vec::with_capacity(m);
        for _ in 0..m {
            let (u1, a1, r1, u2, a2, r2) = spec.rollout_behavior_with_confounders(&mut rng);
            step1.push((u1, a1, r1));
            step2.push((u2, a2, r2));
        }
        let mut per_step = Vec::new();
        for rows in [step1, step2] {
            let mut per_action = Vec::new();
            for a in 0..2usize {
                let sub: Vec<&(f64, usize, f64)> = rows.iter().filter(|r| r.1 == a).collect();
                if sub.len() < 2 {
                    return Err(EvalError::InvalidConfig("reference fit: empty action arm".into()));
                }
                let x = DMatrix::from_fn(sub.len(), 1, |i, _| sub[i].0);
                let y = DVector::from_fn(sub.len(), |i, _| sub[i].2);
                per_action.push(
                    fit_projection(&x, &y, &ProjectionBackend::Linear)
                        .map_err(|e| EvalError::InvalidConfig(format!("reference fit: {e}")))?,
                );
            }
            per_step.push(per_action);
        }
        Ok(UAwareSeq { per_step })
    }

    fn act(&self, t: usize, u: f64) -> usize {
        let models = &self.per_step[t - 1];
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (a, m) in models.iter().enumerate() {
            let v = m.predict_row(&[u]).unwrap_or(f64::NEG_INFINITY);
            if v > best_v {
                best_v = v;
                best = a;
            }
        }
        best
    }

    /// Monte-Carlo value of the greedy reference under the true dynamics.
    fn value(&self, spec: &SequentialSpec, episodes: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut vals = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let v = spec.rollout_reference(&mut rng, |t, u| self.act(t, u));
            vals.push(v);
        }
        let (m, sd) = mean_sd(&vals);
        (m, sd / (episodes as f64).sqrt())
    }
}

/// The reference value `V(ν∗)` used by regret: exact enumeration for finite
/// specs, confounder-aware fitted reference otherwise. Returns the value
/// and its Monte-Carlo standard error (zero when exact).
pub fn reference_value(spec: &EnvSpec, oracle: &OracleMode, seed: u64) -> Result<(f64, f64), EvalError> {
    match (spec, oracle) {
        (EnvSpec::Toy(_) | EnvSpec::Discrete(_), OracleMode::Exact) => {
            let pop = spec.population().expect("finite population");
            Ok((u_aware_value_exact(&pop), 0.0))
        }
        (EnvSpec::Toy(_) | EnvSpec::Discrete(_), OracleMode::Mc { episodes }) => {
            // The exact value exists; a Monte-Carlo mode is still honored.
            let pop = spec.population().expect("finite population");
            let _ = episodes;
            Ok((u_aware_value_exact(&pop), 0.0))
        }
        (EnvSpec::Continuous(c), mode) => {
            let episodes = match mode {
                OracleMode::Mc { episodes } => *episodes,
                OracleMode::Exact => {
                    return Err(EvalError::InvalidConfig(
                        "continuous spec has no exact oracle; use the Monte-Carlo mode".into(),
                    ))
                }
            };
            let reference = UAwareBandit::fit(c, 100_000, seed ^ 0x0face)?;
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x1eaf);
            let mut vals = Vec::with_capacity(episodes);
            use rand_distr::Distribution;
            for _ in 0..episodes {
                let s: f64 = rand_distr::StandardNormal.sample(&mut rng);
                let u: f64 = rand_distr::StandardNormal.sample(&mut rng);
                let a = reference.act(u, s);
                vals.push(ContinuousBanditSpec::mean_reward(u, a));
            }
            let (m, sd) = mean_sd(&vals);
            Ok((m, sd / (episodes as f64).sqrt()))
        }
        (EnvSpec::Sequential(s), mode) => {
            let episodes = match mode {
                OracleMode::Mc { episodes } => *episodes,
                OracleMode::Exact => {
                    return Err(EvalError::InvalidConfig(
                        "sequential spec has no exact oracle; use the Monte-Carlo mode".into(),
                    ))
                }
            };
            let reference = UAwareSeq::fit(s, 100_000, seed ^ 0x0face)?;
            Ok(reference.value(s, episodes, seed ^ 0x1eaf))
        }
    }
}

/// Value of a learned bandit policy under the spec's true law.
fn bandit_policy_value(
    spec: &EnvSpec,
    policy: &crate::bandit::BanditPolicy,
    oracle: &OracleMode,
    seed: u64,
) -> Result<f64, EvalError> {
    match (spec, oracle) {
        (EnvSpec::Toy(_) | EnvSpec::Discrete(_), OracleMode::Exact) => {
            let pop = spec.population().expect("finite population");
            Ok(oracle_value_exact(&pop, |s, z, ap| {
                policy.act(&[s], &[z], ap).unwrap_or(0)
            }))
        }
        (_, OracleMode::Mc { episodes }) => {
            let (v, _) = oracle_value_mc_bandit(
                spec,
                |s, z, ap| policy.act(s, z, ap).unwrap_or(0),
                *episodes,
                seed,
            );
            Ok(v)
        }
        (_, OracleMode::Exact) => Err(EvalError::InvalidConfig(
            "exact oracle unavailable for this spec".into(),
        )),
    }
}

/// Regret of a learned bandit policy: `V(ν∗) − V(ν̂)`.
pub fn regret_bandit(
    spec: &EnvSpec,
    policy: &crate::bandit::BanditPolicy,
    oracle: &OracleMode,
    seed: u64,
) -> Result<f64, EvalError> {
    let (v_ref, _) = reference_value(spec, oracle, seed)?;
    let v = bandit_policy_value(spec, policy, oracle, seed)?;
    Ok(v_ref - v)
}

fn run_one_bandit_rep(
    cfg: &ExperimentConfig,
    rep: usize,
    v_ref: f64,
) -> Result<Vec<(String, f64)>, EvalError> {
    let seed = cfg.seed_base + rep as u64;
    let data = match &cfg.spec {
        EnvSpec::Toy(t) => t.sample(cfg.n, seed),
        EnvSpec::Discrete(d) => d.sample(cfg.n, seed),
        EnvSpec::Continuous(c) => c.sample(cfg.n, seed),
        EnvSpec::Sequential(_) => unreachable!("bandit rep on sequential spec"),
    };
    let est = EstimatorConfig { seed, ..cfg.estimator.clone() };
    let backends = cfg.backend.backends();
    let stage = fit_bridge_stage(&data, &est, &backends)
        .map_err(|e| EvalError::Replication { seed, message: e.to_string() })?;
    let mut out = Vec::new();
    for kind in &cfg.kinds {
        let cond = Conditioning::for_kind(*kind)
            .map_err(|e| EvalError::Replication { seed, message: e.to_string() })?;
        let fit = learn_from_bridge(&stage, &data, *kind, cond, &backends)
            .map_err(|e| EvalError::Replication { seed, message: e.to_string() })?;
        let v = bandit_policy_value(
            &cfg.spec,
            &fit.policy,
            &cfg.oracle,
            cfg.seed_base ^ 0x9c_0000 ^ (rep as u64),
        )?;
        out.push((kind.name().to_string(), v_ref - v));
    }
    Ok(out)
}

fn run_one_seq_rep(
    cfg: &ExperimentConfig,
    rep: usize,
    v_ref: f64,
) -> Result<Vec<(String, f64)>, EvalError> {
    let seed = cfg.seed_base + rep as u64;
    let spec = match &cfg.spec {
        EnvSpec::Sequential(s) => *s,
        _ => unreachable!("sequential rep on bandit spec"),
    };
    let data = spec.sample(cfg.n, seed);
    let est = EstimatorConfig { seed, ..cfg.estimator.clone() };
    let backends = cfg.backend.backends();
    let episodes = match cfg.oracle {
        OracleMode::Mc { episodes } => episodes,
        OracleMode::Exact => {
            return Err(EvalError::InvalidConfig(
                "sequential experiments need the Monte-Carlo oracle".into(),
            ))
        }
    };
    let mut out = Vec::new();
    for kind in &cfg.kinds {
        let fit = learn_seq(&data, *kind, &est, &backends)
            .map_err(|e| EvalError::Replication { seed, message: e.to_string() })?;
        let (v, _) = oracle_value_mc_seq(
            &spec,
            &fit.policy,
            episodes,
            cfg.seed_base ^ 0x9c_0000 ^ (rep as u64),
        );
        out.push((kind.name().to_string(), v_ref - v));
    }
    Ok(out)
}

/// Run every replication of an experiment and aggregate mean/sd regrets per
/// policy kind. A failed replication aborts the experiment with its seed.
pub fn run_replications(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, EvalError> {
    cfg.validate()?;
    let (v_ref, ref_se) = reference_value(&cfg.spec, &cfg.oracle, cfg.seed_base ^ 0x0e_4ac1e)?;

    let reps: Vec<usize> = (0..cfg.replications).collect();
    let run_one = |&rep: &usize| -> Result<Vec<(String, f64)>, EvalError> {
        if cfg.spec.is_sequential() {
            run_one_seq_rep(cfg, rep, v_ref)
        } else {
            run_one_bandit_rep(cfg, rep, v_ref)
        }
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Result<Vec<(String, f64)>, EvalError>> = {
        use rayon::prelude::*;
        reps.par_iter().map(run_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<Vec<(String, f64)>, EvalError>> = reps.iter().map(run_one).collect();

    let mut per_rep: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for res in results {
        for (kind, regret) in res? {
            per_rep.entry(kind).or_default().push(regret);
        }
    }
    let mut rows = Vec::new();
    for kind in &cfg.kinds {
        let series = &per_rep[kind.name()];
        let (mean, sd) = mean_sd(series);
        rows.push(ReportRow {
            kind: kind.name().to_string(),
            setting: cfg.setting.clone(),
            mean,
            sd,
            n_reps: series.len(),
        });
    }
    Ok(ExperimentOutcome {
        report: ExperimentReport {
            metric: Metric::Regret,
            rows,
            provenance: Provenance {
                seed_base: cfg.seed_base,
                replications: cfg.replications,
                config_hash: None,
                notes: Vec::new(),
            },
        },
        per_rep,
        reference_value: v_ref,
        reference_se: ref_se,
    })
}

// ───────────────────────── split evaluation ─────────────────────────

/// What gets scored in the split protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalKind {
    Policy(PolicyClassKind),
    BehaviorClone,
}

impl EvalKind {
    pub fn name(&self) -> String {
        match self {
            EvalKind::Policy(k) => k.name().to_string(),
            EvalKind::BehaviorClone => "behavior-clone".to_string(),
        }
    }
}

/// Random-split evaluation: learn on a train fraction, score every kind on
/// the held-out rows with a bridge refitted on the whole dataset, and
/// aggregate over `m` splits (means and standard errors).
pub fn split_evaluate(
    dataset: &BanditDataset,
    train_fraction: f64,
    kinds: &[EvalKind],
    splits: usize,
    seed: u64,
    estimator: &EstimatorConfig,
    backend: BackendChoice,
) -> Result<ExperimentReport, EvalError> {
    if splits == 0 || kinds.is_empty() {
        return Err(EvalError::Split("need at least one split and one kind".into()));
    }
    let backends = backend.backends();
    // The scoring bridge uses the whole dataset once — it does not depend
    // on any split.
    let full_cfg = EstimatorConfig { seed, ..estimator.clone() };
    let full_stage = fit_bridge_stage(dataset, &full_cfg, &backends)?;
    let scoring_bridge: &FittedBridge = &full_stage.bridge;

    let split_one = |&split: &usize| -> Result<Vec<(String, f64)>, EvalError> {
        let split_seed = seed + split as u64;
        let (train_idx, eval_idx) = random_split_indices(dataset.n(), train_fraction, split_seed)
            .map_err(|e| EvalError::Split(e.to_string()))?;
        let train = dataset.select(&train_idx);
        let eval = dataset.select(&eval_idx);
        let est = EstimatorConfig { seed: split_seed, ..estimator.clone() };
        let stage = fit_bridge_stage(&train, &est, &backends)
            .map_err(|e| EvalError::Replication { seed: split_seed, message: e.to_string() })?;
        let mut out = Vec::new();
        for kind in kinds {
            let value = match kind {
                EvalKind::BehaviorClone => estimate_value_behavior_clone(scoring_bridge, &eval)?,
                EvalKind::Policy(k) => {
                    let cond = Conditioning::for_kind(*k).map_err(|e| EvalError::Replication {
                        seed: split_seed,
                        message: e.to_string(),
                    })?;
                    let fit = learn_from_bridge(&stage, &train, *k, cond, &backends).map_err(
                        |e| EvalError::Replication { seed: split_seed, message: e.to_string() },
                    )?;
                    estimate_value(&fit.policy, scoring_bridge, &eval)?
                }
            };
            out.push((kind.name(), value));
        }
        Ok(out)
    };

    let split_ids: Vec<usize> = (0..splits).collect();
    #[cfg(feature = "parallel")]
    let results: Vec<Result<Vec<(String, f64)>, EvalError>> = {
        use rayon::prelude::*;
        split_ids.par_iter().map(split_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<Vec<(String, f64)>, EvalError>> =
        split_ids.iter().map(split_one).collect();

    let mut per_kind: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for res in results {
        for (kind, value) in res? {
            per_kind.entry(kind).or_default().push(value);
        }
    }
    let mut rows = Vec::new();
    for kind in kinds {
        let series = &per_kind[&kind.name()];
        let (mean, sd) = mean_sd(series);
        rows.push(ReportRow {
            kind: kind.name(),
            setting: format!("{splits} splits, train {train_fraction}"),
            // Standard error over splits, matching the split protocol's
            // reporting.
            mean,
            sd: sd / (series.len() as f64).sqrt(),
            n_reps: series.len(),
        });
    }
    Ok(ExperimentReport {
        metric: Metric::Value,
        rows,
        provenance: Provenance {
            seed_base: seed,
            replications: splits,
            config_hash: None,
            notes: vec!["sd column holds the standard error over splits".into()],
        },
    })
}

// ───────────────────────── statistics & rendering ─────────────────────────

/// One-sided paired t-test p-value for H₁: mean(a − b) > 0.
pub fn paired_one_sided_p(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    assert!(n >= 2, "need at least two pairs");
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_sd(&diffs);
    if sd == 0.0 {
        return if mean > 0.0 { 0.0 } else { 1.0 };
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid t distribution");
    1.0 - dist.cdf(t)
}

/// CSV rendering with the stable column order
/// `kind,setting,mean,sd,n_reps`.
pub fn render_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("kind,setting,mean,sd,n_reps\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.kind, row.setting, row.mean, row.sd, row.n_reps
        ));
    }
    out
}

/// Parse a report back from [`render_csv`] output.
pub fn parse_csv(text: &str, metric: Metric) -> Result<ExperimentReport, EvalError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "kind,setting,mean,sd,n_reps" {
                return Err(EvalError::Split(format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(EvalError::Split(format!("bad row {line:?}")));
        }
        rows.push(ReportRow {
            kind: fields[0].to_string(),
            setting: fields[1].to_string(),
            mean: fields[2].parse().map_err(|_| EvalError::Split(format!("bad mean {line:?}")))?,
            sd: fields[3].parse().map_err(|_| EvalError::Split(format!("bad sd {line:?}")))?,
            n_reps: fields[4]
                .parse()
                .map_err(|_| EvalError::Split(format!("bad n_reps {line:?}")))?,
        });
    }
    Ok(ExperimentReport { metric, rows, provenance: Provenance::default() })
}

/// Markdown rendering in the result tables' layout: one row per setting,
/// one column per policy kind, entries `mean (sd)`, the best entry per row
/// marked with an asterisk.
pub fn render_markdown(report: &ExperimentReport) -> String {
    let mut kinds: Vec<String> = Vec::new();
    let mut settings: Vec<String> = Vec::new();
    for row in &report.rows {
        if !kinds.contains(&row.kind) {
            kinds.push(row.kind.clone());
        }
        if !settings.contains(&row.setting) {
            settings.push(row.setting.clone());
        }
    }
    let lookup: BTreeMap<(String, String), &ReportRow> = report
        .rows
        .iter()
        .map(|r| ((r.setting.clone(), r.kind.clone()), r))
        .collect();
    let mut out = String::new();
    out.push_str(&format!("| setting | {} |\n", kinds.join(" | ")));
    out.push_str(&format!("|---|{}|\n", kinds.iter().map(|_| "---").collect::<Vec<_>>().join("|")));
    for setting in &settings {
        let best = kinds
            .iter()
            .filter_map(|k| lookup.get(&(setting.clone(), k.clone())))
            .map(|r| r.mean)
            .fold(
                match report.metric {
                    Metric::Regret => f64::INFINITY,
                    Metric::Value => f64::NEG_INFINITY,
                },
                |acc, v| match report.metric {
                    Metric::Regret => acc.min(v),
                    Metric::Value => acc.max(v),
                },
            );
        let mut cells = Vec::new();
        for kind in &kinds {
            match lookup.get(&(setting.clone(), kind.clone())) {
                Some(r) => {
                    let marker = if r.mean == best { "*" } else { "" };
                    cells.push(format!("{:.4} ({:.1e}){}", r.mean, r.sd, marker));
                }
                None => cells.push(String::from("—")),
            }
        }
        out.push_str(&format!("| {} | {} |\n", setting, cells.join(" | ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::DiscreteBanditSpec;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            spec: EnvSpec::Discrete(DiscreteBanditSpec::new(0.9)),
            setting: "eps=0.9".into(),
            n: 2000,
            replications: 4,
            seed_base: 7,
            kinds: vec![PolicyClassKind::SOnly, PolicyClassKind::SZ, PolicyClassKind::Super],
            estimator: EstimatorConfig::default(),
            backend: BackendChoice::Tabular,
            oracle: OracleMode::Exact,
        }
    }

    #[test]
    fn reference_value_discrete_is_quarter() {
        let (v, se) = reference_value(
            &EnvSpec::Discrete(DiscreteBanditSpec::new(0.7)),
            &OracleMode::Exact,
            1,
        )
        .unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn single_rep_has_zero_sd() {
        let cfg = ExperimentConfig { replications: 1, ..tiny_config() };
        let out = run_replications(&cfg).unwrap();
        for row in &out.report.rows {
            assert_eq!(row.sd, 0.0);
            assert_eq!(row.n_reps, 1);
        }
    }

    #[test]
    fn aggregation_matches_independent_formula() {
        let out = run_replications(&tiny_config()).unwrap();
        for row in &out.report.rows {
            let series = &out.per_rep[&row.kind];
            // One-pass (sum / sum of squares) recomputation.
            let n = series.len() as f64;
            let s1: f64 = series.iter().sum();
            let s2: f64 = series.iter().map(|v| v * v).sum();
            let mean = s1 / n;
            let var = (s2 - n * mean * mean) / (n - 1.0);
            assert!((row.mean - mean).abs() <= 1e-12);
            assert!((row.sd - var.max(0.0).sqrt()).abs() <= 1e-9);
        }
    }

    #[test]
    fn replications_are_deterministic() {
        let a = run_replications(&tiny_config()).unwrap();
        let b = run_replications(&tiny_config()).unwrap();
        for (ra, rb) in a.report.rows.iter().zip(&b.report.rows) {
            assert_eq!(ra.mean.to_bits(), rb.mean.to_bits());
            assert_eq!(ra.sd.to_bits(), rb.sd.to_bits());
        }
    }

    #[test]
    fn seed_isolation_permuting_rep_order() {
        // Aggregates must not depend on completion order: recompute the
        // mean/sd from a permuted per-rep series.
        let out = run_replications(&tiny_config()).unwrap();
        for row in &out.report.rows {
            let mut series = out.per_rep[&row.kind].clone();
            series.reverse();
            let (mean, sd) = mean_sd(&series);
            assert_eq!(mean.to_bits(), row.mean.to_bits());
            assert!((sd - row.sd).abs() <= 1e-15);
        }
    }

    #[test]
    fn render_roundtrip_csv() {
        let out = run_replications(&tiny_config()).unwrap();
        let text = render_csv(&out.report);
        let back = parse_csv(&text, Metric::Regret).unwrap();
        for (ra, rb) in out.report.rows.iter().zip(&back.rows) {
            assert_eq!(ra.kind, rb.kind);
            assert_eq!(ra.mean.to_bits(), rb.mean.to_bits());
            assert_eq!(ra.sd.to_bits(), rb.sd.to_bits());
            assert_eq!(ra.n_reps, rb.n_reps);
        }
    }

    #[test]
    fn render_markdown_marks_best_and_handles_empty() {
        let empty = ExperimentReport {
            metric: Metric::Regret,
            rows: vec![],
            provenance: Provenance::default(),
        };
        let text = render_markdown(&empty);
        assert!(text.starts_with("| setting |"));
        let out = run_replications(&tiny_config()).unwrap();
        let text = render_markdown(&out.report);
        assert_eq!(text.matches('*').count(), 1, "exactly one best per row: {text}");
    }

    #[test]
    fn paired_test_detects_dominance() {
        let a = [0.9, 1.0, 1.1, 0.95, 1.05];
        let b = [0.1, 0.2, 0.15, 0.12, 0.18];
        assert!(paired_one_sided_p(&a, &b) < 1e-4);
        assert!(paired_one_sided_p(&b, &a) > 0.99);
    }

    #[test]
    fn split_evaluate_behavior_clone_is_bridge_mean() {
        let data = DiscreteBanditSpec::new(0.9).sample(3000, 3);
        let report = split_evaluate(
            &data,
            0.6,
            &[EvalKind::BehaviorClone],
            3,
            11,
            &EstimatorConfig::default(),
            BackendChoice::Tabular,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.rows[0].mean.is_finite());
    }

    #[test]
    fn split_evaluate_is_deterministic() {
        let data = DiscreteBanditSpec::new(0.9).sample(2000, 5);
        let kinds =
            [EvalKind::Policy(PolicyClassKind::SOnly), EvalKind::Policy(PolicyClassKind::Super)];
        let run = || {
            split_evaluate(
                &data,
                0.6,
                &kinds,
                4,
                21,
                &EstimatorConfig::default(),
                BackendChoice::Tabular,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.mean.to_bits(), rb.mean.to_bits());
        }
    }
}
