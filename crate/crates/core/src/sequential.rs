//! Backward fitted-Q super-policy learning for confounded POMDPs under
//! memoryless confounding, plus the common-policy baseline.
//!
//! The recursion runs t = T..1. At the last step the bridge is fitted once
//! from the restriction with q-inputs `(W_T, O_{1:T}, A_{1:T−1}, A_T)` and
//! instruments `(O_{1:T}, A_{1:T−1}, O_0, A_T)`, target `R_T`. For t < T one
//! bridge is fitted per behavior-action tuple `a_{1:t}`, with target
//! `(R_t + V̂_{t+1})/(T−t+1)` and the fitted function scaled back by
//! `(T−t+1)`; the pseudo-outcome `V̂_{t+1}` plugs the previous stage's bridge
//! and policy at the tuple extended by the observed next action.
//!
//! Convention (the same observed actions play two roles): inside every fit
//! the data's action columns fill the *own-history* slot of the bridge and
//! the projection's conditioning set, while enumerated tuples fill the
//! *behavior-history* index. At decision time the roles separate — at t < T
//! the policy's own past actions enter the conditioning columns and the
//! behavior history selects the bridge component; at t = T the enumerated
//! own history was plugged into the bridge's argument slot instead, so the
//! component is selected by the own history and the conditioning point
//! carries the behavior actions.

use crate::bandit::{
    learn_with_conditioning, Backends, BanditError, BanditFit, BanditPolicy, BridgeBackend,
    Conditioning,
};
use crate::datamodel::{
    validate_sequential, BanditDataset, EstimatorConfig, PolicyClassKind, SequentialDataset,
};
use crate::envs::SeqRolloutPolicy;
use crate::kernels::{median_heuristic, KernelSpec, Standardizer};
use crate::moments::{
    cross_validate, fit_projection, fit_tabular_with_layout, BridgeFunction, MinimaxFactors,
    MomentError, MomentProblem, ProjectionBackend, ProjectionModel,
};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SequentialError {
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("policy kind {0:?} is not sequential")]
    NotSequentialKind(PolicyClassKind),
    #[error("action-tuple enumeration infeasible: |A|^(T-1) = {count} exceeds 64")]
    TooManyTuples { count: usize },
    #[error("estimation failed: {0}")]
    Moment(#[from] MomentError),
    #[error("single-stage engine: {0}")]
    Bandit(#[from] BanditError),
    #[error("kernel failure: {0}")]
    Kernel(#[from] crate::kernels::KernelError),
    #[error("step index {t} outside horizon {horizon}")]
    BadStep { t: usize, horizon: usize },
    #[error("history length mismatch at step {t}: obs {obs}, own {own}, behavior {behavior}")]
    BadHistory { t: usize, obs: usize, own: usize, behavior: usize },
}

/// Enumerate all action tuples of the given length.
fn tuples(n_actions: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        let mut next = Vec::with_capacity(out.len() * n_actions);
        for prefix in &out {
            for a in 0..n_actions {
                let mut t = prefix.clone();
                t.push(a);
                next.push(t);
            }
        }
        out = next;
    }
    out
}

/// Stage input layout: how `(w_t, o_{1:t}, a_{1:t−1}, a_t)` rows and the
/// instrument rows `(o_{1:t}, a_{1:t−1}, o0, a_t)` are assembled, either raw
/// (tabular) or standardized with one-hot actions (kernel).
#[derive(Debug, Clone)]
struct StageLayout {
    t: usize,
    n_actions: usize,
    d_w: usize,
    d_o: Vec<usize>,
    d_o0: usize,
    /// Standardizers when kernelized, in order: w_t, o_1..o_t, o0.
    kernelized: Option<(Standardizer, Vec<Standardizer>, Standardizer)>,
}

/// How to fill the own-history action block of a bridge-evaluation row.
#[derive(Debug, Clone, Copy)]
enum OwnFill<'a> {
    /// The observed actions `A_{1:t−1}` of each episode.
    Observed,
    /// One fixed tuple for every row.
    Fixed(&'a [usize]),
}

/// How to fill the trailing candidate-action slot.
#[derive(Debug, Clone, Copy)]
enum CandidateFill {
    Observed,
    Fixed(usize),
}

impl StageLayout {
    fn action_width(&self) -> usize {
        if self.kernelized.is_some() {
            self.n_actions
        } else {
            1
        }
    }

    fn q_dim(&self) -> usize {
        self.d_w + self.d_o.iter().sum::<usize>() + self.t * self.action_width()
    }

    fn write_action(&self, row: &mut [f64], offset: usize, a: usize) {
        if self.kernelized.is_some() {
            row[offset + a] = 1.0;
        } else {
            row[offset] = a as f64;
        }
    }

    /// Bridge-argument rows for every episode of `d`.
    fn q_matrix(&self, d: &SequentialDataset, own: OwnFill, cand: CandidateFill) -> DMatrix<f64> {
        let n = d.n();
        let step = &d.steps[self.t - 1];
        let w = match &self.kernelized {
            Some((w_st, _, _)) => w_st.apply(&step.w),
            None => step.w.clone(),
        };
        let obs: Vec<DMatrix<f64>> = (0..self.t)
            .map(|j| match &self.kernelized {
                Some((_, o_st, _)) => o_st[j].apply(&d.steps[j].o),
                None => d.steps[j].o.clone(),
            })
            .collect();
        let mut m = DMatrix::zeros(n, self.q_dim());
        let mut row = vec![0.0; self.q_dim()];
        for i in 0..n {
            row.iter_mut().for_each(|v| *v = 0.0);
            let mut c0 = 0;
            for c in 0..self.d_w {
                row[c0 + c] = w[(i, c)];
            }
            c0 += self.d_w;
            for (j, o) in obs.iter().enumerate() {
                for c in 0..self.d_o[j] {
                    row[c0 + c] = o[(i, c)];
                }
                c0 += self.d_o[j];
            }
            for j in 0..self.t - 1 {
                let a = match own {
                    OwnFill::Observed => d.steps[j].a[i],
                    OwnFill::Fixed(tuple) => tuple[j],
                };
                self.write_action(&mut row, c0, a);
                c0 += self.action_width();
            }
            let a = match cand {
                CandidateFill::Observed => step.a[i],
                CandidateFill::Fixed(a) => a,
            };
            self.write_action(&mut row, c0, a);
            for (c, v) in row.iter().enumerate() {
                m[(i, c)] = *v;
            }
        }
        m
    }

    fn g_dim(&self) -> usize {
        self.d_o.iter().sum::<usize>() + self.d_o0 + self.t * self.action_width()
    }

    /// Instrument rows `(o0, o_{1:t}, a_{1:t−1}, a_t)`, always observed. The
    /// free instrument block `o0` comes first so the trailing columns form
    /// the same stratum as the bridge arguments.
    fn g_matrix(&self, d: &SequentialDataset) -> DMatrix<f64> {
        let n = d.n();
        let obs: Vec<DMatrix<f64>> = (0..self.t)
            .map(|j| match &self.kernelized {
                Some((_, o_st, _)) => o_st[j].apply(&d.steps[j].o),
                None => d.steps[j].o.clone(),
            })
            .collect();
        let o0 = match &self.kernelized {
            Some((_, _, o0_st)) => o0_st.apply(&d.o0),
            None => d.o0.clone(),
        };
        let mut m = DMatrix::zeros(n, self.g_dim());
        for i in 0..n {
            let mut c0 = 0;
            for c in 0..self.d_o0 {
                m[(i, c0 + c)] = o0[(i, c)];
            }
            c0 += self.d_o0;
            for (j, o) in obs.iter().enumerate() {
                for c in 0..self.d_o[j] {
                    m[(i, c0 + c)] = o[(i, c)];
                }
                c0 += self.d_o[j];
            }
            for j in 0..self.t {
                let mut row = vec![0.0; self.action_width()];
                self.write_action(&mut row, 0, d.steps[j].a[i]);
                for (c, v) in row.iter().enumerate() {
                    m[(i, c0 + c)] = *v;
                }
                c0 += self.action_width();
            }
        }
        m
    }
}

/// One stage's fitted bridges: a single component at t = T, one per
/// behavior tuple `a_{1:t}` below.
#[derive(Debug, Clone)]
pub struct StageBridges {
    layout: StageLayout,
    components: BTreeMap<Vec<usize>, BridgeFunction>,
}

impl StageBridges {
    pub fn t(&self) -> usize {
        self.layout.t
    }

    fn component(&self, key: &[usize]) -> &BridgeFunction {
        self.components
            .get(key)
            .or_else(|| self.components.get(&Vec::new()))
            .expect("bridge component for tuple")
    }

    /// Evaluate the keyed component at every episode.
    fn eval(
        &self,
        d: &SequentialDataset,
        key: &[usize],
        own: OwnFill,
        cand: CandidateFill,
    ) -> Result<DVector<f64>, MomentError> {
        let m = self.layout.q_matrix(d, own, cand);
        self.component(key).eval_rows(&m)
    }

    /// Component `key` at every episode: observed actions in the
    /// own-history slot, a fixed candidate action.
    pub fn eval_observed(
        &self,
        d: &SequentialDataset,
        key: &[usize],
        candidate: usize,
    ) -> Result<DVector<f64>, MomentError> {
        self.eval(d, key, OwnFill::Observed, CandidateFill::Fixed(candidate))
    }

    /// Component `key` at every episode with a fixed own-history tuple.
    pub fn eval_with_own(
        &self,
        d: &SequentialDataset,
        key: &[usize],
        own: &[usize],
        candidate: usize,
    ) -> Result<DVector<f64>, MomentError> {
        self.eval(d, key, OwnFill::Fixed(own), CandidateFill::Fixed(candidate))
    }

    /// Text dumps of every component, keyed by behavior tuple.
    pub fn component_dumps(&self) -> Vec<(Vec<usize>, String)> {
        self.components.iter().map(|(k, b)| (k.clone(), b.dump())).collect()
    }
}

/// Conditioning matrix for the projection step at stage `t`:
/// `[o_{1:t}, a_{1:t−1}, (a_t)]` with raw action columns.
fn conditioning_matrix(d: &SequentialDataset, t: usize, include_current: bool) -> DMatrix<f64> {
    let n = d.n();
    let d_obs: usize = d.steps[..t].iter().map(|s| s.o.ncols()).sum();
    let cols = d_obs + (t - 1) + usize::from(include_current);
    let mut m = DMatrix::zeros(n, cols);
    for i in 0..n {
        let mut c0 = 0;
        for step in &d.steps[..t] {
            for c in 0..step.o.ncols() {
                m[(i, c0 + c)] = step.o[(i, c)];
            }
            c0 += step.o.ncols();
        }
        for step in &d.steps[..t - 1] {
            m[(i, c0)] = step.a[i] as f64;
            c0 += 1;
        }
        if include_current {
            m[(i, c0)] = d.steps[t - 1].a[i] as f64;
        }
    }
    m
}

/// One stage of the learned policy: projection models indexed by
/// `(index tuple, candidate action)`.
#[derive(Debug, Clone)]
struct StagePolicy {
    t: usize,
    horizon: usize,
    superseq: bool,
    n_actions: usize,
    models: BTreeMap<(Vec<usize>, usize), ProjectionModel>,
    globals: BTreeMap<(Vec<usize>, usize), f64>,
}

impl StagePolicy {
    /// Conditioning point in training layout; `None` entries of the action
    /// slots are resolved by the caller.
    fn point(&self, obs: &[Vec<f64>], own: &[usize], behavior: &[usize]) -> Vec<f64> {
        let mut p: Vec<f64> = obs.iter().flatten().copied().collect();
        if self.t == self.horizon {
            // Conditioning columns are the behavior actions (all t of them
            // for the super class, none for the common class).
            if self.superseq {
                p.extend(behavior.iter().map(|&a| a as f64));
            }
        } else {
            // Own past actions fill the first t−1 action columns; the
            // behavior's current action fills the last (super class only).
            p.extend(own.iter().map(|&a| a as f64));
            if self.superseq {
                p.push(behavior[self.t - 1] as f64);
            }
        }
        p
    }

    fn index_tuple(&self, own: &[usize], behavior: &[usize]) -> Vec<usize> {
        if self.t == self.horizon {
            own.to_vec()
        } else if self.superseq {
            behavior[..self.t - 1].to_vec()
        } else {
            Vec::new()
        }
    }

    fn decide(&self, obs: &[Vec<f64>], own: &[usize], behavior: &[usize]) -> Result<usize, MomentError> {
        let point = self.point(obs, own, behavior);
        let key = self.index_tuple(own, behavior);
        let mut best = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for a in 0..self.n_actions {
            let lookup = (key.clone(), a);
            let model = &self.models[&lookup];
            let v = if model.covers(&point) {
                model.predict_row(&point)?
            } else {
                self.globals[&lookup]
            };
            if v > best_val {
                best_val = v;
                best = a;
            }
        }
        Ok(best)
    }
}

/// A learned sequential policy: per-step decision rules mapping
/// `(o_{1:t}, own a^ν_{1:t−1}, behavior a_{1:t})` to an action.
#[derive(Debug, Clone)]
pub struct SequentialPolicy {
    kind: PolicyClassKind,
    n_actions: usize,
    stages: Vec<StageStrategy>,
}

#[derive(Debug, Clone)]
enum StageStrategy {
    /// Horizon-1 delegation to the single-stage engine.
    Single(Box<BanditPolicy>),
    Stage(StagePolicy),
}

impl SequentialPolicy {
    pub fn kind(&self) -> PolicyClassKind {
        self.kind
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    /// Deterministic decision at step `t` (1-based).
    pub fn act_seq(
        &self,
        t: usize,
        obs: &[Vec<f64>],
        own: &[usize],
        behavior: &[usize],
    ) -> Result<usize, SequentialError> {
        if t == 0 || t > self.stages.len() {
            return Err(SequentialError::BadStep { t, horizon: self.stages.len() });
        }
        if obs.len() != t || own.len() != t - 1 || behavior.len() != t {
            return Err(SequentialError::BadHistory {
                t,
                obs: obs.len(),
                own: own.len(),
                behavior: behavior.len(),
            });
        }
        match &self.stages[t - 1] {
            StageStrategy::Single(p) => {
                // (s, z, a′) := (o_1, unused, a_1); the proxy block is not
                // part of the horizon-1 policy classes.
                Ok(p.act(&obs[0], &[], behavior[0])?)
            }
            StageStrategy::Stage(sp) => Ok(sp.decide(obs, own, behavior)?),
        }
    }
}

impl SeqRolloutPolicy for SequentialPolicy {
    fn decide(&self, t: usize, obs: &[Vec<f64>], own: &[usize], behavior: &[usize]) -> usize {
        self.act_seq(t, obs, own, behavior).expect("rollout decision")
    }
}

/// Value-identification handle: the stage-1 bridge components.
#[derive(Debug, Clone)]
pub enum Stage1Bridge {
    Single(crate::bandit::FittedBridge),
    Tuples(StageBridges),
}

/// Per-stage diagnostics.
#[derive(Debug, Clone, Default)]
pub struct StageDiagnostics {
    pub t: usize,
    /// Largest |pseudo-outcome| over episodes and tuples, before scaling.
    pub max_pseudo_outcome: f64,
    /// The nominal remaining-reward bound `(T−t)·R_max`; compare against
    /// `max_pseudo_outcome` to see how far the plug-in continuation values
    /// stray from the value scale.
    pub pseudo_outcome_bound: f64,
    pub lambda_mu: f64,
}

/// Everything produced by one sequential learning run.
#[derive(Debug, Clone)]
pub struct SequentialFit {
    pub policy: SequentialPolicy,
    pub stage1: Stage1Bridge,
    /// Every stage's bridge components (empty for the horizon-1 delegation).
    pub stage_bridges: Vec<StageBridges>,
    pub diagnostics: Vec<StageDiagnostics>,
}

fn seq_conditioning(kind: PolicyClassKind) -> Result<bool, SequentialError> {
    match kind {
        PolicyClassKind::SuperSeq => Ok(true),
        PolicyClassKind::Common => Ok(false),
        k => Err(SequentialError::NotSequentialKind(k)),
    }
}

/// Map a horizon-1 dataset onto the single-stage engine's layout.
fn horizon1_bandit_view(d: &SequentialDataset) -> BanditDataset {
    let step = &d.steps[0];
    BanditDataset {
        s: step.o.clone(),
        z: d.o0.clone(),
        w: step.w.clone(),
        a: step.a.clone(),
        r: step.r.clone(),
        n_actions: d.n_actions,
    }
}

/// Learn a sequential policy by the backward fitted-Q recursion; `kind`
/// selects the super class (projections conditioned on the behavior
/// actions) or the common baseline (behavior actions ignored).
pub fn learn_seq(
    d: &SequentialDataset,
    kind: PolicyClassKind,
    cfg: &EstimatorConfig,
    backends: &Backends,
) -> Result<SequentialFit, SequentialError> {
    validate_sequential(d)
        .into_result()
        .map_err(|e| SequentialError::InvalidData(e.to_string()))?;
    cfg.validate().map_err(|e| SequentialError::InvalidData(e.to_string()))?;
    let superseq = seq_conditioning(kind)?;
    let horizon = d.horizon();

    // Horizon 1 reduces to the single-stage pipeline with
    // (S, Z, W) := (O_1, O_0, W_1); the super class conditions on (S, A′),
    // the common class on S alone.
    if horizon == 1 {
        let view = horizon1_bandit_view(d);
        let cond = Conditioning { use_z: false, use_a: superseq };
        let BanditFit { bridge, policy, diagnostics } =
            learn_with_conditioning(&view, kind, cond, cfg, backends)?;
        return Ok(SequentialFit {
            policy: SequentialPolicy {
                kind,
                n_actions: d.n_actions,
                stages: vec![StageStrategy::Single(Box::new(policy))],
            },
            stage1: Stage1Bridge::Single(bridge),
            stage_bridges: Vec::new(),
            diagnostics: vec![StageDiagnostics {
                t: 1,
                max_pseudo_outcome: 0.0,
                pseudo_outcome_bound: 0.0,
                lambda_mu: diagnostics.lambda_mu,
            }],
        });
    }

    let tuple_count = d.n_actions.pow(horizon as u32 - 1);
    if tuple_count > 64 {
        return Err(SequentialError::TooManyTuples { count: tuple_count });
    }

    // Stage layouts and, for the kernel backend, per-stage kernels. The
    // penalties are resolved once at the last stage (cross-validated there
    // when requested) and reused downward.
    let kernelized = matches!(backends.bridge, BridgeBackend::Minimax { .. });
    let mut layouts = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let kern = if kernelized {
            let w_st = Standardizer::fit(&d.steps[t - 1].w)?;
            let o_st = d.steps[..t]
                .iter()
                .map(|s| Standardizer::fit(&s.o))
                .collect::<Result<Vec<_>, _>>()?;
            let o0_st = Standardizer::fit(&d.o0)?;
            Some((w_st, o_st, o0_st))
        } else {
            None
        };
        layouts.push(StageLayout {
            t,
            n_actions: d.n_actions,
            d_w: d.steps[t - 1].w.ncols(),
            d_o: d.steps[..t].iter().map(|s| s.o.ncols()).collect(),
            d_o0: d.o0.ncols(),
            kernelized: kern,
        });
    }

    let mut fit_cfg = cfg.clone();
    let mut stage_diag = vec![StageDiagnostics::default(); horizon];
    let mut stages: Vec<Option<StagePolicy>> = (0..horizon).map(|_| None).collect();
    let mut bridges_by_stage: Vec<Option<StageBridges>> = (0..horizon).map(|_| None).collect();

    for t in (1..=horizon).rev() {
        let layout = &layouts[t - 1];
        let q_obs = layout.q_matrix(d, OwnFill::Observed, CandidateFill::Observed);
        let g_obs = layout.g_matrix(d);
        let scale = (horizon - t + 1) as f64;

        // Targets per tuple: R_T at the last stage, the scaled pseudo-outcome
        // recursion below it.
        let stage_tuples: Vec<Vec<usize>> =
            if t == horizon { vec![Vec::new()] } else { tuples(d.n_actions, t) };
        let mut max_pseudo = 0.0f64;
        let pseudo_bound = (horizon - t) as f64 * d.r_max;
        let mut targets_by_tuple: BTreeMap<Vec<usize>, DVector<f64>> = BTreeMap::new();
        for tuple in &stage_tuples {
            if t == horizon {
                targets_by_tuple.insert(tuple.clone(), d.steps[t - 1].r.clone());
            } else {
                let next_bridges = bridges_by_stage[t].as_ref().expect("stage t+1 fitted");
                let next_policy = stages[t].as_ref().expect("stage t+1 policy");
                let mut tv = DVector::zeros(d.n());
                for i in 0..d.n() {
                    // Behavior index for the next stage: the enumerated
                    // tuple extended by the observed next action.
                    let mut next_key = tuple.clone();
                    next_key.push(d.steps[t].a[i]);
                    let obs: Vec<Vec<f64>> = (0..=t)
                        .map(|j| {
                            (0..d.steps[j].o.ncols()).map(|c| d.steps[j].o[(i, c)]).collect()
                        })
                        .collect();
                    let own: Vec<usize> = (0..t).map(|j| d.steps[j].a[i]).collect();
                    let chosen = next_policy.decide(&obs, &own, &next_key)?;
                    // Single-row evaluation of the next bridge at the chosen
                    // candidate action.
                    let row_data = d.select(&[i]);
                    let v = next_bridges.eval(
                        &row_data,
                        &next_key,
                        OwnFill::Observed,
                        CandidateFill::Fixed(chosen),
                    )?[0];
                    // Bridge values are transport functions, not value
                    // functions: their pointwise magnitude may exceed the
                    // remaining-reward range even in population, so the
                    // recursion uses them unclipped and the bound is only
                    // recorded as a diagnostic.
                    max_pseudo = max_pseudo.max(v.abs());
                    tv[i] = (d.steps[t - 1].r[i] + v) / scale;
                }
                targets_by_tuple.insert(tuple.clone(), tv);
            }
        }

        // Fit the stage bridges, sharing the factorization across tuples.
        let mut components: BTreeMap<Vec<usize>, BridgeFunction> = BTreeMap::new();
        match &backends.bridge {
            BridgeBackend::Minimax { kq, kg } => {
                let spec_q = match kq {
                    crate::bandit::KernelChoice::GaussianMedian { cap } => {
                        KernelSpec::gaussian(median_heuristic(&q_obs, *cap)?)?
                    }
                    crate::bandit::KernelChoice::GaussianFixed { bandwidth } => {
                        KernelSpec::gaussian(*bandwidth)?
                    }
                    crate::bandit::KernelChoice::Delta => KernelSpec::Delta,
                };
                let spec_g = match kg {
                    crate::bandit::KernelChoice::GaussianMedian { cap } => {
                        KernelSpec::gaussian(median_heuristic(&g_obs, *cap)?)?
                    }
                    crate::bandit::KernelChoice::GaussianFixed { bandwidth } => {
                        KernelSpec::gaussian(*bandwidth)?
                    }
                    crate::bandit::KernelChoice::Delta => KernelSpec::Delta,
                };
                // Cross-validate once, at the last stage.
                if t == horizon {
                    if let Some(cv) = &cfg.cv {
                        let problem = MomentProblem::new(
                            q_obs.clone(),
                            g_obs.clone(),
                            d.steps[t - 1].r.clone(),
                            layout.d_w,
                            layout.d_o0,
                        )?;
                        let chosen = cross_validate(
                            &problem,
                            &spec_q,
                            &spec_g,
                            cfg,
                            &cv.lambda_mu_grid,
                            &cv.mu_proj_grid,
                            cv.folds,
                        )?;
                        fit_cfg = cfg.with_lambda_mu(chosen.lambda_mu, d.n());
                        if !cv.mu_proj_grid.is_empty() {
                            fit_cfg.mu_proj = Some(chosen.mu_proj);
                        }
                    }
                }
                let factors = MinimaxFactors::new(&q_obs, &g_obs, &spec_q, &spec_g, &fit_cfg)?;
                for (tuple, targets) in &targets_by_tuple {
                    let mut coeffs = factors.solve(targets)?;
                    coeffs *= scale;
                    components.insert(
                        tuple.clone(),
                        BridgeFunction::KernelExpansion {
                            anchors: q_obs.clone(),
                            coefficients: coeffs,
                            spec: spec_q,
                            layout: stage_layout_names(layout),
                        },
                    );
                }
            }
            BridgeBackend::Tabular => {
                for (tuple, targets) in &targets_by_tuple {
                    let problem = MomentProblem::new(
                        q_obs.clone(),
                        g_obs.clone(),
                        targets.clone(),
                        layout.d_w,
                        layout.d_o0,
                    )?;
                    let fitted = fit_tabular_with_layout(&problem, stage_layout_names(layout))?;
                    let scaled = match fitted {
                        BridgeFunction::Tabular { mut table, layout } => {
                            table.values_mut().for_each(|v| *v *= scale);
                            BridgeFunction::Tabular { table, layout }
                        }
                        other => other,
                    };
                    components.insert(tuple.clone(), scaled);
                }
            }
        }
        let stage_bridges = StageBridges { layout: layout.clone(), components };

        // Projection step. Index tuples run over A^{t−1}: the policy's own
        // history at t = T (plugged into the bridge argument), the behavior
        // prefix below for the super class. The common class sees no
        // behavior actions below the last stage, so its bridge component is
        // selected by the episode's fully observed tuple and a single model
        // per candidate action remains.
        let pen = fit_cfg.resolve(d.n());
        let cond = if t == horizon {
            // Super: (o_{1:t}, a_{1:t}); common: (o_{1:t}) — the own history
            // is the enumerated index, not a conditioning column.
            if superseq {
                conditioning_matrix(d, t, true)
            } else {
                let d_obs: usize = d.steps[..t].iter().map(|s| s.o.ncols()).sum();
                conditioning_matrix(d, t, false).columns(0, d_obs).into_owned()
            }
        } else {
            // Super: (o_{1:t}, a_{1:t−1} own, a_t behavior);
            // common: (o_{1:t}, a_{1:t−1} own).
            conditioning_matrix(d, t, superseq)
        };
        let mut models: BTreeMap<(Vec<usize>, usize), ProjectionModel> = BTreeMap::new();
        let mut globals: BTreeMap<(Vec<usize>, usize), f64> = BTreeMap::new();
        let index_tuples = if t == horizon || superseq {
            tuples(d.n_actions, t - 1)
        } else {
            vec![Vec::new()]
        };
        for index in &index_tuples {
            for a in 0..d.n_actions {
                let targets = if t == horizon {
                    stage_bridges.eval(d, &[], OwnFill::Fixed(index), CandidateFill::Fixed(a))?
                } else {
                    // Component selected per episode: enumerated behavior
                    // prefix (super) or the observed own history (common),
                    // extended by the observed current action; the observed
                    // own history fills the argument slot either way.
                    let mut tv = DVector::zeros(d.n());
                    for i in 0..d.n() {
                        let mut key: Vec<usize> = if superseq {
                            index.clone()
                        } else {
                            (0..t - 1).map(|j| d.steps[j].a[i]).collect()
                        };
                        key.push(d.steps[t - 1].a[i]);
                        let row_data = d.select(&[i]);
                        tv[i] = stage_bridges.eval(
                            &row_data,
                            &key,
                            OwnFill::Observed,
                            CandidateFill::Fixed(a),
                        )?[0];
                    }
                    tv
                };
                let backend = match &backends.projection {
                    crate::bandit::ProjBackend::GroupMean => {
                        ProjectionBackend::KernelRidge { spec: KernelSpec::Delta, ridge: 1e-12 }
                    }
                    crate::bandit::ProjBackend::Linear => ProjectionBackend::Linear,
                    crate::bandit::ProjBackend::KernelRidge { kernel } => {
                        let spec = match kernel {
                            crate::bandit::KernelChoice::GaussianMedian { cap } => {
                                KernelSpec::gaussian(median_heuristic(&cond, *cap)?)?
                            }
                            crate::bandit::KernelChoice::GaussianFixed { bandwidth } => {
                                KernelSpec::gaussian(*bandwidth)?
                            }
                            crate::bandit::KernelChoice::Delta => KernelSpec::Delta,
                        };
                        ProjectionBackend::KernelRidge { spec, ridge: pen.mu_proj }
                    }
                };
                let model = fit_projection(&cond, &targets, &backend)?;
                globals.insert((index.clone(), a), targets.sum() / targets.nrows() as f64);
                models.insert((index.clone(), a), model);
            }
        }
        stages[t - 1] = Some(StagePolicy {
            t,
            horizon,
            superseq,
            n_actions: d.n_actions,
            models,
            globals,
        });
        stage_diag[t - 1] = StageDiagnostics {
            t,
            max_pseudo_outcome: max_pseudo,
            pseudo_outcome_bound: pseudo_bound,
            lambda_mu: pen.lambda * pen.mu,
        };
        bridges_by_stage[t - 1] = Some(stage_bridges);
    }

    let stage1 = Stage1Bridge::Tuples(bridges_by_stage[0].clone().expect("stage 1 fitted"));
    Ok(SequentialFit {
        policy: SequentialPolicy {
            kind,
            n_actions: d.n_actions,
            stages: stages.into_iter().map(|s| StageStrategy::Stage(s.expect("stage"))).collect(),
        },
        stage1,
        stage_bridges: bridges_by_stage.into_iter().map(|b| b.expect("stage bridges")).collect(),
        diagnostics: stage_diag,
    })
}

fn stage_layout_names(layout: &StageLayout) -> Vec<(String, usize)> {
    let mut names = vec![(format!("w{}", layout.t), layout.d_w)];
    for (j, w) in layout.d_o.iter().enumerate() {
        names.push((format!("o{}", j + 1), *w));
    }
    for j in 1..layout.t {
        names.push((format!("a{j}"), layout.action_width()));
    }
    names.push((format!("a{}", layout.t), layout.action_width()));
    names
}

/// Identified value of a sequential policy on evaluation episodes:
/// the mean of `q̂_1` at the episode's observed behavior tuple, evaluated at
/// the policy's stage-1 decision.
pub fn estimate_value_seq(
    policy: &SequentialPolicy,
    stage1: &Stage1Bridge,
    eval_data: &SequentialDataset,
) -> Result<f64, SequentialError> {
    match stage1 {
        Stage1Bridge::Single(bridge) => {
            let view = horizon1_bandit_view(eval_data);
            let mut chosen = Vec::with_capacity(view.n());
            for i in 0..view.n() {
                let obs: Vec<Vec<f64>> =
                    vec![(0..view.s.ncols()).map(|c| view.s[(i, c)]).collect()];
                chosen.push(policy.act_seq(1, &obs, &[], &[view.a[i]])?);
            }
            let vals = crate::bandit::estimate_value_rows(bridge, &view, &chosen)?;
            Ok(vals)
        }
        Stage1Bridge::Tuples(bridges) => {
            let n = eval_data.n();
            let mut total = 0.0;
            for i in 0..n {
                let obs: Vec<Vec<f64>> = vec![(0..eval_data.steps[0].o.ncols())
                    .map(|c| eval_data.steps[0].o[(i, c)])
                    .collect()];
                let a1 = eval_data.steps[0].a[i];
                let chosen = policy.act_seq(1, &obs, &[], &[a1])?;
                let row = eval_data.select(&[i]);
                total +=
                    bridges.eval(&row, &[a1], OwnFill::Observed, CandidateFill::Fixed(chosen))?[0];
            }
            Ok(total / n as f64)
        }
    }
}
