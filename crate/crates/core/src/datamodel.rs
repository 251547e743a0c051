//! Shared data containers, configuration records and dataset ingestion.
//!
//! Datasets are immutable after construction; [`validate`] reports invariant
//! violations without mutating anything. Actions are consecutive integers
//! `0..K−1`; states and proxies are real matrices (discrete environments
//! encode levels as 0.0/1.0 columns).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("train_fraction must lie strictly inside (0, 1), got {0}")]
    BadFraction(f64),
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Which inputs a single-stage policy may look at.
///
/// `SOnly`/`SZ`/`Super` are the bandit classes (state; state + action proxy;
/// state + action proxy + recommended action). `Common`/`SuperSeq` are the
/// sequential classes (observations + own past actions, without/with the
/// behavior actions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyClassKind {
    SOnly,
    SZ,
    Super,
    Common,
    SuperSeq,
}

impl PolicyClassKind {
    pub fn is_sequential(&self) -> bool {
        matches!(self, PolicyClassKind::Common | PolicyClassKind::SuperSeq)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sonly" => Some(Self::SOnly),
            "sz" => Some(Self::SZ),
            "super" => Some(Self::Super),
            "common" => Some(Self::Common),
            "superseq" => Some(Self::SuperSeq),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SOnly => "sonly",
            Self::SZ => "sz",
            Self::Super => "super",
            Self::Common => "common",
            Self::SuperSeq => "superseq",
        }
    }
}

/// Offline single-stage data: state `s`, action proxy `z`, reward proxy `w`,
/// behavior action `a` and reward `r`, all with one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditDataset {
    pub s: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub a: Vec<usize>,
    pub r: DVector<f64>,
    pub n_actions: usize,
}

impl BanditDataset {
    pub fn n(&self) -> usize {
        self.a.len()
    }

    /// Keep only the given rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> BanditDataset {
        BanditDataset {
            s: self.s.select_rows(idx),
            z: self.z.select_rows(idx),
            w: self.w.select_rows(idx),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            r: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.r[i])),
            n_actions: self.n_actions,
        }
    }
}

/// One decision point of a sequential dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub o: DMatrix<f64>,
    pub a: Vec<usize>,
    pub r: DVector<f64>,
    pub w: DMatrix<f64>,
}

/// Offline episodic data: pre-collected observation `o0` plus per-step
/// blocks `(o_t, a_t, r_t, w_t)`, one row per episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialDataset {
    pub o0: DMatrix<f64>,
    pub steps: Vec<Step>,
    pub n_actions: usize,
    pub r_max: f64,
}

impl SequentialDataset {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn n(&self) -> usize {
        self.o0.nrows()
    }

    pub fn select(&self, idx: &[usize]) -> SequentialDataset {
        SequentialDataset {
            o0: self.o0.select_rows(idx),
            steps: self
                .steps
                .iter()
                .map(|st| Step {
                    o: st.o.select_rows(idx),
                    a: idx.iter().map(|&i| st.a[i]).collect(),
                    r: DVector::from_iterator(idx.len(), idx.iter().map(|&i| st.r[i])),
                    w: st.w.select_rows(idx),
                })
                .collect(),
            n_actions: self.n_actions,
            r_max: self.r_max,
        }
    }
}

/// Outcome of [`validate`]: empty issue list means the dataset is well formed.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<(), DataError> {
        if self.ok() {
            Ok(())
        } else {
            Err(DataError::Invalid(self.issues.join("; ")))
        }
    }
}

fn check_finite(name: &str, m: &DMatrix<f64>, issues: &mut Vec<String>) {
    if m.iter().any(|v| !v.is_finite()) {
        issues.push(format!("non-finite value in {name}"));
    }
}

/// Check every structural invariant of a bandit dataset.
pub fn validate_bandit(d: &BanditDataset) -> ValidationReport {
    let mut issues = Vec::new();
    let n = d.n();
    if n == 0 {
        issues.push("empty dataset".into());
    }
    for (name, rows) in [
        ("s", d.s.nrows()),
        ("z", d.z.nrows()),
        ("w", d.w.nrows()),
        ("r", d.r.nrows()),
    ] {
        if rows != n {
            issues.push(format!("column block {name} has {rows} rows, expected {n}"));
        }
    }
    if d.n_actions < 2 {
        issues.push(format!("need at least 2 actions, metadata declares {}", d.n_actions));
    }
    if let Some(&bad) = d.a.iter().find(|&&a| a >= d.n_actions) {
        issues.push(format!("action out of range: {bad} with K = {}", d.n_actions));
    }
    check_finite("s", &d.s, &mut issues);
    check_finite("z", &d.z, &mut issues);
    check_finite("w", &d.w, &mut issues);
    if d.r.iter().any(|v| !v.is_finite()) {
        issues.push("non-finite value in r".into());
    }
    ValidationReport { issues }
}

/// Check every structural invariant of a sequential dataset.
pub fn validate_sequential(d: &SequentialDataset) -> ValidationReport {
    let mut issues = Vec::new();
    let n = d.n();
    if n == 0 {
        issues.push("empty dataset".into());
    }
    if d.steps.is_empty() {
        issues.push("horizon must be at least 1".into());
    }
    if d.n_actions < 2 {
        issues.push(format!("need at least 2 actions, metadata declares {}", d.n_actions));
    }
    if !d.r_max.is_finite() || d.r_max <= 0.0 {
        issues.push(format!("declared reward bound must be positive, got {}", d.r_max));
    }
    check_finite("o0", &d.o0, &mut issues);
    for (t, st) in d.steps.iter().enumerate() {
        let t1 = t + 1;
        for (name, rows) in [("o", st.o.nrows()), ("r", st.r.nrows()), ("w", st.w.nrows())] {
            if rows != n {
                issues.push(format!("step {t1} block {name} has {rows} rows, expected {n}"));
            }
        }
        if st.a.len() != n {
            issues.push(format!("step {t1} block a has {} rows, expected {n}", st.a.len()));
        }
        if let Some(&bad) = st.a.iter().find(|&&a| a >= d.n_actions) {
            issues.push(format!("step {t1} action out of range: {bad} with K = {}", d.n_actions));
        }
        check_finite(&format!("o{t1}"), &st.o, &mut issues);
        check_finite(&format!("w{t1}"), &st.w, &mut issues);
        if st.r.iter().any(|v| !v.is_finite()) {
            issues.push(format!("non-finite value in r{t1}"));
        } else if st.r.iter().any(|v| v.abs() > d.r_max) {
            issues.push(format!("step {t1} reward exceeds declared bound {}", d.r_max));
        }
    }
    ValidationReport { issues }
}

/// Deterministic disjoint row partition. `|train| = round(train_fraction·n)`;
/// the same seed always produces the same split.
pub fn random_split_indices(
    n: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }
    if n < 2 {
        return Err(DataError::TooFewRows { needed: 2, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (train, eval) = idx.split_at(n_train);
    let mut train = train.to_vec();
    let mut eval = eval.to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

/// Split a bandit dataset into disjoint train/eval parts.
pub fn random_split(
    d: &BanditDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(BanditDataset, BanditDataset), DataError> {
    let (tr, ev) = random_split_indices(d.n(), train_fraction, seed)?;
    Ok((d.select(&tr), d.select(&ev)))
}

/// Split a sequential dataset into disjoint train/eval parts.
pub fn random_split_sequential(
    d: &SequentialDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(SequentialDataset, SequentialDataset), DataError> {
    let (tr, ev) = random_split_indices(d.n(), train_fraction, seed)?;
    Ok((d.select(&tr), d.select(&ev)))
}

/// Tuning parameters for the moment estimators. Unset penalties fall back to
/// sample-size-dependent defaults at fit time:
/// λ = n^{−1/2}, μ = 1, U = 1, Δ = n^{−1/4}, μ′ = n^{−1/2}.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Test-function RKHS penalty λ.
    pub lambda: Option<f64>,
    /// Bridge penalty factor μ (the bridge-norm coefficient is λ·μ).
    pub mu: Option<f64>,
    /// Test-function ball radius U.
    pub u: Option<f64>,
    /// Empirical-norm scale Δ (the empirical penalty coefficient is λ·U/Δ²).
    pub delta: Option<f64>,
    /// Projection ridge μ′.
    pub mu_proj: Option<f64>,
    /// Optional cross-validation of λ·μ and μ′.
    pub cv: Option<CvSpec>,
    pub seed: u64,
}

/// Cross-validation layout: fold count and penalty grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSpec {
    pub folds: usize,
    /// Candidate values for the bridge-norm coefficient λ·μ.
    #[serde(default)]
    pub lambda_mu_grid: Vec<f64>,
    /// Candidate values for the projection ridge μ′.
    #[serde(default)]
    pub mu_proj_grid: Vec<f64>,
}

/// Penalties with all defaults resolved for a concrete sample size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedPenalties {
    pub lambda: f64,
    pub mu: f64,
    pub u: f64,
    pub delta: f64,
    pub mu_proj: f64,
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("u", self.u),
            ("delta", self.delta),
            ("mu_proj", self.mu_proj),
        ] {
            if let Some(v) = v {
                if !v.is_finite() || v <= 0.0 {
                    return Err(DataError::Invalid(format!("penalty {name} must be positive, got {v}")));
                }
            }
        }
        if let Some(cv) = &self.cv {
            if cv.folds < 2 {
                return Err(DataError::Invalid(format!("cv folds must be ≥ 2, got {}", cv.folds)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, n: usize) -> ResolvedPenalties {
        let nf = n.max(1) as f64;
        ResolvedPenalties {
            lambda: self.lambda.unwrap_or(nf.powf(-0.5)),
            mu: self.mu.unwrap_or(1.0),
            u: self.u.unwrap_or(1.0),
            delta: self.delta.unwrap_or(nf.powf(-0.25)),
            mu_proj: self.mu_proj.unwrap_or(nf.powf(-0.5)),
        }
    }

    /// Copy of `self` with the bridge-norm coefficient λ·μ forced to `lm`
    /// (λ keeps its resolved value, μ absorbs the change).
    pub fn with_lambda_mu(&self, lm: f64, n: usize) -> EstimatorConfig {
        let resolved = self.resolve(n);
        let mut out = self.clone();
        out.lambda = Some(resolved.lambda);
        out.mu = Some(lm / resolved.lambda);
        out
    }
}

// ───────────────────────── file formats ─────────────────────────

/// Write a bandit dataset as delimited text with a header row
/// `s_0..,z_0..,w_0..,a,r`.
pub fn write_bandit_csv<W: Write>(d: &BanditDataset, out: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header: Vec<String> = Vec::new();
    for c in 0..d.s.ncols() {
        header.push(format!("s_{c}"));
    }
    for c in 0..d.z.ncols() {
        header.push(format!("z_{c}"));
    }
    for c in 0..d.w.ncols() {
        header.push(format!("w_{c}"));
    }
    header.push("a".into());
    header.push("r".into());
    wtr.write_record(&header)?;
    for i in 0..d.n() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for c in 0..d.s.ncols() {
            rec.push(format!("{}", d.s[(i, c)]));
        }
        for c in 0..d.z.ncols() {
            rec.push(format!("{}", d.z[(i, c)]));
        }
        for c in 0..d.w.ncols() {
            rec.push(format!("{}", d.w[(i, c)]));
        }
        rec.push(format!("{}", d.a[i]));
        rec.push(format!("{}", d.r[i]));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn prefix_width(headers: &[String], prefix: &str) -> usize {
    headers.iter().filter(|h| h.starts_with(prefix)).count()
}

/// Read a bandit dataset written by [`write_bandit_csv`]. `n_actions` is
/// taken as `1 + max(a)` unless a larger K is supplied.
pub fn read_bandit_csv<R: Read>(input: R, n_actions: Option<usize>) -> Result<BanditDataset, DataError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let ds = prefix_width(&headers, "s_");
    let dz = prefix_width(&headers, "z_");
    let dw = prefix_width(&headers, "w_");
    let expected = ds + dz + dw + 2;
    if headers.len() != expected || ds == 0 || dz == 0 || dw == 0 {
        return Err(DataError::Malformed(format!(
            "expected columns s_*, z_*, w_*, a, r; got header {:?}",
            headers.join(",")
        )));
    }
    let mut s = Vec::new();
    let mut z = Vec::new();
    let mut w = Vec::new();
    let mut a = Vec::new();
    let mut r = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != expected {
            return Err(DataError::Malformed(format!("row has {} fields, expected {expected}", rec.len())));
        }
        let parse = |s: &str| -> Result<f64, DataError> {
            s.parse::<f64>().map_err(|_| DataError::Malformed(format!("bad number {s:?}")))
        };
        for c in 0..ds {
            s.push(parse(&rec[c])?);
        }
        for c in 0..dz {
            z.push(parse(&rec[ds + c])?);
        }
        for c in 0..dw {
            w.push(parse(&rec[ds + dz + c])?);
        }
        let act: usize = rec[ds + dz + dw]
            .parse()
            .map_err(|_| DataError::Malformed(format!("bad action {:?}", &rec[ds + dz + dw])))?;
        a.push(act);
        r.push(parse(&rec[ds + dz + dw + 1])?);
    }
    let n = a.len();
    let k = n_actions.unwrap_or(0).max(a.iter().copied().max().map_or(0, |m| m + 1)).max(2);
    Ok(BanditDataset {
        s: DMatrix::from_row_slice(n, ds, &s),
        z: DMatrix::from_row_slice(n, dz, &z),
        w: DMatrix::from_row_slice(n, dw, &w),
        a,
        r: DVector::from_vec(r),
        n_actions: k,
    })
}

/// Write a sequential dataset: one row per episode, header
/// `o0_0..,o1_0..,a1,r1,w1_0..,o2_0..,a2,r2,w2_0..,…`.
pub fn write_sequential_csv<W: Write>(d: &SequentialDataset, out: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header: Vec<String> = Vec::new();
    for c in 0..d.o0.ncols() {
        header.push(format!("o0_{c}"));
    }
    for (t, st) in d.steps.iter().enumerate() {
        let t1 = t + 1;
        for c in 0..st.o.ncols() {
            header.push(format!("o{t1}_{c}"));
        }
        header.push(format!("a{t1}"));
        header.push(format!("r{t1}"));
        for c in 0..st.w.ncols() {
            header.push(format!("w{t1}_{c}"));
        }
    }
    wtr.write_record(&header)?;
    for i in 0..d.n() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for c in 0..d.o0.ncols() {
            rec.push(format!("{}", d.o0[(i, c)]));
        }
        for st in &d.steps {
            for c in 0..st.o.ncols() {
                rec.push(format!("{}", st.o[(i, c)]));
            }
            rec.push(format!("{}", st.a[i]));
            rec.push(format!("{}", st.r[i]));
            for c in 0..st.w.ncols() {
                rec.push(format!("{}", st.w[(i, c)]));
            }
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a sequential dataset written by [`write_sequential_csv`].
pub fn read_sequential_csv<R: Read>(
    input: R,
    n_actions: Option<usize>,
    r_max: Option<f64>,
) -> Result<SequentialDataset, DataError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let d0 = prefix_width(&headers, "o0_");
    if d0 == 0 {
        return Err(DataError::Malformed("missing o0_* columns".into()));
    }
    // Discover horizon and per-step widths from the header layout.
    let mut layout = Vec::new(); // (d_o, d_w) per step
    let mut pos = d0;
    let mut t = 1usize;
    while pos < headers.len() {
        let d_o = prefix_width(&headers, &format!("o{t}_"));
        if d_o == 0 {
            return Err(DataError::Malformed(format!("missing o{t}_* columns at field {pos}")));
        }
        let expect_a = format!("a{t}");
        let expect_r = format!("r{t}");
        if headers.get(pos + d_o) != Some(&expect_a) || headers.get(pos + d_o + 1) != Some(&expect_r) {
            return Err(DataError::Malformed(format!("expected {expect_a},{expect_r} after o{t} block")));
        }
        let d_w = prefix_width(&headers, &format!("w{t}_"));
        if d_w == 0 {
            return Err(DataError::Malformed(format!("missing w{t}_* columns")));
        }
        layout.push((d_o, d_w));
        pos += d_o + 2 + d_w;
        t += 1;
    }
    if layout.is_empty() {
        return Err(DataError::Malformed("no per-step blocks found".into()));
    }
    let mut o0 = Vec::new();
    let mut per_step: Vec<(Vec<f64>, Vec<usize>, Vec<f64>, Vec<f64>)> =
        layout.iter().map(|_| Default::default()).collect();
    let mut n = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(DataError::Malformed(format!(
                "row has {} fields, expected {}",
                rec.len(),
                headers.len()
            )));
        }
        let parse = |s: &str| -> Result<f64, DataError> {
            s.parse::<f64>().map_err(|_| DataError::Malformed(format!("bad number {s:?}")))
        };
        let mut pos = 0usize;
        for _ in 0..d0 {
            o0.push(parse(&rec[pos])?);
            pos += 1;
        }
        for (step, &(d_o, d_w)) in layout.iter().enumerate() {
            for _ in 0..d_o {
                per_step[step].0.push(parse(&rec[pos])?);
                pos += 1;
            }
            let act: usize = rec[pos]
                .parse()
                .map_err(|_| DataError::Malformed(format!("bad action {:?}", &rec[pos])))?;
            per_step[step].1.push(act);
            pos += 1;
            per_step[step].2.push(parse(&rec[pos])?);
            pos += 1;
            for _ in 0..d_w {
                per_step[step].3.push(parse(&rec[pos])?);
                pos += 1;
            }
        }
        n += 1;
    }
    let max_a = per_step
        .iter()
        .flat_map(|(_, a, _, _)| a.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    let max_r = per_step
        .iter()
        .flat_map(|(_, _, r, _)| r.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    let steps = layout
        .iter()
        .zip(per_step)
        .map(|(&(d_o, d_w), (o, a, r, w))| Step {
            o: DMatrix::from_row_slice(n, d_o, &o),
            a,
            r: DVector::from_vec(r),
            w: DMatrix::from_row_slice(n, d_w, &w),
        })
        .collect();
    Ok(SequentialDataset {
        o0: DMatrix::from_row_slice(n, d0, &o0),
        steps,
        n_actions: n_actions.unwrap_or(0).max(max_a).max(2),
        r_max: r_max.unwrap_or(if max_r > 0.0 { max_r } else { 1.0 }),
    })
}
