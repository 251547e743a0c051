//! Kernel machinery for the RKHS estimators: Gaussian kernel with
//! median-heuristic bandwidth, exact indicator (delta) kernel for discrete
//! spaces, Gram/cross-Gram computation and feature standardization.
//!
//! Conventions fixed here (the source material leaves them open):
//! - Gaussian kernel `k(x, y) = exp(−‖x−y‖² / (2h²))` with `h` the median
//!   pairwise Euclidean distance of the input block.
//! - The median is taken over at most `cap` deterministically strided rows,
//!   zero distances excluded; even-length lists average the middle pair.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("degenerate point cloud: all pairwise distances are zero")]
    DegeneratePointCloud,
    #[error("dimension mismatch: {left} vs {right} columns")]
    DimensionMismatch { left: usize, right: usize },
    #[error("bandwidth must be finite and positive, got {0}")]
    InvalidBandwidth(f64),
}

/// A reproducing kernel on row vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// `exp(−‖x−y‖² / (2h²))`.
    Gaussian { bandwidth: f64 },
    /// Exact match on rows: 1 if equal, 0 otherwise.
    Delta,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self, KernelError> {
        if !bandwidth.is_finite() || bandwidth <= 0.0 {
            return Err(KernelError::InvalidBandwidth(bandwidth));
        }
        Ok(KernelSpec::Gaussian { bandwidth })
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            KernelSpec::Gaussian { bandwidth } => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::Delta => {
                if x.iter().zip(y).all(|(a, b)| a == b) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Median pairwise Euclidean distance over at most `cap` strided rows.
///
/// Zero distances are excluded so repeated points do not drag the bandwidth
/// to zero. Errors if every pair coincides.
pub fn median_heuristic(points: &DMatrix<f64>, cap: usize) -> Result<f64, KernelError> {
    let n = points.nrows();
    if n < 2 {
        return Err(KernelError::TooFewRows { needed: 2, got: n });
    }
    if cap < 2 {
        return Err(KernelError::TooFewRows { needed: 2, got: cap });
    }
    let m = n.min(cap);
    // Deterministic stride: row floor(i·n/m) for i = 0..m.
    let rows: Vec<usize> = (0..m).map(|i| i * n / m).collect();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for (ii, &i) in rows.iter().enumerate() {
        for &j in rows.iter().skip(ii + 1) {
            let mut sq = 0.0;
            for c in 0..points.ncols() {
                let d = points[(i, c)] - points[(j, c)];
                sq += d * d;
            }
            if sq > 0.0 {
                dists.push(sq.sqrt());
            }
        }
    }
    if dists.is_empty() {
        return Err(KernelError::DegeneratePointCloud);
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = dists.len();
    let median = if k % 2 == 1 {
        dists[k / 2]
    } else {
        0.5 * (dists[k / 2 - 1] + dists[k / 2])
    };
    Ok(median)
}

/// Cross-Gram matrix: entry (i, j) = k(x_i, y_j).
pub fn gram(x: &DMatrix<f64>, y: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>, KernelError> {
    if x.ncols() != y.ncols() {
        return Err(KernelError::DimensionMismatch { left: x.ncols(), right: y.ncols() });
    }
    let (nx, ny, d) = (x.nrows(), y.nrows(), x.ncols());
    let mut out = DMatrix::zeros(nx, ny);
    let mut row_x = vec![0.0; d];
    let mut row_y = vec![0.0; d];
    for i in 0..nx {
        for c in 0..d {
            row_x[c] = x[(i, c)];
        }
        for j in 0..ny {
            for c in 0..d {
                row_y[c] = y[(j, c)];
            }
            out[(i, j)] = spec.eval(&row_x, &row_y);
        }
    }
    Ok(out)
}

/// Symmetric Gram matrix of `x` with itself, exploiting symmetry.
pub fn gram_sym(x: &DMatrix<f64>, spec: &KernelSpec) -> DMatrix<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let mut out = DMatrix::zeros(n, n);
    let mut row_i = vec![0.0; d];
    let mut row_j = vec![0.0; d];
    for i in 0..n {
        for c in 0..d {
            row_i[c] = x[(i, c)];
        }
        out[(i, i)] = spec.eval(&row_i, &row_i);
        for j in (i + 1)..n {
            for c in 0..d {
                row_j[c] = x[(j, c)];
            }
            let v = spec.eval(&row_i, &row_j);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// A validated symmetric Gram matrix together with its generating kernel.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub matrix: DMatrix<f64>,
    pub spec: KernelSpec,
}

impl GramMatrix {
    pub fn new(anchors: &DMatrix<f64>, spec: KernelSpec) -> Self {
        GramMatrix { matrix: gram_sym(anchors, &spec), spec }
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    /// Check the structural invariants: symmetry to 1e−12, unit diagonal for
    /// Gaussian kernels, and positive semidefiniteness (smallest eigenvalue
    /// ≥ −1e−8 after symmetrization). O(n³); meant for tests and selfcheck.
    pub fn validate(&self) -> Result<(), String> {
        let m = &self.matrix;
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                    return Err(format!("asymmetric at ({i},{j})"));
                }
            }
        }
        if let KernelSpec::Gaussian { .. } = self.spec {
            for i in 0..m.nrows() {
                if (m[(i, i)] - 1.0).abs() > 1e-12 {
                    return Err(format!("diagonal entry {i} is {}", m[(i, i)]));
                }
            }
        }
        let min_eig = crate::linalg::min_symmetric_eigenvalue(m);
        if min_eig < -1e-8 {
            return Err(format!("not PSD: smallest eigenvalue {min_eig:.3e}"));
        }
        Ok(())
    }
}

/// Per-column affine normalization fitted on a training block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    /// Fit on `m` (needs ≥ 2 rows): each column gets sample mean 0 and sample
    /// standard deviation 1; constant columns are centered with scale 1.
    pub fn fit(m: &DMatrix<f64>) -> Result<Self, KernelError> {
        let n = m.nrows();
        if n < 2 {
            return Err(KernelError::TooFewRows { needed: 2, got: n });
        }
        let mut means = Vec::with_capacity(m.ncols());
        let mut scales = Vec::with_capacity(m.ncols());
        for c in 0..m.ncols() {
            let col = m.column(c);
            let mean = col.sum() / n as f64;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            let sd = (ss / (n as f64 - 1.0)).sqrt();
            means.push(mean);
            scales.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Ok(Standardizer { means, scales })
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                out[(r, c)] = (m[(r, c)] - self.means[c]) / self.scales[c];
            }
        }
        out
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                out[(r, c)] = m[(r, c)] * self.scales[c] + self.means[c];
            }
        }
        out
    }
}

/// Standardize a matrix, returning the transformed copy and the fitted map.
pub fn standardize(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Standardizer), KernelError> {
    let s = Standardizer::fit(m)?;
    Ok((s.apply(m), s))
}

/// Convenience: column vector view of a matrix product `G · coeffs`.
pub fn expansion_values(g: &DMatrix<f64>, coeffs: &DVector<f64>) -> DVector<f64> {
    g * coeffs
}
