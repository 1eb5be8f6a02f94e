//! Moment and subspace estimation plus the relative-error metrics used to
//! compare generated and empirical estimates against ground truth.
//!
//! Covariances use the unbiased `1/(m-1)` normalization. The subspace metric
//! compares projector matrices, so it is invariant to the choice of
//! orthonormal basis within the recovered eigenspace.

use serde::{Deserialize, Serialize};

use crate::error::{DfmError, Result};
use crate::linalg::{fro_norm, norm2, sym_eigen, Mat};
use crate::panel::ReturnPanel;

/// Where a moment estimate came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    /// Estimated from observed data.
    RealEmp,
    /// Estimated from model-generated data.
    DiffEmp,
    /// Analytic ground truth.
    Oracle,
}

/// A `(mean, covariance)` pair with provenance.
#[derive(Clone, Debug)]
pub struct MomentEstimate {
    pub mean: Vec<f64>,
    pub cov: Mat,
    pub source: MomentSource,
    pub n_used: usize,
}

impl MomentEstimate {
    pub fn new(mean: Vec<f64>, cov: Mat, source: MomentSource, n_used: usize) -> Result<Self> {
        if cov.rows() != mean.len() || cov.cols() != mean.len() {
            return Err(DfmError::InvalidInput(
                "moment estimate dimension mismatch".into(),
            ));
        }
        if !cov.is_symmetric_within(1e-12) {
            return Err(DfmError::InvalidInput(
                "covariance must be symmetric".into(),
            ));
        }
        if (0..cov.rows()).any(|i| cov[(i, i)] < -1e-12) {
            return Err(DfmError::InvalidInput(
                "covariance diagonal must be nonnegative".into(),
            ));
        }
        Ok(MomentEstimate {
            mean,
            cov,
            source,
            n_used,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Analytic moments of a ground-truth factor model.
    pub fn oracle(spec: &crate::diffusion::FactorModelSpec) -> Self {
        MomentEstimate {
            mean: spec.mean_mu0(),
            cov: spec.covariance_sigma0(),
            source: MomentSource::Oracle,
            n_used: 0,
        }
    }
}

/// Top-k eigenvalues and an orthonormal basis of the leading eigenspace.
#[derive(Clone, Debug)]
pub struct SubspaceEstimate {
    pub eigenvalues: Vec<f64>,
    pub basis: Mat,
}

impl SubspaceEstimate {
    /// Projector `U U'` onto the recovered subspace.
    pub fn projector(&self) -> Mat {
        self.basis.matmul(&self.basis.transpose())
    }
}

/// Row mean and unbiased covariance of a panel.
pub fn sample_moments(panel: &ReturnPanel) -> Result<MomentEstimate> {
    sample_moments_tagged(panel, MomentSource::RealEmp)
}

/// Same as [`sample_moments`] with an explicit provenance tag.
pub fn sample_moments_tagged(
    panel: &ReturnPanel,
    source: MomentSource,
) -> Result<MomentEstimate> {
    let n = panel.n_rows();
    let d = panel.n_assets();
    if n < 2 {
        return Err(DfmError::InsufficientData(format!(
            "need at least 2 rows for moments, got {n}"
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(panel.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Mat::zeros(d, d);
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for (c, (&v, m)) in centered.iter_mut().zip(panel.row(i).iter().zip(&mean)) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            let row = cov.row_mut(a);
            for b in 0..d {
                row[b] += ca * centered[b];
            }
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    let cov = cov.scale(scale);
    MomentEstimate::new(mean, cov, source, n)
}

/// Leading `k`-dimensional eigenstructure of the estimate's covariance.
pub fn top_k_subspace(m: &MomentEstimate, k: usize) -> Result<SubspaceEstimate> {
    let d = m.dim();
    if k == 0 || k > d {
        return Err(DfmError::InvalidInput(format!(
            "k={k} out of range 1..={d}"
        )));
    }
    let eig = sym_eigen(&m.cov)?;
    let (eigenvalues, basis) = eig.top_k(k);
    Ok(SubspaceEstimate { eigenvalues, basis })
}

/// Mean absolute relative eigenvalue error: `(1/k) sum |est_i / true_i - 1|`.
pub fn re_eigen(est_vals: &[f64], true_vals: &[f64]) -> Result<f64> {
    if est_vals.len() != true_vals.len() || est_vals.is_empty() {
        return Err(DfmError::InvalidInput(
            "eigenvalue vectors must have equal nonzero length".into(),
        ));
    }
    if true_vals.contains(&0.0) {
        return Err(DfmError::DivisionDegenerate(
            "true eigenvalue is zero".into(),
        ));
    }
    let k = est_vals.len() as f64;
    Ok(est_vals
        .iter()
        .zip(true_vals)
        .map(|(e, t)| (e / t - 1.0).abs())
        .sum::<f64>()
        / k)
}

/// Relative Frobenius distance between the projectors spanned by two bases.
pub fn re_subspace(est_basis: &Mat, true_basis: &Mat) -> Result<f64> {
    if est_basis.rows() != true_basis.rows() || est_basis.cols() != true_basis.cols() {
        return Err(DfmError::InvalidInput(
            "subspace bases must have equal shape".into(),
        ));
    }
    let p_est = est_basis.matmul(&est_basis.transpose());
    let p_true = true_basis.matmul(&true_basis.transpose());
    let denom = fro_norm(&p_true);
    if denom == 0.0 {
        return Err(DfmError::DivisionDegenerate(
            "true projector has zero norm".into(),
        ));
    }
    Ok(fro_norm(&p_est.sub(&p_true)) / denom)
}

/// Relative l2 error of the mean.
pub fn re_mean(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(DfmError::InvalidInput("mean length mismatch".into()));
    }
    let denom = norm2(truth);
    if denom == 0.0 {
        return Err(DfmError::DivisionDegenerate("true mean is zero".into()));
    }
    let diff: Vec<f64> = est.iter().zip(truth).map(|(a, b)| a - b).collect();
    Ok(norm2(&diff) / denom)
}

/// Relative Frobenius error of the covariance.
pub fn re_cov(est: &Mat, truth: &Mat) -> Result<f64> {
    if est.rows() != truth.rows() || est.cols() != truth.cols() {
        return Err(DfmError::InvalidInput("covariance shape mismatch".into()));
    }
    let denom = fro_norm(truth);
    if denom == 0.0 {
        return Err(DfmError::DivisionDegenerate(
            "true covariance has zero norm".into(),
        ));
    }
    Ok(fro_norm(&est.sub(truth)) / denom)
}

/// Spectral gap `lambda_k - lambda_{k+1}` of the estimate's covariance
/// (1-indexed), which controls subspace recoverability.
pub fn eigen_gap(m: &MomentEstimate, k: usize) -> Result<f64> {
    let d = m.dim();
    if k == 0 || k >= d {
        return Err(DfmError::InvalidInput(format!(
            "eigen_gap needs 1 <= k < d, got k={k}, d={d}"
        )));
    }
    let eig = sym_eigen(&m.cov)?;
    Ok(eig.values[k - 1] - eig.values[k])
}
