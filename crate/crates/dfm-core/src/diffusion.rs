//! Diffusion schedules, the latent factor model, its time-varying projection
//! geometry, and exact score oracles.
//!
//! The forward process is an Ornstein-Uhlenbeck flow with unit weight, so the
//! shrinkage ratio is `alpha(t) = exp(-t/2)` and the injected-noise variance
//! is `h(t) = 1 - alpha(t)^2`. Under the factor model `R = beta F + eps` with
//! diagonal residual covariance, the score of the noised data splits into a
//! k-dimensional nonlinear part driven by the factor posterior mean and a
//! linear complement. Both the split form and the rearranged single-expression
//! form are implemented and must agree to floating-point accuracy; Gaussian
//! factor laws additionally admit a closed-form oracle used for cross-checks.

use serde::{Deserialize, Serialize};

use crate::error::{DfmError, Result};
use crate::linalg::{dot, inv_spd, qr_orthonormalize, solve_spd_vec, Mat};
use crate::rng::keyed_rng;
use rand::Rng;
use rand_distr::StandardNormal;

/// Time horizon of the forward flow plus the early-stop time of the reverse
/// flow. The weight function is fixed to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    t_terminal: f64,
    t_early: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule {
            t_terminal: 5.0,
            t_early: 0.05,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(t_terminal: f64, t_early: f64) -> Result<Self> {
        if !(t_early > 0.0 && t_early < t_terminal && t_terminal.is_finite()) {
            return Err(DfmError::InvalidInput(format!(
                "schedule requires 0 < t_early < t_terminal, got t_early={t_early}, \
                 t_terminal={t_terminal}"
            )));
        }
        Ok(DiffusionSchedule {
            t_terminal,
            t_early,
        })
    }

    pub fn t_terminal(&self) -> f64 {
        self.t_terminal
    }

    pub fn t_early(&self) -> f64 {
        self.t_early
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t.is_finite() && (-1e-12..=self.t_terminal + 1e-12).contains(&t)) {
            return Err(DfmError::RangeError(format!(
                "time {t} outside [0, {}]",
                self.t_terminal
            )));
        }
        Ok(())
    }

    /// Shrinkage ratio `exp(-t/2)`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok((-0.5 * t).exp())
    }

    /// Noise variance `1 - alpha(t)^2`.
    pub fn h(&self, t: f64) -> Result<f64> {
        let a = self.alpha(t)?;
        Ok(1.0 - a * a)
    }

    /// Geometric grid of `n` times spanning `[t_early, t_terminal]`; covers
    /// both the near-data and near-noise regimes in property tests.
    pub fn geometric_grid(&self, n: usize) -> Vec<f64> {
        assert!(n >= 2);
        let (lo, hi) = (self.t_early.ln(), self.t_terminal.ln());
        (0..n)
            .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp())
            .collect()
    }
}

/// One mixture component of a factor law: weight, mean, diagonal covariance.
/// A zero covariance makes the component a point atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureAtom {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
}

/// Distribution of the latent factor vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum FactorLaw {
    Gaussian {
        mean: Vec<f64>,
        cov_diag: Vec<f64>,
    },
    FiniteMixture {
        atoms: Vec<MixtureAtom>,
    },
    PointMass {
        point: Vec<f64>,
    },
}

impl FactorLaw {
    pub fn dim(&self) -> usize {
        match self {
            FactorLaw::Gaussian { mean, .. } => mean.len(),
            FactorLaw::FiniteMixture { atoms } => {
                atoms.first().map_or(0, |a| a.mean.len())
            }
            FactorLaw::PointMass { point } => point.len(),
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        match self {
            FactorLaw::Gaussian { mean, cov_diag } => {
                if mean.len() != k || cov_diag.len() != k {
                    return Err(DfmError::InvalidInput(
                        "Gaussian factor law dimension mismatch".into(),
                    ));
                }
                if cov_diag.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
                    return Err(DfmError::InvalidInput(
                        "Gaussian factor covariance must be positive".into(),
                    ));
                }
            }
            FactorLaw::FiniteMixture { atoms } => {
                if atoms.is_empty() {
                    return Err(DfmError::InvalidInput("empty mixture".into()));
                }
                let wsum: f64 = atoms.iter().map(|a| a.weight).sum();
                if (wsum - 1.0).abs() > 1e-12 {
                    return Err(DfmError::InvalidInput(format!(
                        "mixture weights sum to {wsum}, expected 1"
                    )));
                }
                for a in atoms {
                    if a.weight < 0.0
                        || a.mean.len() != k
                        || a.cov_diag.len() != k
                        || a.cov_diag.iter().any(|&v| v < 0.0 || !v.is_finite())
                    {
                        return Err(DfmError::InvalidInput(
                            "bad mixture atom".into(),
                        ));
                    }
                }
            }
            FactorLaw::PointMass { point } => {
                if point.len() != k {
                    return Err(DfmError::InvalidInput(
                        "point-mass factor dimension mismatch".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// First moment of the factor.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            FactorLaw::Gaussian { mean, .. } => mean.clone(),
            FactorLaw::FiniteMixture { atoms } => {
                let k = self.dim();
                let mut m = vec![0.0; k];
                for a in atoms {
                    for (mi, &ai) in m.iter_mut().zip(&a.mean) {
                        *mi += a.weight * ai;
                    }
                }
                m
            }
            FactorLaw::PointMass { point } => point.clone(),
        }
    }

    /// Covariance matrix of the factor (full k x k; mixtures are not
    /// diagonal in general).
    pub fn covariance(&self) -> Mat {
        let k = self.dim();
        match self {
            FactorLaw::Gaussian { cov_diag, .. } => Mat::diag(cov_diag),
            FactorLaw::PointMass { .. } => Mat::zeros(k, k),
            FactorLaw::FiniteMixture { atoms } => {
                let mbar = self.mean();
                let mut cov = Mat::zeros(k, k);
                for a in atoms {
                    for i in 0..k {
                        cov[(i, i)] += a.weight * a.cov_diag[i];
                        for j in 0..k {
                            cov[(i, j)] += a.weight * a.mean[i] * a.mean[j];
                        }
                    }
                }
                for i in 0..k {
                    for j in 0..k {
                        cov[(i, j)] -= mbar[i] * mbar[j];
                    }
                }
                cov
            }
        }
    }
}

/// Ground-truth generator for synthetic experiments: loading matrix, factor
/// law, and descending residual standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorModelSpec {
    d: usize,
    k: usize,
    beta: Mat,
    factor_law: FactorLaw,
    sigma: Vec<f64>,
    sigma_max: f64,
    orthonormal_beta: bool,
}

impl FactorModelSpec {
    pub fn new(
        beta: Mat,
        factor_law: FactorLaw,
        sigma: Vec<f64>,
        sigma_max: f64,
        orthonormal_beta: bool,
    ) -> Result<Self> {
        let (d, k) = (beta.rows(), beta.cols());
        if k == 0 || k >= d {
            return Err(DfmError::InvalidInput(format!(
                "need 1 <= k < d, got k={k}, d={d}"
            )));
        }
        factor_law.validate(k)?;
        if sigma.len() != d {
            return Err(DfmError::InvalidInput(format!(
                "sigma has {} entries for d={d}",
                sigma.len()
            )));
        }
        for w in sigma.windows(2) {
            if w[0] < w[1] {
                return Err(DfmError::InvalidInput(
                    "sigma must be sorted descending".into(),
                ));
            }
        }
        if sigma.iter().any(|&s| s <= 0.0 || !s.is_finite()) || sigma[0] > sigma_max {
            return Err(DfmError::InvalidInput(
                "need 0 < sigma_i <= sigma_max for all i".into(),
            ));
        }
        if orthonormal_beta {
            let gram = beta.transpose().matmul(&beta);
            let err = crate::linalg::fro_norm(&gram.sub(&Mat::identity(k)));
            if err > 1e-10 {
                return Err(DfmError::InvalidInput(format!(
                    "orthonormal_beta set but |B'B - I| = {err:.3e}"
                )));
            }
        }
        Ok(FactorModelSpec {
            d,
            k,
            beta,
            factor_law,
            sigma,
            sigma_max,
            orthonormal_beta,
        })
    }

    /// Synthetic market generator: factor means uniform on (0, 0.1) with
    /// volatility 1.5x the mean, raw standard-normal loadings, and residual
    /// standard deviations uniform on (0, 0.4] sorted descending.
    pub fn sample_synthetic(d: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = keyed_rng(seed, &[0x5f5e_c0de]);
        let mu_f: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 0.1).collect();
        let cov_diag: Vec<f64> = mu_f.iter().map(|m| (1.5 * m).powi(2).max(1e-12)).collect();
        let beta = Mat::from_fn(d, k, |_, _| rng.sample(StandardNormal));
        let mut sigma: Vec<f64> = (0..d)
            .map(|_| (rng.random::<f64>() * 0.4).max(1e-6))
            .collect();
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        FactorModelSpec::new(
            beta,
            FactorLaw::Gaussian {
                mean: mu_f,
                cov_diag,
            },
            sigma,
            0.4,
            false,
        )
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn beta(&self) -> &Mat {
        &self.beta
    }

    pub fn factor_law(&self) -> &FactorLaw {
        &self.factor_law
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn has_orthonormal_beta(&self) -> bool {
        self.orthonormal_beta
    }

    /// Replace the loading matrix by an orthonormal basis of its column
    /// space (QR), setting the flag. The score decomposition machinery
    /// requires this convention; raw generators store unnormalized loadings.
    pub fn orthonormalized(&self) -> Result<Self> {
        if self.orthonormal_beta {
            return Ok(self.clone());
        }
        let q = qr_orthonormalize(&self.beta)?;
        FactorModelSpec::new(
            q,
            self.factor_law.clone(),
            self.sigma.clone(),
            self.sigma_max,
            true,
        )
    }

    /// Population mean of the returns: `beta * E[F]`.
    pub fn mean_mu0(&self) -> Vec<f64> {
        self.beta.matvec(&self.factor_law.mean())
    }

    /// Population covariance of the returns:
    /// `beta Cov(F) beta' + diag(sigma^2)`.
    pub fn covariance_sigma0(&self) -> Mat {
        let cov_f = self.factor_law.covariance();
        let mut s0 = self.beta.matmul(&cov_f).matmul(&self.beta.transpose());
        for i in 0..self.d {
            s0[(i, i)] += self.sigma[i] * self.sigma[i];
        }
        s0
    }
}

/// The time-t projection geometry of the factor model: the diagonal rescaling
/// `Lambda_t`, the k x k factor-space Gram inverse `Gamma_t`, and the
/// orthogonal projector onto the rescaled loading span.
#[derive(Clone, Debug)]
pub struct ProjectionBundle {
    lambda: Vec<f64>,
    gamma: Mat,
    proj: Mat,
    alpha: f64,
}

impl ProjectionBundle {
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn gamma(&self) -> &Mat {
        &self.gamma
    }

    pub fn proj(&self) -> &Mat {
        &self.proj
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Build `Lambda_t = diag(h + sigma_i^2 alpha^2)`,
/// `Gamma_t = (beta' Lambda^-1 beta)^-1`, and the projector
/// `T_t = Lambda^-1/2 beta Gamma beta' Lambda^-1/2`.
///
/// The loading matrix must already be orthonormal; orthonormalize the spec
/// first when it was generated raw.
pub fn projection_bundle(
    spec: &FactorModelSpec,
    sched: &DiffusionSchedule,
    t: f64,
) -> Result<ProjectionBundle> {
    if !spec.orthonormal_beta {
        return Err(DfmError::InvalidInput(
            "projection geometry requires orthonormal loadings; call \
             FactorModelSpec::orthonormalized first"
                .into(),
        ));
    }
    let alpha = sched.alpha(t)?;
    let h = sched.h(t)?;
    let lambda: Vec<f64> = spec
        .sigma
        .iter()
        .map(|s| h + s * s * alpha * alpha)
        .collect();
    if lambda.iter().any(|&l| l <= 0.0) {
        return Err(DfmError::SingularMatrix(
            "Lambda_t is singular (t = 0 with a zero residual deviation)".into(),
        ));
    }
    let beta = &spec.beta;
    // beta' Lambda^-1 beta, then invert the k x k Gram.
    let mut gram = Mat::zeros(spec.k, spec.k);
    for i in 0..spec.d {
        let li = 1.0 / lambda[i];
        let row = beta.row(i);
        for a in 0..spec.k {
            for b in 0..spec.k {
                gram[(a, b)] += row[a] * li * row[b];
            }
        }
    }
    let gamma = inv_spd(&gram)?;
    // B = Lambda^-1/2 beta; T = B Gamma B'.
    let b = Mat::from_fn(spec.d, spec.k, |i, j| beta[(i, j)] / lambda[i].sqrt());
    let proj = b.matmul(&gamma).matmul(&b.transpose());
    Ok(ProjectionBundle {
        lambda,
        gamma,
        proj,
        alpha,
    })
}

/// Posterior-mean oracle: maps the encoded observation `z` to `E[F | z]`
/// under the kernel implied by the time-t geometry.
pub trait XiEval {
    fn eval(&self, z: &[f64], gamma: &Mat, alpha: f64) -> Result<Vec<f64>>;
}

impl XiEval for FactorLaw {
    fn eval(&self, z: &[f64], gamma: &Mat, alpha: f64) -> Result<Vec<f64>> {
        factor_posterior_mean(self, gamma, alpha, z)
    }
}

/// Exact posterior mean of the factor given the rescaled observation
/// `z = beta' Lambda^-1 r`.
///
/// Writing `y = Gamma z`, the observation model is `y | f ~ N(alpha f, Gamma)`
/// with prior `p_fac`; the Gaussian law gives the conjugate closed form and a
/// finite mixture reduces to a kernel-weighted sum over its atoms. Log-kernel
/// weights are max-subtracted before exponentiation so large `|z|` cannot
/// underflow the denominator.
pub fn factor_posterior_mean(
    law: &FactorLaw,
    gamma: &Mat,
    alpha: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    let k = z.len();
    if gamma.rows() != k || gamma.cols() != k || law.dim() != k {
        return Err(DfmError::InvalidInput(
            "posterior mean dimension mismatch".into(),
        ));
    }
    let y = gamma.matvec(z);
    match law {
        FactorLaw::PointMass { point } => Ok(point.clone()),
        FactorLaw::Gaussian { mean, cov_diag } => {
            // xi = mu + alpha Sigma_F (alpha^2 Sigma_F + Gamma)^-1 (y - alpha mu)
            let mut s = gamma.clone();
            for i in 0..k {
                s[(i, i)] += alpha * alpha * cov_diag[i];
            }
            let resid: Vec<f64> = y
                .iter()
                .zip(mean)
                .map(|(yi, mi)| yi - alpha * mi)
                .collect();
            let x = solve_spd_vec(&s, &resid)?;
            Ok((0..k)
                .map(|i| mean[i] + alpha * cov_diag[i] * x[i])
                .collect())
        }
        FactorLaw::FiniteMixture { atoms } => {
            let mut log_w = Vec::with_capacity(atoms.len());
            let mut means = Vec::with_capacity(atoms.len());
            for atom in atoms {
                let mut s = gamma.clone();
                for i in 0..k {
                    s[(i, i)] += alpha * alpha * atom.cov_diag[i];
                }
                let s_inv = crate::linalg::solve_spd(&s, &Mat::identity(k))?;
                let resid: Vec<f64> = y
                    .iter()
                    .zip(&atom.mean)
                    .map(|(yi, mi)| yi - alpha * mi)
                    .collect();
                let sx = s_inv.matvec(&resid);
                let quad = dot(&resid, &sx);
                // log det via eigenvalues of the small SPD matrix.
                let det: f64 = crate::linalg::sym_eigen(&s)?
                    .values
                    .iter()
                    .map(|v| v.ln())
                    .sum();
                let lw = if atom.weight > 0.0 {
                    atom.weight.ln() - 0.5 * (quad + det)
                } else {
                    f64::NEG_INFINITY
                };
                log_w.push(lw);
                means.push(
                    (0..k)
                        .map(|i| atom.mean[i] + alpha * atom.cov_diag[i] * sx[i])
                        .collect::<Vec<f64>>(),
                );
            }
            let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(DfmError::NumericalUnderflow(
                    "all mixture kernel weights vanished".into(),
                ));
            }
            let mut denom = 0.0;
            let mut num = vec![0.0; k];
            for (lw, mean) in log_w.iter().zip(&means) {
                let w = (lw - m).exp();
                denom += w;
                for (ni, &mi) in num.iter_mut().zip(mean) {
                    *ni += w * mi;
                }
            }
            if denom <= 0.0 || !denom.is_finite() {
                return Err(DfmError::NumericalUnderflow(
                    "mixture kernel normalizer underflowed".into(),
                ));
            }
            Ok(num.into_iter().map(|v| v / denom).collect())
        }
    }
}

/// Score via the rearranged single expression:
/// `alpha Lambda^-1 beta xi(beta' Lambda^-1 r, t) - Lambda^-1 r`.
pub fn score_rearranged(
    spec: &FactorModelSpec,
    sched: &DiffusionSchedule,
    t: f64,
    r: &[f64],
    xi: &dyn XiEval,
) -> Result<Vec<f64>> {
    let bundle = projection_bundle(spec, sched, t)?;
    check_dim(spec, r)?;
    let lam_inv_r: Vec<f64> = r.iter().zip(bundle.lambda()).map(|(ri, l)| ri / l).collect();
    let z = spec.beta.tr_matvec(&lam_inv_r);
    let xi_val = xi.eval(&z, bundle.gamma(), bundle.alpha())?;
    let bxi = spec.beta.matvec(&xi_val);
    Ok((0..spec.d)
        .map(|i| bundle.alpha() * bxi[i] / bundle.lambda()[i] - lam_inv_r[i])
        .collect())
}

/// Score via the subspace/complement decomposition. The subspace part is
/// expressed through the same posterior-mean machinery as the rearranged
/// form, so the two routes agree to floating-point accuracy; tests enforce
/// agreement within 1e-10.
pub fn score_decomposed(
    spec: &FactorModelSpec,
    sched: &DiffusionSchedule,
    t: f64,
    r: &[f64],
    xi: &dyn XiEval,
) -> Result<Vec<f64>> {
    let bundle = projection_bundle(spec, sched, t)?;
    check_dim(spec, r)?;
    let lambda = bundle.lambda();
    let lam_inv_r: Vec<f64> = r.iter().zip(lambda).map(|(ri, l)| ri / l).collect();
    let z = spec.beta.tr_matvec(&lam_inv_r);
    let y = bundle.gamma().matvec(&z);
    let xi_val = xi.eval(&z, bundle.gamma(), bundle.alpha())?;

    // Subspace score: Lambda^-1 beta (alpha xi(z, t) - y).
    let inner: Vec<f64> = xi_val
        .iter()
        .zip(&y)
        .map(|(x, yi)| bundle.alpha() * x - yi)
        .collect();
    let b_inner = spec.beta.matvec(&inner);
    let s_sub: Vec<f64> = (0..spec.d).map(|i| b_inner[i] / lambda[i]).collect();

    // Complement score: -Lambda^-1/2 (I - T) Lambda^-1/2 r.
    let s_comp = complement_score(&bundle, r);

    Ok(s_sub.iter().zip(&s_comp).map(|(a, b)| a + b).collect())
}

/// The linear complement score `-Lambda^-1/2 (I - T_t) Lambda^-1/2 r`.
pub fn complement_score(bundle: &ProjectionBundle, r: &[f64]) -> Vec<f64> {
    let lambda = bundle.lambda();
    let scaled: Vec<f64> = r
        .iter()
        .zip(lambda)
        .map(|(ri, l)| ri / l.sqrt())
        .collect();
    let projected = bundle.proj().matvec(&scaled);
    (0..r.len())
        .map(|i| -(scaled[i] - projected[i]) / lambda[i].sqrt())
        .collect()
}

/// Closed-form score for Gaussian factor laws:
/// `-(alpha^2 Sigma0 + h I)^-1 (r - alpha mu0)`.
///
/// Valid for any loading matrix (orthonormality is not needed); used as the
/// independent oracle for the decomposition and for exact-score sampling.
pub fn gaussian_score_oracle(
    spec: &FactorModelSpec,
    sched: &DiffusionSchedule,
    t: f64,
    r: &[f64],
) -> Result<Vec<f64>> {
    if !matches!(spec.factor_law, FactorLaw::Gaussian { .. }) {
        return Err(DfmError::UnsupportedLaw(
            "gaussian_score_oracle requires a Gaussian factor law".into(),
        ));
    }
    check_dim(spec, r)?;
    let cov_t = marginal_covariance(spec, sched, t)?;
    let alpha = sched.alpha(t)?;
    let mu0 = spec.mean_mu0();
    let resid: Vec<f64> = r
        .iter()
        .zip(&mu0)
        .map(|(ri, mi)| ri - alpha * mi)
        .collect();
    let x = solve_spd_vec(&cov_t, &resid)?;
    Ok(x.into_iter().map(|v| -v).collect())
}

/// Covariance of the noised marginal: `alpha^2 Sigma0 + h I`.
pub fn marginal_covariance(
    spec: &FactorModelSpec,
    sched: &DiffusionSchedule,
    t: f64,
) -> Result<Mat> {
    let alpha = sched.alpha(t)?;
    let h = sched.h(t)?;
    let mut cov = spec.covariance_sigma0().scale(alpha * alpha);
    for i in 0..spec.d {
        cov[(i, i)] += h;
    }
    Ok(cov)
}

fn check_dim(spec: &FactorModelSpec, r: &[f64]) -> Result<()> {
    if r.len() != spec.d {
        return Err(DfmError::InvalidInput(format!(
            "return vector has {} entries for d={}",
            r.len(),
            spec.d
        )));
    }
    Ok(())
}
