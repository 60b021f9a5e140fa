//! Confidence-region geometry for the Gaussian posterior: squared
//! Mahalanobis distances in tilde coordinates, chi-square thresholds,
//! physical-region bounds, and operator error bars.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::kalman::GaussianState;
use crate::repr::{self, Complex64, HermitianMatrix};
use crate::stats;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("point lies off the constraint subspace (residual {residual:.3e}); its distance is infinite")]
    OffSubspace { residual: f64 },
    #[error("posterior covariance is numerically singular")]
    SingularCovariance,
    #[error("dimension mismatch in {context}")]
    DimensionMismatch { context: &'static str },
}

/// Summary of a confidence-region membership test.
#[derive(Debug, Clone)]
pub struct ConfidenceReport {
    /// Squared Mahalanobis distance of the tested point.
    pub m2: f64,
    /// Degrees of freedom (free dimension of the estimation space).
    pub nu: usize,
    /// Region threshold for the requested confidence level.
    pub gamma: f64,
    /// Whether `m2 <= gamma`.
    pub inside: bool,
    /// Threshold for the physical region: `(sqrt(gamma) + m_ml)^2` when the
    /// maximum-likelihood distance is known, `4 gamma` as the generic bound.
    pub gamma_phys: f64,
}

/// Squared Mahalanobis distance of a tilde-space point to the posterior.
pub fn mahalanobis_sq_tilde(
    state: &GaussianState,
    x_tilde: &DVector<Complex64>,
) -> Result<f64, ConfidenceError> {
    if x_tilde.len() != state.dof() {
        return Err(ConfidenceError::DimensionMismatch {
            context: "mahalanobis_sq_tilde",
        });
    }
    let diff = x_tilde - state.mu_tilde();
    let chol = Cholesky::new(hermitized(state.sigma_tilde()))
        .ok_or(ConfidenceError::SingularCovariance)?;
    let solved = chol.solve(&diff);
    Ok(diff.dotc(&solved).re.max(0.0))
}

/// Squared Mahalanobis distance of an ambient-space point. The point must
/// satisfy the exact constraints; otherwise its distance is infinite and the
/// call fails with `OffSubspace`.
pub fn mahalanobis_sq_ambient(
    state: &GaussianState,
    x: &DVector<Complex64>,
) -> Result<f64, ConfidenceError> {
    let cs = state.constraints();
    if x.len() != cs.dim() {
        return Err(ConfidenceError::DimensionMismatch {
            context: "mahalanobis_sq_ambient",
        });
    }
    let residual = cs.off_subspace_residual(x);
    if residual > 1e-8 {
        return Err(ConfidenceError::OffSubspace { residual });
    }
    mahalanobis_sq_tilde(state, &cs.to_tilde(x))
}

/// Squared Mahalanobis distance of a density matrix to the posterior.
pub fn mahalanobis_sq(
    state: &GaussianState,
    rho: &HermitianMatrix,
) -> Result<f64, ConfidenceError> {
    if rho.dim() * rho.dim() != state.constraints().dim() {
        return Err(ConfidenceError::DimensionMismatch {
            context: "mahalanobis_sq",
        });
    }
    mahalanobis_sq_ambient(state, &repr::vec(rho).into_vector())
}

/// Physical-region threshold from the unconstrained threshold and the
/// distance of the maximum-likelihood point: `(sqrt(gamma) + m_ml)^2`.
/// Without `m_ml` the generic doubling bound `4 gamma` applies.
pub fn gamma_phys(gamma: f64, m_ml: Option<f64>) -> f64 {
    match m_ml {
        Some(m) => (gamma.sqrt() + m).powi(2),
        None => 4.0 * gamma,
    }
}

/// Builds a membership report from an already-computed distance.
pub fn report_from_m2(m2: f64, nu: usize, conservative: bool, m_ml: Option<f64>) -> ConfidenceReport {
    let gamma = stats::gamma_nu(nu as u32, conservative);
    ConfidenceReport {
        m2,
        nu,
        gamma,
        inside: m2 <= gamma,
        gamma_phys: gamma_phys(gamma, m_ml),
    }
}

/// Tests whether `rho` lies in the 95% confidence region of the posterior.
pub fn confidence_report(
    state: &GaussianState,
    rho: &HermitianMatrix,
    conservative: bool,
    m_ml: Option<f64>,
) -> Result<ConfidenceReport, ConfidenceError> {
    let m2 = mahalanobis_sq(state, rho)?;
    Ok(report_from_m2(m2, state.dof(), conservative, m_ml))
}

/// Posterior mean and standard deviation of the expectation value of a
/// Hermitian observable: mean `Tr[mat(mu) op]`, variance `v* Sigma v` with
/// `v = X1^* vec(op)`.
pub fn operator_error_bar(state: &GaussianState, op: &HermitianMatrix) -> (f64, f64) {
    let cs = state.constraints();
    assert_eq!(
        op.dim() * op.dim(),
        cs.dim(),
        "observable dimension must match the estimation space"
    );
    let v = repr::vec(op).into_vector();
    let mean = v.dotc(&state.mean_vector()).re;
    let v_tilde = cs.x1().adjoint() * v;
    let variance = v_tilde.dotc(&(state.sigma_tilde() * &v_tilde)).re;
    (mean, variance.max(0.0).sqrt())
}

/// Marginal standard deviations `sqrt(Sigma_ii)` of the ambient coordinates.
pub fn marginal_stddevs(state: &GaussianState) -> DVector<f64> {
    let full = state.covariance_full();
    DVector::from_iterator(full.nrows(), (0..full.nrows()).map(|i| full[(i, i)].re.max(0.0).sqrt()))
}

/// Eigenvalues of the tilde covariance, descending.
pub fn covariance_spectrum(state: &GaussianState) -> Vec<f64> {
    state.covariance_spectrum()
}

fn hermitized(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (m + m.adjoint()).map(|z| z * 0.5)
}
