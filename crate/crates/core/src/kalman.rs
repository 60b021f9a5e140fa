//! Kalman-filter reconstruction core.
//!
//! The posterior over the estimation space is a Gaussian kept entirely in
//! tilde coordinates: the affine constraints (unit trace, completeness sums)
//! are projected out once, so every matrix that has to be inverted during an
//! update is genuinely invertible. A measurement setting carries the linear
//! map from states to outcome means together with its own measurement-side
//! reduction; the update equations are the standard Kalman ones with the
//! covariance recursion in the addition form, which keeps the posterior
//! covariance positive definite instead of relying on cancellation.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::repr::{
    self, Complex64, ConstraintSubspaces, HermitianMatrix, ReprError, DEFAULT_RANK_TOL,
};
use crate::stats::{self, AcquisitionMode, MeasurementMoments, OutcomeRecord, StatsError};

#[derive(Debug, Error)]
pub enum KalmanError {
    #[error("POVM element {index} is not positive semidefinite (min eigenvalue {eigenvalue:.3e})")]
    ElementNotPsd { index: usize, eigenvalue: f64 },
    #[error("POVM element {index} exceeds the identity (max eigenvalue {eigenvalue:.6})")]
    ElementExceedsIdentity { index: usize, eigenvalue: f64 },
    #[error("dimension mismatch in {context}")]
    DimensionMismatch { context: &'static str },
    #[error("innovation matrix is numerically singular")]
    SingularInnovation,
    #[error("counted record with zero total provides no information and is rejected")]
    EmptyRecord,
    #[error("counted acquisition needs completeness bounds, which this setting lacks")]
    SumBoundsUnavailable,
    #[error("information matrix is rank deficient: the setting is not informationally complete")]
    RankDeficient,
    #[error("Gram matrix normalization failed: coefficient sum is numerically zero")]
    SingularGram,
    #[error("prior correction width {b_prime} is smaller than the recorded prior width {prior_b}")]
    InvalidPriorWidth { b_prime: f64, prior_b: f64 },
    #[error("prior cannot be divided out: corrected precision has eigenvalue {min_eigenvalue:.3e} <= 0")]
    NotCorrectable { min_eigenvalue: f64 },
    #[error(transparent)]
    Repr(#[from] ReprError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Gaussian posterior over the free (tilde) coordinates of the estimation
/// space.
#[derive(Debug, Clone)]
pub struct GaussianState {
    mu_tilde: DVector<Complex64>,
    sigma_tilde: DMatrix<Complex64>,
    constraints: Arc<ConstraintSubspaces>,
    prior_b: f64,
}

impl GaussianState {
    /// Rebuilds a state from stored parts (deserialization, restriction
    /// drivers). Validates shapes and approximate Hermiticity of the
    /// covariance; positive definiteness is the caller's responsibility.
    pub fn from_parts(
        mu_tilde: DVector<Complex64>,
        sigma_tilde: DMatrix<Complex64>,
        constraints: Arc<ConstraintSubspaces>,
        prior_b: f64,
    ) -> Result<Self, KalmanError> {
        let k = constraints.free_dim();
        if mu_tilde.len() != k || sigma_tilde.nrows() != k || sigma_tilde.ncols() != k {
            return Err(KalmanError::DimensionMismatch {
                context: "GaussianState::from_parts",
            });
        }
        if (&sigma_tilde - sigma_tilde.adjoint()).norm() > 1e-8 * (1.0 + sigma_tilde.norm()) {
            return Err(KalmanError::DimensionMismatch {
                context: "GaussianState::from_parts (covariance not Hermitian)",
            });
        }
        Ok(Self {
            mu_tilde,
            sigma_tilde: hermitized(&sigma_tilde),
            constraints,
            prior_b,
        })
    }

    pub fn mu_tilde(&self) -> &DVector<Complex64> {
        &self.mu_tilde
    }

    pub fn sigma_tilde(&self) -> &DMatrix<Complex64> {
        &self.sigma_tilde
    }

    pub fn constraints(&self) -> &Arc<ConstraintSubspaces> {
        &self.constraints
    }

    pub fn prior_b(&self) -> f64 {
        self.prior_b
    }

    /// Degrees of freedom of the posterior: the number of free coordinates.
    pub fn dof(&self) -> usize {
        self.constraints.free_dim()
    }

    /// Posterior mean in the ambient space: `x0 + X1 mu_tilde`.
    pub fn mean_vector(&self) -> DVector<Complex64> {
        self.constraints.from_tilde(&self.mu_tilde)
    }

    /// Posterior mean as a Hermitian matrix (state-space problems only).
    /// The anti-Hermitian part of the reconstructed matrix has no data
    /// support, so it is update-algebra round-off and is projected out;
    /// residuals beyond round-off scale still fail.
    pub fn mean_matrix(&self) -> Result<HermitianMatrix, ReprError> {
        let v = self.mean_vector();
        let m = repr::mat_vector(&v)?;
        let scale = m.iter().map(|z| z.norm()).fold(1.0_f64, f64::max);
        let mut max_dev = 0.0_f64;
        for i in 0..m.nrows() {
            for j in i..m.ncols() {
                max_dev = max_dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        if max_dev > 1e-8 * scale {
            return Err(ReprError::NotHermitian { max_dev });
        }
        HermitianMatrix::new(hermitized(&m))
    }

    /// Ambient-space covariance `X1 Sigma_tilde X1^*`.
    pub fn covariance_full(&self) -> DMatrix<Complex64> {
        let x1 = self.constraints.x1();
        x1 * &self.sigma_tilde * x1.adjoint()
    }

    /// Eigenvalues of the tilde covariance, descending.
    pub fn covariance_spectrum(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self
            .sigma_tilde
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ev
    }
}

/// A measurement setting: its element family (when it comes from a POVM),
/// the Born map `H`, and the measurement-side constraint reduction.
#[derive(Debug, Clone)]
pub struct MeasurementSetting {
    povm: Vec<HermitianMatrix>,
    h: DMatrix<Complex64>,
    h_free: DMatrix<Complex64>,
    h_tilde: DMatrix<Complex64>,
    z1: DMatrix<Complex64>,
    z0: DVector<Complex64>,
    sum_bounds: Option<(f64, f64)>,
    scalar_complete: bool,
    constraints: Arc<ConstraintSubspaces>,
}

impl MeasurementSetting {
    /// Builds a setting from POVM elements: row `j` of `H` is the adjoint of
    /// `vec(Pi_j)`, so `H vec(rho) = (Tr[rho Pi_j])_j`. The extremal
    /// eigenvalues of the element sum decide the measurement-side reduction.
    pub fn from_povm(
        povm: Vec<HermitianMatrix>,
        constraints: &Arc<ConstraintSubspaces>,
    ) -> Result<Self, KalmanError> {
        if povm.is_empty() {
            return Err(KalmanError::DimensionMismatch {
                context: "from_povm (empty element list)",
            });
        }
        let hilbert_dim = povm[0].dim();
        if hilbert_dim * hilbert_dim != constraints.dim() {
            return Err(KalmanError::DimensionMismatch {
                context: "from_povm (element dimension vs constraints)",
            });
        }
        let d = povm.len();
        let mut sum = DMatrix::<Complex64>::zeros(hilbert_dim, hilbert_dim);
        for (index, element) in povm.iter().enumerate() {
            if element.dim() != hilbert_dim {
                return Err(KalmanError::DimensionMismatch {
                    context: "from_povm (inconsistent element dimensions)",
                });
            }
            let ev = element.eigenvalues();
            let min = ev[0];
            let max = ev[ev.len() - 1];
            if min < -1e-10 {
                return Err(KalmanError::ElementNotPsd {
                    index,
                    eigenvalue: min,
                });
            }
            if max > 1.0 + 1e-10 {
                return Err(KalmanError::ElementExceedsIdentity {
                    index,
                    eigenvalue: max,
                });
            }
            sum += element.as_matrix();
        }
        let mut h = DMatrix::<Complex64>::zeros(d, constraints.dim());
        for (j, element) in povm.iter().enumerate() {
            let row = repr::vec(element).into_vector();
            for (col, value) in row.iter().enumerate() {
                h[(j, col)] = value.conj();
            }
        }
        let sum_herm = HermitianMatrix::new(sum).expect("sum of Hermitian elements is Hermitian");
        let ev = sum_herm.eigenvalues();
        let bounds = (ev[0], ev[ev.len() - 1]);
        Self::assemble(povm, h, Some(bounds), constraints)
    }

    /// Builds a setting from an explicit outcome map `H` (rows map an
    /// ambient point to outcome means). Scalar completeness is detected from
    /// whether the outcome sum is constant on the constraint subspace.
    pub fn from_matrix(
        h: DMatrix<Complex64>,
        constraints: &Arc<ConstraintSubspaces>,
    ) -> Result<Self, KalmanError> {
        if h.ncols() != constraints.dim() {
            return Err(KalmanError::DimensionMismatch {
                context: "from_matrix (columns vs constraints)",
            });
        }
        let ones = DVector::from_element(h.nrows(), Complex64::new(1.0, 0.0));
        let sum_functional = h.adjoint() * &ones;
        let residual = (constraints.x1().adjoint() * &sum_functional).norm();
        let bounds = if residual <= 1e-9 * (1.0 + h.norm()) {
            let total = (ones.adjoint() * &h * constraints.x0())[(0, 0)].re;
            Some((total, total))
        } else {
            None
        };
        Self::assemble(Vec::new(), h, bounds, constraints)
    }

    fn assemble(
        povm: Vec<HermitianMatrix>,
        h: DMatrix<Complex64>,
        sum_bounds: Option<(f64, f64)>,
        constraints: &Arc<ConstraintSubspaces>,
    ) -> Result<Self, KalmanError> {
        let d = h.nrows();
        let scalar_complete = match sum_bounds {
            Some((m, big_m)) => (big_m - m).abs() <= 1e-9 * big_m.abs().max(1.0),
            None => false,
        };
        let z1 = if scalar_complete {
            repr::dft_isometry(d)
        } else {
            DMatrix::identity(d, d)
        };
        let h_free = &h * constraints.x1();
        let h_tilde = z1.adjoint() * &h_free;
        let z0 = &h * constraints.x0();
        Ok(Self {
            povm,
            h,
            h_free,
            h_tilde,
            z1,
            z0,
            sum_bounds,
            scalar_complete,
            constraints: Arc::clone(constraints),
        })
    }

    pub fn outcomes(&self) -> usize {
        self.h.nrows()
    }

    pub fn povm(&self) -> &[HermitianMatrix] {
        &self.povm
    }

    pub fn h(&self) -> &DMatrix<Complex64> {
        &self.h
    }

    pub fn h_tilde(&self) -> &DMatrix<Complex64> {
        &self.h_tilde
    }

    pub fn z0(&self) -> &DVector<Complex64> {
        &self.z0
    }

    pub fn z1(&self) -> &DMatrix<Complex64> {
        &self.z1
    }

    /// Measurement-side projector `T_Z = Z1 Z1^*`.
    pub fn t_z(&self) -> DMatrix<Complex64> {
        &self.z1 * self.z1.adjoint()
    }

    /// Extremal eigenvalues `(m, M)` of the element sum, when known.
    pub fn sum_bounds(&self) -> Option<(f64, f64)> {
        self.sum_bounds
    }

    pub fn is_scalar_complete(&self) -> bool {
        self.scalar_complete
    }

    pub fn constraints(&self) -> &Arc<ConstraintSubspaces> {
        &self.constraints
    }

    /// Measurement-side reduction for a given record: a pulsed record has an
    /// exact outcome-sum constraint even when the element family is not
    /// scalar-complete, so its reduction may differ from the setting default.
    fn reduction_for(&self, mode: AcquisitionMode) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
        let needs_sum_reduction = self.scalar_complete || matches!(mode, AcquisitionMode::Pulsed { .. });
        if needs_sum_reduction && !self.scalar_complete {
            let z1 = repr::dft_isometry(self.outcomes());
            let h_tilde = z1.adjoint() * &self.h_free;
            (z1, h_tilde)
        } else {
            (self.z1.clone(), self.h_tilde.clone())
        }
    }

    /// Converts a record into reduced measurement quantities
    /// `(z_tilde, theta_tilde, h_tilde)`.
    fn reduced_moments(
        &self,
        rec: &OutcomeRecord,
    ) -> Result<(DVector<Complex64>, DMatrix<Complex64>, DMatrix<Complex64>), KalmanError> {
        if rec.dim() != self.outcomes() {
            return Err(KalmanError::DimensionMismatch {
                context: "record length vs setting outcomes",
            });
        }
        let mm = match rec.mode() {
            AcquisitionMode::Pulsed { .. } => stats::dirichlet_moments(rec),
            AcquisitionMode::Cw => {
                if rec.total() == 0 {
                    return Err(KalmanError::EmptyRecord);
                }
                let (m, big_m) = self.sum_bounds.ok_or(KalmanError::SumBoundsUnavailable)?;
                if self.scalar_complete {
                    stats::cw_moments(rec.counts(), big_m)?
                } else {
                    stats::nonpovm_moments(rec.counts(), m, big_m)?
                }
            }
        };
        let (z1, h_tilde) = self.reduction_for(rec.mode());
        let (z_tilde, theta_tilde) = self.reduce_explicit(&mm, &z1);
        Ok((z_tilde, theta_tilde, h_tilde))
    }

    fn reduce_explicit(
        &self,
        mm: &MeasurementMoments,
        z1: &DMatrix<Complex64>,
    ) -> (DVector<Complex64>, DMatrix<Complex64>) {
        let z = mm.mean.map(|x| Complex64::new(x, 0.0));
        let theta = mm.covariance.map(|x| Complex64::new(x, 0.0));
        let z_tilde = z1.adjoint() * (z - &self.z0);
        let theta_tilde = z1.adjoint() * theta * z1;
        (z_tilde, hermitized(&theta_tilde))
    }
}

/// Builds a measurement setting from POVM elements.
pub fn build_setting(
    povm: Vec<HermitianMatrix>,
    constraints: &Arc<ConstraintSubspaces>,
) -> Result<MeasurementSetting, KalmanError> {
    MeasurementSetting::from_povm(povm, constraints)
}

/// The flat Gaussian prior: mean at the reference point, covariance `b I` in
/// tilde coordinates (equivalently `b T_X` in the ambient space).
pub fn init_prior(constraints: &Arc<ConstraintSubspaces>, b: f64) -> GaussianState {
    assert!(b > 0.0, "prior width must be positive");
    let k = constraints.free_dim();
    GaussianState {
        mu_tilde: DVector::zeros(k),
        sigma_tilde: DMatrix::identity(k, k).map(|z: Complex64| z * b),
        constraints: Arc::clone(constraints),
        prior_b: b,
    }
}

fn hermitized(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (m + m.adjoint()).map(|z| z * 0.5)
}

fn effectively_real_m(m: &DMatrix<Complex64>) -> bool {
    let imag = m.iter().map(|z| z.im * z.im).sum::<f64>().sqrt();
    imag <= 1e-9 * (1.0 + m.norm())
}

fn effectively_real_v(v: &DVector<Complex64>) -> bool {
    let imag = v.iter().map(|z| z.im * z.im).sum::<f64>().sqrt();
    imag <= 1e-9 * (1.0 + v.norm())
}

/// A setting whose Born map and constraint data carry no imaginary content
/// describes a real posterior: the reduction isometry is the only complex
/// ingredient of the update and cancels exactly, so any imaginary part left
/// on the updated moments is round-off. Projecting it out keeps long
/// measurement sequences from accumulating imaginary dirt.
fn realified_for_real_problem(
    before: &GaussianState,
    setting: &MeasurementSetting,
    updated: GaussianState,
) -> GaussianState {
    let cs = &before.constraints;
    let real_problem = effectively_real_m(&setting.h)
        && effectively_real_m(cs.x1())
        && effectively_real_v(cs.x0())
        && effectively_real_v(&before.mu_tilde)
        && effectively_real_m(&before.sigma_tilde);
    if !real_problem {
        return updated;
    }
    GaussianState {
        mu_tilde: updated.mu_tilde.map(|z| Complex64::new(z.re, 0.0)),
        sigma_tilde: updated.sigma_tilde.map(|z| Complex64::new(z.re, 0.0)),
        constraints: updated.constraints,
        prior_b: updated.prior_b,
    }
}

/// Cholesky with a single jitter retry; the jitter is `1e-12 tr(S)/k`.
fn hpd_cholesky(m: &DMatrix<Complex64>) -> Result<Cholesky<Complex64, Dyn>, KalmanError> {
    let sym = hermitized(m);
    if let Some(ch) = Cholesky::new(sym.clone()) {
        return Ok(ch);
    }
    let k = sym.nrows().max(1);
    let jitter = 1e-12 * sym.trace().re.abs().max(1e-300) / k as f64;
    let bumped = sym + DMatrix::<Complex64>::identity(k, k).map(|z: Complex64| z * jitter);
    Cholesky::new(bumped).ok_or(KalmanError::SingularInnovation)
}

fn hpd_inverse(m: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>, KalmanError> {
    Ok(hpd_cholesky(m)?.inverse())
}

/// One Kalman update with explicitly supplied measurement moments.
///
/// The gain uses the innovation form; the covariance uses the addition form
/// `(Sigma^{-1} + H^* Theta^{-1} H)^{-1}` whenever the reduced measurement
/// covariance is invertible, falling back to the subtraction form otherwise
/// (dummy measurements with degenerate covariance need this).
pub fn kalman_update_with_moments(
    state: &GaussianState,
    setting: &MeasurementSetting,
    mm: &MeasurementMoments,
    mode: AcquisitionMode,
) -> Result<GaussianState, KalmanError> {
    if state.constraints.free_dim() != setting.constraints.free_dim()
        || state.constraints.dim() != setting.constraints.dim()
    {
        return Err(KalmanError::DimensionMismatch {
            context: "state constraints vs setting constraints",
        });
    }
    if mm.mean.len() != setting.outcomes() {
        return Err(KalmanError::DimensionMismatch {
            context: "moment length vs setting outcomes",
        });
    }
    let (z1, h_tilde) = setting.reduction_for(mode);
    let (z_tilde, theta_tilde) = setting.reduce_explicit(mm, &z1);
    let updated = apply_update(state, &h_tilde, &z_tilde, &theta_tilde)?;
    Ok(realified_for_real_problem(state, setting, updated))
}

/// One Kalman update from an outcome record. Moments are chosen by the
/// acquisition mode: pulsed records use the Dirichlet moments directly,
/// counted records use the completeness-scaled variants.
pub fn kalman_update(
    state: &GaussianState,
    setting: &MeasurementSetting,
    rec: &OutcomeRecord,
) -> Result<GaussianState, KalmanError> {
    if state.constraints.free_dim() != setting.constraints.free_dim()
        || state.constraints.dim() != setting.constraints.dim()
    {
        return Err(KalmanError::DimensionMismatch {
            context: "state constraints vs setting constraints",
        });
    }
    let (z_tilde, theta_tilde, h_tilde) = setting.reduced_moments(rec)?;
    let updated = apply_update(state, &h_tilde, &z_tilde, &theta_tilde)?;
    Ok(realified_for_real_problem(state, setting, updated))
}

fn apply_update(
    state: &GaussianState,
    h_tilde: &DMatrix<Complex64>,
    z_tilde: &DVector<Complex64>,
    theta_tilde: &DMatrix<Complex64>,
) -> Result<GaussianState, KalmanError> {
    let k_z = h_tilde.nrows();
    if k_z == 0 {
        // The measurement has no free directions; nothing to learn.
        return Ok(state.clone());
    }
    let sigma = &state.sigma_tilde;
    let innovation = h_tilde * sigma * h_tilde.adjoint() + theta_tilde;
    let innovation_chol = hpd_cholesky(&innovation)?;
    let gain = sigma * h_tilde.adjoint() * innovation_chol.inverse();
    let mu = &state.mu_tilde + &gain * (z_tilde - h_tilde * &state.mu_tilde);

    let sigma_new = match Cholesky::new(hermitized(theta_tilde)) {
        Some(theta_chol) => {
            let sigma_inv = hpd_inverse(sigma)?;
            let precision = sigma_inv + h_tilde.adjoint() * theta_chol.inverse() * h_tilde;
            hpd_inverse(&precision)?
        }
        None => {
            let subtracted = sigma - &gain * h_tilde * sigma;
            hermitized(&subtracted)
        }
    };

    Ok(GaussianState {
        mu_tilde: mu,
        sigma_tilde: sigma_new,
        constraints: Arc::clone(&state.constraints),
        prior_b: state.prior_b,
    })
}

/// The update in full (untilded) coordinates using the constraint
/// projectors and a Moore-Penrose innovation inverse. Kept as a
/// cross-check implementation; the tilde form is the production path.
pub fn kalman_update_projector_form(
    mean: &DVector<Complex64>,
    covariance: &DMatrix<Complex64>,
    setting: &MeasurementSetting,
    rec: &OutcomeRecord,
) -> Result<(DVector<Complex64>, DMatrix<Complex64>), KalmanError> {
    if rec.dim() != setting.outcomes() {
        return Err(KalmanError::DimensionMismatch {
            context: "record length vs setting outcomes",
        });
    }
    let mm = match rec.mode() {
        AcquisitionMode::Pulsed { .. } => stats::dirichlet_moments(rec),
        AcquisitionMode::Cw => {
            if rec.total() == 0 {
                return Err(KalmanError::EmptyRecord);
            }
            let (m, big_m) = setting.sum_bounds.ok_or(KalmanError::SumBoundsUnavailable)?;
            if setting.scalar_complete {
                stats::cw_moments(rec.counts(), big_m)?
            } else {
                stats::nonpovm_moments(rec.counts(), m, big_m)?
            }
        }
    };
    let z = mm.mean.map(|x| Complex64::new(x, 0.0));
    let theta = mm.covariance.map(|x| Complex64::new(x, 0.0));
    let (z1, _) = setting.reduction_for(rec.mode());
    let t_z = &z1 * z1.adjoint();
    let t_x = setting.constraints.t_x();
    let x0 = setting.constraints.x0();
    let h = &setting.h;

    let y = &t_z * (z - h * mean);
    let s = &t_z * (h * covariance * h.adjoint() + theta) * &t_z;
    let gain = covariance * h.adjoint() * repr::mp_inverse(&s, DEFAULT_RANK_TOL);
    let mean_new = t_x * (mean - x0 + &gain * y) + x0;
    let cov_new = t_x * (covariance - &gain * h * covariance) * t_x;
    Ok((mean_new, hermitized(&cov_new)))
}

/// Divides a finite prior of width `prior_b` back out of the posterior,
/// widening it to an effective prior `b_prime` (equal widths remove the
/// prior entirely).
///
/// `Sigma_corr = (Sigma^{-1} - I/b')^{-1}`,
/// `mu_corr = mu + (Sigma_corr / b') (mu - mu0_tilde)`.
pub fn correct_prior(
    state: &GaussianState,
    b_prime: f64,
    mu0_tilde: Option<&DVector<Complex64>>,
) -> Result<GaussianState, KalmanError> {
    if b_prime < state.prior_b {
        return Err(KalmanError::InvalidPriorWidth {
            b_prime,
            prior_b: state.prior_b,
        });
    }
    let k = state.dof();
    let sigma_inv = hpd_inverse(&state.sigma_tilde)?;
    let precision =
        &sigma_inv - DMatrix::<Complex64>::identity(k, k).map(|z: Complex64| z / b_prime);
    let precision = hermitized(&precision);
    let min_eigenvalue = precision
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    if min_eigenvalue <= 0.0 {
        return Err(KalmanError::NotCorrectable { min_eigenvalue });
    }
    let sigma_corr = hpd_inverse(&precision)?;
    let centered = match mu0_tilde {
        Some(mu0) => &state.mu_tilde - mu0,
        None => state.mu_tilde.clone(),
    };
    let mu_corr = &state.mu_tilde + (&sigma_corr * centered).map(|z| z / b_prime);
    // Effective remaining prior width: 1/b_eff = 1/b - 1/b'.
    let inv_remaining = 1.0 / state.prior_b - 1.0 / b_prime;
    let prior_b = if inv_remaining <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / inv_remaining
    };
    Ok(GaussianState {
        mu_tilde: mu_corr,
        sigma_tilde: sigma_corr,
        constraints: Arc::clone(&state.constraints),
        prior_b,
    })
}

/// The prior width `b'` that caps the corrected variance at `sigma2_max`:
/// `1/b - 1/b' = 1/sigma2_max`.
pub fn widen_for_variance_cap(prior_b: f64, sigma2_max: f64) -> Result<f64, KalmanError> {
    if sigma2_max <= prior_b {
        return Err(KalmanError::InvalidPriorWidth {
            b_prime: sigma2_max,
            prior_b,
        });
    }
    Ok(1.0 / (1.0 / prior_b - 1.0 / sigma2_max))
}

/// Infinite-prior posterior from a single informationally complete setting:
/// `Sigma = (H^* Theta^{-1} H)^{-1}`, `mu = Sigma H^* Theta^{-1} z` in tilde
/// coordinates. No prior enters, so no correction step is needed.
pub fn single_shot_posterior(
    setting: &MeasurementSetting,
    rec: &OutcomeRecord,
) -> Result<GaussianState, KalmanError> {
    let (z_tilde, theta_tilde, h_tilde) = setting.reduced_moments(rec)?;
    let k_x = setting.constraints.free_dim();
    if h_tilde.nrows() < k_x {
        return Err(KalmanError::RankDeficient);
    }
    let theta_inv = hpd_inverse(&theta_tilde)?;
    let info = hermitized(&(h_tilde.adjoint() * &theta_inv * &h_tilde));
    let info_chol = Cholesky::new(info).ok_or(KalmanError::RankDeficient)?;
    let sigma = info_chol.inverse();
    let mu = &sigma * (h_tilde.adjoint() * theta_inv * z_tilde);
    Ok(GaussianState {
        mu_tilde: mu,
        sigma_tilde: hermitized(&sigma),
        constraints: Arc::clone(&setting.constraints),
        prior_b: f64::INFINITY,
    })
}

/// Least-squares baseline over an over-complete projector family:
/// `rho = sum_j c_j P_j / sum_j c_j` with `c` the minimum-norm solution of
/// `min || f - G c ||` and `G_{ij} = Tr[P_i P_j]`.
pub fn least_squares_baseline(
    projectors: &[HermitianMatrix],
    frequencies: &[f64],
) -> Result<HermitianMatrix, KalmanError> {
    if projectors.is_empty() || projectors.len() != frequencies.len() {
        return Err(KalmanError::DimensionMismatch {
            context: "least_squares_baseline (projector/frequency lengths)",
        });
    }
    let d = projectors.len();
    let gram = DMatrix::<Complex64>::from_fn(d, d, |i, j| {
        let prod = projectors[i].as_matrix() * projectors[j].as_matrix();
        Complex64::new(prod.trace().re, 0.0)
    });
    let f = DVector::from_iterator(d, frequencies.iter().map(|&x| Complex64::new(x, 0.0)));
    let coeffs = repr::mp_inverse(&gram, DEFAULT_RANK_TOL) * f;
    let total: Complex64 = coeffs.iter().sum();
    let scale: f64 = coeffs.iter().map(|c| c.norm()).sum::<f64>().max(1e-300);
    if total.norm() <= 1e-12 * scale {
        return Err(KalmanError::SingularGram);
    }
    let dim = projectors[0].dim();
    let mut rho = DMatrix::<Complex64>::zeros(dim, dim);
    for (c, p) in coeffs.iter().zip(projectors) {
        rho += p.as_matrix().map(|z| z * (c / total));
    }
    Ok(HermitianMatrix::new(rho)?)
}
