//! Restriction of the Gaussian posterior to the physical set.
//!
//! Two routes are provided. `maxlik_state` finds the physical point closest
//! to the posterior mean in the Mahalanobis metric (a convex projection, via
//! accelerated projected gradient). The `restrict_*` drivers instead deform
//! the whole Gaussian: each one-dimensional marginal that places too much
//! probability mass outside the physical half-line is replaced by its best
//! approximating normal with a fixed 5% outside mass, and the replacement is
//! backprojected onto the joint distribution through a rank-one Kalman
//! update. Sweeping over directions repeats until every checked marginal
//! keeps its confidence interval essentially inside the physical set.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::confidence::{self, ConfidenceError};
use crate::kalman::GaussianState;
use crate::repr::{self, Complex64, ConstraintSubspaces, HermitianMatrix, ReprError};
use crate::special;

#[derive(Debug, Error)]
pub enum RestrictError {
    #[error("truncated-normal discriminant is negative ({discriminant:.3e}); inputs out of range")]
    NegativeDiscriminant { discriminant: f64 },
    #[error("marginal variance {variance:.3e} is too small to restrict")]
    DegenerateMarginal { variance: f64 },
    #[error("projection algorithm did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("physical set kind does not match this operation")]
    WrongPhysicalSet,
    #[error("dimension mismatch in {context}")]
    DimensionMismatch { context: &'static str },
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

/// A half-line constraint `offset + Re<functional, x_tilde> >= 0` on the
/// free coordinates.
#[derive(Debug, Clone)]
pub struct OrthantDirection {
    pub functional: DVector<Complex64>,
    pub offset: f64,
}

impl OrthantDirection {
    /// Lifts an ambient-space functional `a` (constraint `Re a^* x >= 0`)
    /// into the free coordinates.
    pub fn from_ambient(a: &DVector<Complex64>, cs: &ConstraintSubspaces) -> Self {
        Self {
            functional: cs.x1().adjoint() * a,
            offset: a.dotc(cs.x0()).re,
        }
    }

    /// Marginal mean and variance of this direction under the posterior.
    pub fn marginal(&self, state: &GaussianState) -> (f64, f64) {
        let mean = self.offset + self.functional.dotc(state.mu_tilde()).re;
        let variance = self
            .functional
            .dotc(&(state.sigma_tilde() * &self.functional))
            .re
            .max(0.0);
        (mean, variance)
    }
}

#[derive(Debug, Clone)]
pub enum PhysicalKind {
    /// Intersection of half-lines. `coordinates` marks the special case
    /// where the directions are exactly the ambient coordinate functionals,
    /// enabling a much faster exact projection.
    Orthant {
        directions: Vec<OrthantDirection>,
        coordinates: bool,
    },
    /// Density matrices: positive semidefinite with unit trace.
    PsdTraceOne { dim: usize },
}

/// The physical set together with the restriction tuning parameters.
#[derive(Debug, Clone)]
pub struct PhysicalSetSpec {
    pub kind: PhysicalKind,
    /// Stopping tolerance: convergence when `min mu/sigma >= (1-eps) alpha0`.
    pub epsilon: f64,
    /// Probability mass allowed outside the physical half-line (one-sided).
    pub alpha: f64,
}

impl PhysicalSetSpec {
    pub fn orthant(directions: Vec<OrthantDirection>) -> Self {
        Self {
            kind: PhysicalKind::Orthant {
                directions,
                coordinates: false,
            },
            epsilon: 0.003,
            alpha: 0.05,
        }
    }

    /// Orthant over every ambient coordinate (diagonal element families).
    pub fn orthant_coordinates(cs: &ConstraintSubspaces) -> Self {
        let n = cs.dim();
        let directions = (0..n)
            .map(|i| {
                let mut a = DVector::zeros(n);
                a[i] = Complex64::new(1.0, 0.0);
                OrthantDirection::from_ambient(&a, cs)
            })
            .collect();
        Self {
            kind: PhysicalKind::Orthant {
                directions,
                coordinates: true,
            },
            epsilon: 0.003,
            alpha: 0.05,
        }
    }

    pub fn psd_trace_one(dim: usize) -> Self {
        Self {
            kind: PhysicalKind::PsdTraceOne { dim },
            epsilon: 0.003,
            alpha: 0.05,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Threshold ratio: a marginal with `mu/sigma >= alpha0` already keeps
    /// the allowed mass inside the physical half-line. For the default
    /// `alpha = 0.05` this is approximately 1.64485.
    pub fn alpha0(&self) -> f64 {
        std::f64::consts::SQRT_2 * special::inv_erf(1.0 - 2.0 * self.alpha)
    }
}

/// Order in which violated marginals are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    FixedOrder,
    SmallestFirst,
}

/// Outcome of a restriction run.
#[derive(Debug, Clone)]
pub struct RestrictionResult {
    /// The restricted Gaussian.
    pub state: GaussianState,
    /// Squared Mahalanobis distance of the closest physical point.
    pub m2_ml: f64,
    /// Closest physical point, ambient coordinates.
    pub x_ml: DVector<Complex64>,
    /// Closest physical point as a density matrix (state problems only).
    pub rho_ml: Option<HermitianMatrix>,
    /// Number of rank-one restriction steps applied.
    pub iterations: usize,
    /// Whether the stopping criterion `min mu/sigma >= (1-eps) alpha0` held
    /// over the directions checked last.
    pub converged: bool,
}

/// Solution of the physical projection problem.
#[derive(Debug, Clone)]
pub struct MaxLikSolution {
    pub x_tilde: DVector<Complex64>,
    pub x_ambient: DVector<Complex64>,
    pub rho: Option<HermitianMatrix>,
    pub m2: f64,
    pub iterations: usize,
    /// Norm of the projected-gradient fixed-point residual at the solution.
    pub optimality_residual: f64,
}

/// Best normal approximation, with exactly the allowed mass `alpha` below
/// zero, to a normal `(mu, sigma)` truncated to the positive half-line.
///
/// Writing `t = -mu/sigma`, the optimum is
/// `sigma_t = sigma (-alpha0 g + sqrt(alpha0^2 g^2 - 2c))` with
/// `c = t tau - (1+t^2)/2`, `g = tau - t/2`,
/// `tau = exp(-t^2/2)/[sqrt(2 pi) erfc(t/sqrt(2))]`, and `mu_t = alpha0
/// sigma_t` pins the tail mass.
pub fn truncated_normal_approx(
    mu: f64,
    sigma: f64,
    alpha0: f64,
) -> Result<(f64, f64), RestrictError> {
    if !(sigma > 0.0) {
        return Err(RestrictError::DegenerateMarginal {
            variance: sigma * sigma,
        });
    }
    let t = -mu / sigma;
    let tau = gaussian_hazard_half(t);
    let c = t * tau - (1.0 + t * t) / 2.0;
    let g = tau - t / 2.0;
    let discriminant = alpha0 * alpha0 * g * g - 2.0 * c;
    if !(discriminant >= 0.0) {
        return Err(RestrictError::NegativeDiscriminant { discriminant });
    }
    // Truncation cannot widen: past the t = -alpha0 boundary the formula
    // exceeds sigma by round-off only, so clamp.
    let sigma_t = (sigma * (-alpha0 * g + discriminant.sqrt())).min(sigma);
    Ok((alpha0 * sigma_t, sigma_t))
}

/// `exp(-t^2/2) / [sqrt(2 pi) erfc(t/sqrt(2))]`, switching to the asymptotic
/// continued series for large `t` where both factors underflow.
fn gaussian_hazard_half(t: f64) -> f64 {
    if t <= 6.0 {
        let phi = (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        phi / special::erfc(t / std::f64::consts::SQRT_2)
    } else {
        // erfc(t/sqrt 2) ~ exp(-t^2/2) sqrt(2/pi)/t * S(t) with
        // S = sum (-1)^k (2k-1)!!/t^{2k}; truncate at the smallest term.
        let mut s = 1.0;
        let mut term = 1.0;
        let t2 = t * t;
        let mut k = 0.0;
        loop {
            let next = term * (2.0 * k + 1.0) / t2;
            if next >= term.abs() {
                break;
            }
            term = next;
            k += 1.0;
            let signed = if (k as u64) % 2 == 1 { -term } else { term };
            s += signed;
            if term < 1e-17 {
                break;
            }
        }
        t / (2.0 * s)
    }
}

/// Enforces the truncated-normal marginal of one direction through a
/// rank-one Kalman update. The measurement parameters are
/// `kappa = 1 - sigma_t^2/Sigma_hh`, `Theta = (1/kappa - 1) Sigma_hh`,
/// `z = [mu_t - (1-kappa) mu_h]/kappa`; afterwards the direction's marginal
/// has exactly the truncated-normal moments.
pub fn marginal_restriction_step(
    state: &GaussianState,
    dir: &OrthantDirection,
    alpha0: f64,
) -> Result<GaussianState, RestrictError> {
    let (mu_h, var_h) = dir.marginal(state);
    if var_h <= 1e-14 {
        return Err(RestrictError::DegenerateMarginal { variance: var_h });
    }
    let sigma_h = var_h.sqrt();
    let (mu_t, sigma_t) = truncated_normal_approx(mu_h, sigma_h, alpha0)?;
    let kappa = 1.0 - (sigma_t * sigma_t) / var_h;
    if kappa < 1e-12 {
        // No truncation needed; the implied measurement carries no
        // information.
        return Ok(state.clone());
    }
    let theta = (1.0 / kappa - 1.0) * var_h;
    let z = (mu_t - (1.0 - kappa) * mu_h) / kappa;
    let sa = state.sigma_tilde() * &dir.functional;
    let gain = sa.map(|v| v / (var_h + theta));
    let mu_new = state.mu_tilde() + gain.map(|v| v * (z - mu_h));
    let sigma_new = state.sigma_tilde() - (&sa * sa.adjoint()).map(|v| v / (var_h + theta));
    Ok(GaussianState::from_parts(
        mu_new,
        hermitized(&sigma_new),
        Arc::clone(state.constraints()),
        state.prior_b(),
    )
    .expect("restriction step preserves shape"))
}

fn hermitized(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (m + m.adjoint()).map(|z| z * 0.5)
}

/// Restricts the posterior to a finite orthant, sweeping over the
/// directions until `min_i mu_i/sigma_i >= (1 - eps) alpha0` or the sweep
/// budget runs out (soft failure: `converged = false`).
pub fn restrict_orthant(
    state: &GaussianState,
    spec: &PhysicalSetSpec,
    schedule: Schedule,
) -> Result<RestrictionResult, RestrictError> {
    let PhysicalKind::Orthant { directions, .. } = &spec.kind else {
        return Err(RestrictError::WrongPhysicalSet);
    };
    let ml = maxlik_state(state, spec)?;
    let alpha0 = spec.alpha0();
    let target = (1.0 - spec.epsilon) * alpha0;
    let usable: Vec<&OrthantDirection> = directions
        .iter()
        .filter(|d| d.functional.norm_squared() > 1e-14)
        .collect();
    let mut current = state.clone();
    let mut steps = 0usize;
    let mut converged = false;
    const MAX_SWEEPS: usize = 200;
    for _ in 0..MAX_SWEEPS {
        let worst = usable
            .iter()
            .map(|d| ratio(&current, d))
            .fold(f64::INFINITY, f64::min);
        if worst >= target {
            converged = true;
            break;
        }
        match schedule {
            Schedule::FixedOrder => {
                for dir in &usable {
                    if ratio(&current, dir) < alpha0 {
                        current = marginal_restriction_step(&current, dir, alpha0)?;
                        steps += 1;
                    }
                }
            }
            Schedule::SmallestFirst => {
                for _ in 0..usable.len() {
                    let (dir, r) = usable
                        .iter()
                        .map(|d| (*d, ratio(&current, d)))
                        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                        .expect("nonempty directions");
                    if r >= alpha0 {
                        break;
                    }
                    current = marginal_restriction_step(&current, dir, alpha0)?;
                    steps += 1;
                }
            }
        }
    }
    Ok(RestrictionResult {
        state: current,
        m2_ml: ml.m2,
        x_ml: ml.x_ambient,
        rho_ml: ml.rho,
        iterations: steps,
        converged,
    })
}

fn ratio(state: &GaussianState, dir: &OrthantDirection) -> f64 {
    let (mu, var) = dir.marginal(state);
    if var <= 1e-300 {
        return f64::INFINITY;
    }
    mu / var.sqrt()
}

/// Restricts a state-space posterior to the density matrices through the
/// double iteration: inner sweeps over the diagonal directions of
/// `U rho U^*`, outer passes drawing a fresh Haar-random `U` (replaced by
/// the unitary diagonalizing the current mean every fifth pass, where the
/// stopping statistic is also evaluated).
pub fn restrict_psd(
    state: &GaussianState,
    spec: &PhysicalSetSpec,
    rng_seed: u64,
) -> Result<RestrictionResult, RestrictError> {
    let PhysicalKind::PsdTraceOne { dim } = spec.kind else {
        return Err(RestrictError::WrongPhysicalSet);
    };
    if dim * dim != state.constraints().dim() {
        return Err(RestrictError::DimensionMismatch {
            context: "restrict_psd (dim^2 vs ambient dimension)",
        });
    }
    let ml = maxlik_state(state, spec)?;
    let alpha0 = spec.alpha0();
    let target = (1.0 - spec.epsilon) * alpha0;
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let cs = state.constraints();
    let mut current = state.clone();
    let mut steps = 0usize;
    let mut converged = false;
    let mut best_metric = f64::NEG_INFINITY;
    const MAX_OUTER: usize = 500;
    const IMPROVEMENT_TOL: f64 = 1e-4;
    for pass in 0..MAX_OUTER {
        let diagonalizing = pass % 5 == 0;
        let u = if diagonalizing {
            diagonalizing_unitary(&current)?
        } else {
            haar_unitary(dim, &mut rng)
        };
        let directions = diagonal_directions(&u, cs);
        if diagonalizing {
            let worst = directions
                .iter()
                .map(|d| ratio(&current, d))
                .fold(f64::INFINITY, f64::min);
            if worst >= target {
                converged = true;
                break;
            }
            if pass > 0 && worst <= best_metric + IMPROVEMENT_TOL {
                break;
            }
            best_metric = best_metric.max(worst);
        }
        for dir in &directions {
            if dir.functional.norm_squared() <= 1e-14 {
                continue;
            }
            if ratio(&current, dir) < alpha0 {
                current = marginal_restriction_step(&current, dir, alpha0)?;
                steps += 1;
            }
        }
    }
    let rho_ml = ml.rho.clone();
    Ok(RestrictionResult {
        state: current,
        m2_ml: ml.m2,
        x_ml: ml.x_ambient,
        rho_ml,
        iterations: steps,
        converged,
    })
}

/// The unitary whose rows are the adjoint eigenvectors of the current mean,
/// so that `U rho U^*` is diagonal.
fn diagonalizing_unitary(state: &GaussianState) -> Result<DMatrix<Complex64>, RestrictError> {
    let mean = repr::mat_vector(&state.mean_vector())?;
    let eig = hermitized(&mean).symmetric_eigen();
    Ok(eig.eigenvectors.adjoint())
}

/// Rank-one diagonal directions `vec(U^* e_ii U)` of a basis rotation.
fn diagonal_directions(u: &DMatrix<Complex64>, cs: &ConstraintSubspaces) -> Vec<OrthantDirection> {
    let dim = u.nrows();
    let u_adj = u.adjoint();
    (0..dim)
        .map(|i| {
            let v = u_adj.column(i).clone_owned();
            let a = repr::vec_matrix(&(&v * v.adjoint()));
            OrthantDirection::from_ambient(&a, cs)
        })
        .collect()
}

/// A Haar-distributed random unitary: QR of a complex Gaussian matrix with
/// the phases of the triangular diagonal divided out.
pub fn haar_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<Complex64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| {
        Complex64::new(standard_normal(rng), standard_normal(rng))
    });
    let qr = g.qr();
    let r = qr.r();
    let phases = DVector::from_iterator(
        dim,
        (0..dim).map(|i| {
            let rii = r[(i, i)];
            if rii.norm() < 1e-300 {
                Complex64::new(1.0, 0.0)
            } else {
                rii / rii.norm()
            }
        }),
    );
    qr.q() * DMatrix::from_diagonal(&phases)
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            let v: f64 = rng.random();
            return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
        }
    }
}

/// Euclidean projection of the free coordinates onto the physical set.
pub fn project_physical_tilde(
    x_tilde: &DVector<Complex64>,
    spec: &PhysicalSetSpec,
    cs: &ConstraintSubspaces,
) -> DVector<Complex64> {
    match &spec.kind {
        PhysicalKind::PsdTraceOne { dim } => {
            let x = cs.from_tilde(x_tilde);
            let m = repr::mat_vector(&x).expect("state space is square");
            let eig = hermitized(&m).symmetric_eigen();
            let lambda: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            let projected = simplex_projection(&lambda);
            debug_assert_eq!(projected.len(), *dim);
            let diag = DVector::from_iterator(
                projected.len(),
                projected.iter().map(|&l| Complex64::new(l, 0.0)),
            );
            let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&diag) * eig.eigenvectors.adjoint();
            cs.to_tilde(&repr::vec_matrix(&rebuilt))
        }
        PhysicalKind::Orthant {
            directions,
            coordinates,
        } => {
            if *coordinates {
                project_coordinate_orthant(x_tilde, cs)
            } else {
                project_halfspaces(x_tilde, directions)
            }
        }
    }
}

/// Euclidean projection of a real vector onto the probability simplex.
pub fn simplex_projection(lambda: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = lambda.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &v) in sorted.iter().enumerate() {
        cumulative += v;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if v - candidate > 0.0 {
            theta = candidate;
        }
    }
    lambda.iter().map(|&v| (v - theta).max(0.0)).collect()
}

/// Dykstra's alternating projections between the ambient nonnegative
/// orthant (real parts) and the constraint-affine subspace.
fn project_coordinate_orthant(
    x_tilde: &DVector<Complex64>,
    cs: &ConstraintSubspaces,
) -> DVector<Complex64> {
    let mut x = cs.from_tilde(x_tilde);
    let x0 = cs.x0();
    let t_x = cs.t_x();
    let mut p = DVector::<Complex64>::zeros(x.len());
    let mut q = DVector::<Complex64>::zeros(x.len());
    const MAX_SWEEPS: usize = 5000;
    for _ in 0..MAX_SWEEPS {
        let before = x.clone();
        let y = &x + &p;
        let clamped = y.map(|v| Complex64::new(v.re.max(0.0), v.im));
        p = y - &clamped;
        let y2 = &clamped + &q;
        x = x0 + t_x * (&y2 - x0);
        q = y2 - &x;
        let drift = (&x - before).norm();
        let violation = x.iter().map(|v| (-v.re).max(0.0)).fold(0.0, f64::max);
        if drift < 1e-13 * (1.0 + x.norm()) && violation < 1e-12 {
            break;
        }
    }
    cs.to_tilde(&x.map(|v| Complex64::new(v.re.max(0.0), v.im)))
}

/// Dykstra's cyclic projections over general half-space directions.
fn project_halfspaces(
    x_tilde: &DVector<Complex64>,
    directions: &[OrthantDirection],
) -> DVector<Complex64> {
    let usable: Vec<&OrthantDirection> = directions
        .iter()
        .filter(|d| d.functional.norm_squared() > 1e-14)
        .collect();
    let mut x = x_tilde.clone();
    let mut corrections = vec![DVector::<Complex64>::zeros(x.len()); usable.len()];
    const MAX_SWEEPS: usize = 2000;
    for _ in 0..MAX_SWEEPS {
        let before = x.clone();
        for (dir, corr) in usable.iter().zip(corrections.iter_mut()) {
            let y = &x + &*corr;
            let value = dir.offset + dir.functional.dotc(&y).re;
            let projected = if value >= 0.0 {
                y.clone()
            } else {
                &y - dir
                    .functional
                    .map(|f| f * (value / dir.functional.norm_squared()))
            };
            *corr = y - &projected;
            x = projected;
        }
        let drift = (&x - before).norm();
        let violation = usable
            .iter()
            .map(|d| (-(d.offset + d.functional.dotc(&x).re)).max(0.0))
            .fold(0.0, f64::max);
        if drift < 1e-13 * (1.0 + x.norm()) && violation < 1e-12 {
            break;
        }
    }
    x
}

/// Finds the physical point minimizing the squared Mahalanobis distance to
/// the posterior mean. Coordinate orthants with real data (diagonal element
/// families) are solved exactly by a primal active-set method, which stays
/// robust when the posterior spectrum spans many decades; everything else
/// uses accelerated projected gradient descent.
pub fn maxlik_state(
    state: &GaussianState,
    spec: &PhysicalSetSpec,
) -> Result<MaxLikSolution, RestrictError> {
    let cs = state.constraints();
    let exact = if matches!(
        spec.kind,
        PhysicalKind::Orthant {
            coordinates: true,
            ..
        }
    ) {
        maxlik_active_set(state, cs)
    } else {
        None
    };
    let (x, iterations, residual) = match exact {
        Some(solution) => solution,
        None => maxlik_projected_gradient(state, spec, cs)?,
    };
    let m2 = confidence::mahalanobis_sq_tilde(state, &x)?;
    let x_ambient = cs.from_tilde(&x);
    let rho = match spec.kind {
        PhysicalKind::PsdTraceOne { .. } => {
            let m = hermitized(&repr::mat_vector(&x_ambient)?);
            Some(HermitianMatrix::new(m)?)
        }
        PhysicalKind::Orthant { .. } => None,
    };
    Ok(MaxLikSolution {
        x_tilde: x,
        x_ambient,
        rho,
        m2,
        iterations,
        optimality_residual: residual,
    })
}

/// Exact minimizer of `(x - mu)^T Sigma^{-1} (x - mu)` over the coordinate
/// orthant, for problems whose free-coordinate data are real. Returns
/// `None` when the data are not real or the algebra degenerates, so the
/// caller can fall back to the projected-gradient path.
fn maxlik_active_set(
    state: &GaussianState,
    cs: &ConstraintSubspaces,
) -> Option<(DVector<Complex64>, usize, f64)> {
    let real_part = |v: Complex64| v.re;
    let imag_sq = |acc: f64, v: &Complex64| acc + v.im * v.im;

    let mu_c = state.mu_tilde();
    let sigma_c = state.sigma_tilde();
    let x1_c = cs.x1();
    let x0_c = cs.x0();
    for (imag, re_scale) in [
        (mu_c.iter().fold(0.0, imag_sq).sqrt(), mu_c.norm()),
        (sigma_c.iter().fold(0.0, imag_sq).sqrt(), sigma_c.norm()),
        (x1_c.iter().fold(0.0, imag_sq).sqrt(), x1_c.norm()),
        (x0_c.iter().fold(0.0, imag_sq).sqrt(), x0_c.norm()),
    ] {
        if imag > 1e-9 * (1.0 + re_scale) {
            return None;
        }
    }

    let mu = mu_c.map(real_part);
    let sigma = {
        let s = sigma_c.map(real_part);
        (&s + s.transpose()) * 0.5
    };
    // Constraint i reads `g_i . x + b_i >= 0` with `g_i` the i-th row of the
    // free-coordinate embedding and `b_i` the reference-point coordinate.
    let g = x1_c.map(real_part);
    let b = x0_c.map(real_part);
    let k = mu.len();
    if b.iter().any(|&v| v < -1e-12) {
        return None;
    }

    let problem = OrthantQp {
        mu: &mu,
        sigma: &sigma,
        g: &g,
        b: &b,
    };
    let (x, _, iterations, residual) = orthant_qp(&problem, DVector::zeros(k), &[])?;
    Some((x.map(|v| Complex64::new(v, 0.0)), iterations, residual))
}

/// A real Mahalanobis minimization `(x - mu)^T Sigma^{-1} (x - mu)` over the
/// polyhedron `{x : g x + b >= 0}`, stated in covariance form.
pub(crate) struct OrthantQp<'a> {
    pub mu: &'a DVector<f64>,
    pub sigma: &'a DMatrix<f64>,
    pub g: &'a DMatrix<f64>,
    pub b: &'a DVector<f64>,
}

/// Exact primal active-set solver for [`OrthantQp`], in covariance form so
/// the ill-conditioned precision matrix is never formed: each
/// equality-constrained subproblem on the working set `W` is solved as
/// `x = mu + Sigma G_W^T a` with `(G_W Sigma G_W^T) a = -b_W - G_W mu`.
/// `x_start` must be feasible; `working_start` warm-starts the working set.
/// Returns the minimizer, its working set, the iteration count, and the
/// stationarity residual, or `None` when the algebra degenerates.
pub(crate) fn orthant_qp(
    problem: &OrthantQp,
    x_start: DVector<f64>,
    working_start: &[usize],
) -> Option<(DVector<f64>, Vec<usize>, usize, f64)> {
    let mu = problem.mu;
    let sigma = problem.sigma;
    let g = problem.g;
    let b = problem.b;
    let n = b.len();
    let k = mu.len();

    let mut x = x_start;
    let start_feasibility = (0..n)
        .map(|i| g.row(i).transpose().dot(&x) + b[i])
        .fold(f64::INFINITY, f64::min);
    if start_feasibility < -1e-8 * (1.0 + x.norm()) {
        return None;
    }
    let mut working: Vec<usize> = working_start.to_vec();
    working.sort_unstable();
    working.dedup();
    if working.iter().any(|&i| i >= n) {
        return None;
    }
    let mut active = vec![false; n];
    for &i in &working {
        active[i] = true;
    }
    let max_iter = 10 * (n + k) + 100;
    for iteration in 1..=max_iter {
        // Minimize over the affine set where the working constraints hold
        // with equality; multipliers are `2 a` for the inequality form.
        let (x_star, multipliers) = if working.is_empty() {
            (mu.clone(), DVector::<f64>::zeros(0))
        } else {
            let gw = DMatrix::<f64>::from_fn(working.len(), k, |r, c| g[(working[r], c)]);
            let gs = &gw * sigma;
            let s = &gs * gw.transpose();
            let rhs = DVector::<f64>::from_fn(working.len(), |r, _| -b[working[r]])
                - &gw * mu;
            let chol = Cholesky::new((&s + s.transpose()) * 0.5)?;
            let a = chol.solve(&rhs);
            (mu + gs.transpose() * &a, a)
        };
        let d = &x_star - &x;
        if d.norm() <= 1e-11 * (1.0 + x.norm()) {
            let worst = multipliers
                .iter()
                .copied()
                .enumerate()
                .min_by(|lhs, rhs| lhs.1.total_cmp(&rhs.1));
            let scale = multipliers.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            match worst {
                Some((j, lambda)) if lambda < -1e-9 * (1.0 + scale) => {
                    active[working[j]] = false;
                    working.remove(j);
                }
                _ => {
                    let feasibility = (0..n)
                        .map(|i| g.row(i).transpose().dot(&x) + b[i])
                        .fold(f64::INFINITY, f64::min);
                    if feasibility < -1e-8 * (1.0 + x.norm()) {
                        return None;
                    }
                    let residual = worst.map_or(0.0, |(_, lambda)| (-2.0 * lambda).max(0.0));
                    return Some((x, working, iteration, residual));
                }
            }
            continue;
        }
        // Ratio test: step toward the subproblem optimum until the first
        // inactive constraint blocks.
        let gd = g * &d;
        let gx = g * &x;
        let mut alpha = 1.0f64;
        let mut blocker = None;
        for i in 0..n {
            if active[i] || gd[i] >= -1e-13 * (1.0 + d.norm()) {
                continue;
            }
            let slack = (gx[i] + b[i]).max(0.0);
            let limit = slack / (-gd[i]);
            if limit < alpha {
                alpha = limit;
                blocker = Some(i);
            }
        }
        x.axpy(alpha, &d, 1.0);
        if let Some(i) = blocker {
            active[i] = true;
            match working.binary_search(&i) {
                Ok(_) => return None,
                Err(pos) => working.insert(pos, i),
            }
        }
    }
    None
}

/// Accelerated projected gradient descent with step
/// `1/(2 lambda_max(Sigma^{-1}))` and gradient-based momentum restarts.
fn maxlik_projected_gradient(
    state: &GaussianState,
    spec: &PhysicalSetSpec,
    cs: &ConstraintSubspaces,
) -> Result<(DVector<Complex64>, usize, f64), RestrictError> {
    let chol = Cholesky::new(hermitized(state.sigma_tilde()))
        .ok_or(ConfidenceError::SingularCovariance)?;
    let sigma_inv = chol.inverse();
    let l = 2.0
        * sigma_inv
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &b| a.max(b));
    let step = 1.0 / l;
    let mu = state.mu_tilde();
    let grad = |x: &DVector<Complex64>| (&sigma_inv * (x - mu)).map(|v| v * 2.0);

    let mut x = project_physical_tilde(mu, spec, cs);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut iterations = 0usize;
    let mut residual = f64::INFINITY;
    const MAX_ITER: usize = 200_000;
    while iterations < MAX_ITER {
        iterations += 1;
        let g = grad(&y);
        let x_new = project_physical_tilde(&(&y - g.map(|v| v * step)), spec, cs);
        let delta = &x_new - &x;
        // Restart the momentum when it points against the descent direction.
        let restart = grad(&x_new).dotc(&delta).re > 0.0;
        let t_new = if restart {
            1.0
        } else {
            (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0
        };
        y = &x_new + delta.map(|v| v * ((t - 1.0) / t_new));
        t = t_new;
        let moved = delta.norm();
        x = x_new;
        if moved < 1e-9 {
            let fixed_point = project_physical_tilde(&(&x - grad(&x).map(|v| v * step)), spec, cs);
            residual = (fixed_point - &x).norm();
            if residual < 1e-7 {
                break;
            }
        }
    }
    if iterations >= MAX_ITER {
        return Err(RestrictError::NoConvergence {
            iterations: MAX_ITER,
        });
    }
    Ok((x, iterations, residual))
}
