//! Artifact suppression inside the physical confidence region: among all
//! physical points whose squared Mahalanobis distance stays below the
//! physical threshold, find the one minimizing a convex cost (smoothness of
//! diagonal element families, negative von Neumann entropy, or a custom
//! quadratic). Quadratic costs over coordinate orthants are solved exactly
//! by dualizing the ellipsoid constraint and bisecting its multiplier, the
//! inner subproblems being active-set QPs; everything else falls back to
//! accelerated projected gradient descent with the feasibility projection
//! computed by Dykstra's alternating projections between the physical set
//! and the Mahalanobis ellipsoid.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::confidence::{self, ConfidenceError};
use crate::kalman::GaussianState;
use crate::repr::{self, Complex64, ConstraintSubspaces, HermitianMatrix, ReprError};
use crate::restrict::{self, PhysicalSetSpec, RestrictError};

#[derive(Debug, Error)]
pub enum RegularizeError {
    #[error("physical confidence region is empty: closest physical point has M^2 = {m2_ml:.6} > {gamma_phys:.6}")]
    EmptyRegion { m2_ml: f64, gamma_phys: f64 },
    #[error("regularization did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("dimension mismatch in {context}")]
    DimensionMismatch { context: &'static str },
    #[error(transparent)]
    Restrict(#[from] RestrictError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

/// Convex cost to minimize over the physical confidence region.
#[derive(Debug, Clone)]
pub enum CostFunctional {
    /// Sum of squared successive differences along each element's diagonal;
    /// the ambient layout is element-major (`x[e * levels + i]`).
    Smoothness { elements: usize, levels: usize },
    /// Negative von Neumann entropy `Tr rho ln rho` (state spaces).
    NegEntropy { dim: usize },
    /// `x^* A x - 2 Re(b^* x)` over the free coordinates, `A` Hermitian PSD.
    CustomQuadratic {
        a: DMatrix<Complex64>,
        b: DVector<Complex64>,
    },
}

const ENTROPY_EIGEN_FLOOR: f64 = 1e-12;

impl CostFunctional {
    pub fn value(&self, x_tilde: &DVector<Complex64>, cs: &ConstraintSubspaces) -> f64 {
        match self {
            CostFunctional::Smoothness { elements, levels } => {
                let x = cs.from_tilde(x_tilde);
                let diags = element_diagonals(&x, *elements, *levels);
                smoothness_cost(&diags)
            }
            CostFunctional::NegEntropy { .. } => {
                let x = cs.from_tilde(x_tilde);
                let m = hermitized(&repr::mat_vector(&x).expect("state space is square"));
                m.symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .map(|&l| {
                        let lc = l.max(ENTROPY_EIGEN_FLOOR);
                        lc * lc.ln()
                    })
                    .sum()
            }
            CostFunctional::CustomQuadratic { a, b } => {
                x_tilde.dotc(&(a * x_tilde)).re - 2.0 * b.dotc(x_tilde).re
            }
        }
    }

    /// Gradient in the free coordinates, under the pairing
    /// `df = Re<grad, delta>`.
    pub fn gradient(&self, x_tilde: &DVector<Complex64>, cs: &ConstraintSubspaces) -> DVector<Complex64> {
        match self {
            CostFunctional::Smoothness { elements, levels } => {
                let x = cs.from_tilde(x_tilde);
                let mut g = DVector::<Complex64>::zeros(x.len());
                for e in 0..*elements {
                    for i in 0..*levels {
                        let idx = e * levels + i;
                        let here = x[idx].re;
                        let mut grad = 0.0;
                        if i > 0 {
                            grad += 2.0 * (here - x[idx - 1].re);
                        }
                        if i + 1 < *levels {
                            grad -= 2.0 * (x[idx + 1].re - here);
                        }
                        g[idx] = Complex64::new(grad, 0.0);
                    }
                }
                cs.x1().adjoint() * g
            }
            CostFunctional::NegEntropy { .. } => {
                let x = cs.from_tilde(x_tilde);
                let m = hermitized(&repr::mat_vector(&x).expect("state space is square"));
                let eig = m.symmetric_eigen();
                let log_diag = DVector::from_iterator(
                    eig.eigenvalues.len(),
                    eig.eigenvalues
                        .iter()
                        .map(|&l| Complex64::new(l.max(ENTROPY_EIGEN_FLOOR).ln() + 1.0, 0.0)),
                );
                let log_m =
                    &eig.eigenvectors * DMatrix::from_diagonal(&log_diag) * eig.eigenvectors.adjoint();
                cs.x1().adjoint() * repr::vec_matrix(&log_m)
            }
            CostFunctional::CustomQuadratic { a, b } => (a * x_tilde - b).map(|v| v * 2.0),
        }
    }

    /// Gradient Lipschitz constant when one is known in closed form.
    fn lipschitz(&self) -> Option<f64> {
        match self {
            // The second-difference operator has spectral norm below 4.
            CostFunctional::Smoothness { .. } => Some(8.0),
            CostFunctional::NegEntropy { .. } => None,
            CostFunctional::CustomQuadratic { a, .. } => {
                let top = hermitized(a)
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .fold(0.0f64, |m, &v| m.max(v.abs()));
                Some((2.0 * top).max(1e-12))
            }
        }
    }

    fn validate(&self, cs: &ConstraintSubspaces) -> Result<(), RegularizeError> {
        let ok = match self {
            CostFunctional::Smoothness { elements, levels } => elements * levels == cs.dim(),
            CostFunctional::NegEntropy { dim } => dim * dim == cs.dim(),
            CostFunctional::CustomQuadratic { a, b } => {
                a.nrows() == cs.free_dim() && a.ncols() == cs.free_dim() && b.len() == cs.free_dim()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(RegularizeError::DimensionMismatch {
                context: "cost functional vs estimation space",
            })
        }
    }
}

/// Sum of squared successive differences across all element diagonals.
pub fn smoothness_cost(elements: &[Vec<f64>]) -> f64 {
    if elements.is_empty() {
        return 0.0;
    }
    let d = elements[0].len();
    assert!(d >= 2, "smoothness needs at least two levels");
    assert!(
        elements.iter().all(|e| e.len() == d),
        "all element diagonals must have the same length"
    );
    elements
        .iter()
        .map(|e| e.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>())
        .sum()
}

/// Splits an element-major ambient vector into per-element diagonals.
pub fn element_diagonals(x: &DVector<Complex64>, elements: usize, levels: usize) -> Vec<Vec<f64>> {
    assert_eq!(x.len(), elements * levels, "ambient layout mismatch");
    (0..elements)
        .map(|e| (0..levels).map(|i| x[e * levels + i].re).collect())
        .collect()
}

/// Result of a regularization run.
#[derive(Debug, Clone)]
pub struct RegularizedSolution {
    pub x_tilde: DVector<Complex64>,
    pub x_ambient: DVector<Complex64>,
    pub rho: Option<HermitianMatrix>,
    pub cost_value: f64,
    pub m2: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Minimizes `cost` over `{physical} intersect {M^2 <= gamma_phys}`.
///
/// The region must be certified non-empty first: if the closest physical
/// point already violates the threshold the call fails with `EmptyRegion`.
pub fn regularized_solution(
    state: &GaussianState,
    spec: &PhysicalSetSpec,
    cost: &CostFunctional,
    gamma_phys: f64,
) -> Result<RegularizedSolution, RegularizeError> {
    let cs = state.constraints();
    cost.validate(cs)?;
    let ml = restrict::maxlik_state(state, spec)?;
    if ml.m2 > gamma_phys {
        return Err(RegularizeError::EmptyRegion {
            m2_ml: ml.m2,
            gamma_phys,
        });
    }

    if let Some(solution) = quadratic_orthant_solution(state, spec, cost, gamma_phys, &ml.x_tilde) {
        return Ok(solution);
    }

    let eig = hermitized(state.sigma_tilde()).symmetric_eigen();
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let basis = eig.eigenvectors;
    let project_feasible = |v: &DVector<Complex64>| -> DVector<Complex64> {
        dykstra_physical_ellipsoid(v, state, spec, &basis, &eigenvalues, gamma_phys)
    };

    let mut x = project_feasible(&ml.x_tilde);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut step = cost.lipschitz().map(|l| 1.0 / l).unwrap_or(0.5);
    let mut iterations = 0usize;
    let mut kkt_residual = f64::INFINITY;
    let mut converged = false;
    const MAX_ITER: usize = 20_000;
    while iterations < MAX_ITER {
        iterations += 1;
        let g = cost.gradient(&y, cs);
        let f_y = cost.value(&y, cs);
        // Backtracking: shrink until the quadratic upper bound holds at the
        // projected trial point (always true immediately when a Lipschitz
        // constant is known).
        let mut x_new;
        loop {
            x_new = project_feasible(&(&y - g.map(|v| v * step)));
            let d = &x_new - &y;
            let quad = f_y + g.dotc(&d).re + d.norm_squared() / (2.0 * step);
            if cost.value(&x_new, cs) <= quad + 1e-12 * (1.0 + f_y.abs()) || step < 1e-14 {
                break;
            }
            step *= 0.5;
        }
        let delta = &x_new - &x;
        let restart = cost.gradient(&x_new, cs).dotc(&delta).re > 0.0;
        let t_new = if restart {
            1.0
        } else {
            (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0
        };
        y = &x_new + delta.map(|v| v * ((t - 1.0) / t_new));
        t = t_new;
        let moved = delta.norm();
        x = x_new;
        if moved < 1e-10 * (1.0 + x.norm()) {
            let probe = project_feasible(&(&x - cost.gradient(&x, cs).map(|v| v * step)));
            kkt_residual = (probe - &x).norm() / step;
            if kkt_residual <= 1e-6 * (1.0 + cost.gradient(&x, cs).norm()) {
                converged = true;
                break;
            }
        }
        // Allow the step to grow back after conservative backtracking.
        if cost.lipschitz().is_none() {
            step = (step * 1.3).min(1.0);
        }
    }
    if !converged {
        return Err(RegularizeError::NoConvergence {
            iterations: MAX_ITER,
        });
    }

    let m2 = confidence::mahalanobis_sq_tilde(state, &x)?;
    let x_ambient = cs.from_tilde(&x);
    let rho = match spec.kind {
        restrict::PhysicalKind::PsdTraceOne { .. } => {
            let m = hermitized(&repr::mat_vector(&x_ambient)?);
            Some(HermitianMatrix::new(m)?)
        }
        restrict::PhysicalKind::Orthant { .. } => None,
    };
    let cost_value = cost.value(&x, cs);
    Ok(RegularizedSolution {
        x_tilde: x,
        x_ambient,
        rho,
        cost_value,
        m2,
        iterations,
        kkt_residual,
    })
}

/// Real quadratic reduction `f(x) = x^T q x - 2 beta^T x + const` of a cost
/// over the free coordinates, when one exists.
struct QuadraticCost {
    q: DMatrix<f64>,
    beta: DVector<f64>,
}

fn real_matrix(m: &DMatrix<Complex64>) -> Option<DMatrix<f64>> {
    let imag = m.iter().map(|z| z.im * z.im).sum::<f64>().sqrt();
    if imag > 1e-9 * (1.0 + m.norm()) {
        return None;
    }
    Some(m.map(|z| z.re))
}

fn real_vector(v: &DVector<Complex64>) -> Option<DVector<f64>> {
    let imag = v.iter().map(|z| z.im * z.im).sum::<f64>().sqrt();
    if imag > 1e-9 * (1.0 + v.norm()) {
        return None;
    }
    Some(v.map(|z| z.re))
}

fn spd_cholesky(m: DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let scale = m.diagonal().amax();
    Cholesky::new(m.clone()).or_else(|| {
        let mut jittered = m;
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += 1e-14 * (1.0 + scale);
        }
        Cholesky::new(jittered)
    })
}

fn quadratic_in_tilde(cost: &CostFunctional, cs: &ConstraintSubspaces) -> Option<QuadraticCost> {
    match cost {
        CostFunctional::Smoothness { elements, levels } => {
            if *levels < 2 {
                return None;
            }
            let x1 = real_matrix(cs.x1())?;
            let x0 = real_vector(cs.x0())?;
            let rows = elements * (levels - 1);
            let mut s = DMatrix::<f64>::zeros(rows, elements * levels);
            let mut r = 0;
            for e in 0..*elements {
                for i in 0..levels - 1 {
                    s[(r, e * levels + i)] = -1.0;
                    s[(r, e * levels + i + 1)] = 1.0;
                    r += 1;
                }
            }
            let sx1 = &s * &x1;
            let sx0 = &s * &x0;
            Some(QuadraticCost {
                q: sx1.transpose() * &sx1,
                beta: -(sx1.transpose() * sx0),
            })
        }
        CostFunctional::CustomQuadratic { a, b } => Some(QuadraticCost {
            q: real_matrix(&hermitized(a))?,
            beta: real_vector(b)?,
        }),
        CostFunctional::NegEntropy { .. } => None,
    }
}

/// Exact path for quadratic costs over coordinate orthants: the ellipsoid
/// constraint is dualized with a multiplier `lambda >= 0`, and for each
/// `lambda` the inner problem `min f + lambda M^2` is a Mahalanobis
/// minimization over the orthant polyhedron, solved exactly by the
/// active-set QP and warm-started across multiplier values. `M^2(x(lambda))`
/// is continuous and nonincreasing, so bisection settles complementarity;
/// an interior optimum is recognized at a negligible multiplier. Returns
/// `None` when the problem is not of this shape (caller falls back to the
/// projected-gradient solver).
fn quadratic_orthant_solution(
    state: &GaussianState,
    spec: &PhysicalSetSpec,
    cost: &CostFunctional,
    gamma_phys: f64,
    ml_x_tilde: &DVector<Complex64>,
) -> Option<RegularizedSolution> {
    if !matches!(
        spec.kind,
        restrict::PhysicalKind::Orthant {
            coordinates: true,
            ..
        }
    ) {
        return None;
    }
    let cs = state.constraints();
    let quad = quadratic_in_tilde(cost, cs)?;
    let mu = real_vector(state.mu_tilde())?;
    let sigma = {
        let s = real_matrix(state.sigma_tilde())?;
        (&s + s.transpose()) * 0.5
    };
    let g = real_matrix(cs.x1())?;
    let b = real_vector(cs.x0())?;
    let p = {
        let inv = spd_cholesky(sigma)?.inverse();
        (&inv + inv.transpose()) * 0.5
    };
    let x_ml = real_vector(ml_x_tilde)?;

    let m2_of = |x: &DVector<f64>| -> f64 {
        let d = x - &mu;
        d.dot(&(&p * &d))
    };
    let solve = |lambda: f64,
                 start_x: &DVector<f64>,
                 start_w: &[usize]|
     -> Option<(DVector<f64>, Vec<usize>, usize, f64)> {
        let a = {
            let raw = &quad.q + &p * lambda;
            (&raw + raw.transpose()) * 0.5
        };
        let chol = spd_cholesky(a)?;
        let mean = chol.solve(&(&quad.beta + (&p * &mu) * lambda));
        let sigma_eff = {
            let inv = chol.inverse();
            (&inv + inv.transpose()) * 0.5
        };
        let problem = restrict::OrthantQp {
            mu: &mean,
            sigma: &sigma_eff,
            g: &g,
            b: &b,
        };
        restrict::orthant_qp(&problem, start_x.clone(), start_w)
    };
    let package = |x: DVector<f64>,
                   lambda: f64,
                   g_value: f64,
                   qp_residual: f64,
                   iterations: usize|
     -> Option<RegularizedSolution> {
        let x_tilde = x.map(|v| Complex64::new(v, 0.0));
        let m2 = confidence::mahalanobis_sq_tilde(state, &x_tilde).ok()?;
        let x_ambient = cs.from_tilde(&x_tilde);
        let cost_value = cost.value(&x_tilde, cs);
        let kkt_residual =
            qp_residual + lambda * (g_value - gamma_phys).abs() / (1.0 + gamma_phys);
        Some(RegularizedSolution {
            x_tilde,
            x_ambient,
            rho: None,
            cost_value,
            m2,
            iterations,
            kkt_residual,
        })
    };

    let n = b.len();
    let ml_working: Vec<usize> = (0..n)
        .filter(|&i| g.row(i).transpose().dot(&x_ml) + b[i] <= 1e-9 * (1.0 + x_ml.norm()))
        .collect();
    let p_norm = p.norm();
    if !(p_norm > 0.0) {
        return None;
    }
    let lambda_scale = ((quad.q.norm() + 1e-300) / p_norm).max(1e-300);
    let lambda_min = 1e-9 * lambda_scale;
    let tol = 1e-8 * (1.0 + gamma_phys);
    let mut total_iterations = 0usize;
    let mut warm = (x_ml, ml_working);

    // Interior probe: at a negligible multiplier the inner solution is the
    // cost minimizer over the orthant; inside the ellipsoid it is final.
    // The probe Hessian can be too singular to factor; that only rules out
    // the interior case, so failure moves on to bracketing.
    let mut lam_lo = lambda_min;
    if let Some((x, w, it, r)) = solve(lambda_min, &warm.0, &warm.1) {
        total_iterations += it;
        let gv = m2_of(&x);
        if gv <= gamma_phys {
            return package(x, lambda_min, gv, r, total_iterations);
        }
        warm = (x, w);
    }

    // Bracket: grow the multiplier until the solution enters the ellipsoid.
    // The limit point is the MaxLik solution, certified feasible upstream.
    let mut lam_hi = lambda_scale.max(lambda_min * 10.0);
    let mut hi: Option<(DVector<f64>, Vec<usize>, f64)> = None;
    for _ in 0..300 {
        let (x, w, it, r) = solve(lam_hi, &warm.0, &warm.1)?;
        total_iterations += it;
        let gv = m2_of(&x);
        if gv <= gamma_phys {
            if gamma_phys - gv <= tol {
                return package(x, lam_hi, gv, r, total_iterations);
            }
            hi = Some((x, w, r));
            break;
        }
        lam_lo = lam_hi;
        warm = (x, w);
        lam_hi *= 10.0;
    }
    let (mut x_hi, mut w_hi, mut r_hi) = hi?;

    // Bisection on the multiplier, geometric while the bracket spans
    // decades. Only feasible iterates are accepted, so the returned point
    // never leaves the ellipsoid. An unfactorable subproblem below the
    // bracket midpoint is treated as the infeasible side.
    for _ in 0..300 {
        if lam_hi - lam_lo <= 1e-13 * lam_hi {
            break;
        }
        let mid = if lam_hi / lam_lo > 4.0 {
            (lam_lo * lam_hi).sqrt()
        } else {
            0.5 * (lam_lo + lam_hi)
        };
        match solve(mid, &x_hi, &w_hi) {
            Some((x, w, it, r)) => {
                total_iterations += it;
                let gv = m2_of(&x);
                if gv > gamma_phys {
                    lam_lo = mid;
                } else {
                    if gamma_phys - gv <= tol {
                        return package(x, mid, gv, r, total_iterations);
                    }
                    lam_hi = mid;
                    x_hi = x;
                    w_hi = w;
                    r_hi = r;
                }
            }
            None => {
                lam_lo = mid;
            }
        }
    }
    let gv = m2_of(&x_hi);
    package(x_hi, lam_hi, gv, r_hi, total_iterations)
}

/// Dykstra's alternating projections between the physical set and the
/// Mahalanobis ellipsoid `{v: (v-mu)^* Sigma^{-1} (v-mu) <= gamma}`.
fn dykstra_physical_ellipsoid(
    v: &DVector<Complex64>,
    state: &GaussianState,
    spec: &PhysicalSetSpec,
    basis: &DMatrix<Complex64>,
    eigenvalues: &[f64],
    gamma: f64,
) -> DVector<Complex64> {
    let cs = state.constraints();
    let mut x = v.clone();
    let mut p = DVector::<Complex64>::zeros(x.len());
    let mut q = DVector::<Complex64>::zeros(x.len());
    const MAX_SWEEPS: usize = 500;
    for _ in 0..MAX_SWEEPS {
        let before = x.clone();
        let y = &x + &p;
        let phys = restrict::project_physical_tilde(&y, spec, cs);
        p = y - &phys;
        let y2 = &phys + &q;
        x = project_ellipsoid(&y2, state.mu_tilde(), basis, eigenvalues, gamma);
        q = y2 - &x;
        if (&x - before).norm() < 1e-11 * (1.0 + x.norm()) {
            break;
        }
    }
    x
}

/// Euclidean projection onto the ellipsoid, via the secular equation in the
/// covariance eigenbasis solved by bisection.
fn project_ellipsoid(
    v: &DVector<Complex64>,
    mu: &DVector<Complex64>,
    basis: &DMatrix<Complex64>,
    eigenvalues: &[f64],
    gamma: f64,
) -> DVector<Complex64> {
    let w = basis.adjoint() * (v - mu);
    let m2 = |nu: f64| -> f64 {
        w.iter()
            .zip(eigenvalues)
            .map(|(wi, &l)| {
                let li = l.max(1e-300);
                let scaled = wi.norm_sqr() * li / ((li + nu) * (li + nu));
                scaled
            })
            .sum()
    };
    if m2(0.0) <= gamma {
        return v.clone();
    }
    let mut lo = 0.0f64;
    let mut hi = eigenvalues.iter().fold(1e-12f64, |m, &l| m.max(l));
    while m2(hi) > gamma {
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if m2(mid) > gamma {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    let nu = 0.5 * (lo + hi);
    let y = DVector::from_iterator(
        w.len(),
        w.iter().zip(eigenvalues).map(|(wi, &l)| {
            let li = l.max(1e-300);
            wi * (li / (li + nu))
        }),
    );
    mu + basis * y
}

fn hermitized(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (m + m.adjoint()).map(|z| z * 0.5)
}
