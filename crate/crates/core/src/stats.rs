//! Measurement statistics.
//!
//! Observed click vectors are converted into Gaussian measurement summaries
//! by conjugate inference: a multinomial likelihood with a flat prior yields
//! a Dirichlet posterior over the outcome probabilities, and only its first
//! two moments are kept. Counted (Poissonian) acquisition reduces to the same
//! Dirichlet once the unknown brightness is integrated out, picking up the
//! completeness scale `M` of the POVM; families that do not sum to a scalar
//! need an extra average over the possible probability sums, handled by the
//! `phi_k` factors. The chi-square tail functions and the Wald-statistic
//! moments used for confidence calibration live here too.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::special;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("outcome record needs at least two outcomes, got {got}")]
    EmptyCounts { got: usize },
    #[error("pulsed record counts sum to {sum} but runs = {runs}")]
    CountMismatch { sum: u64, runs: u64 },
    #[error("invalid eigenvalue range for completeness sum: m = {m}, M = {big_m}")]
    DegenerateRange { m: f64, big_m: f64 },
}

/// How the click data were acquired.
///
/// Pulsed: a fixed number of runs, multinomially distributed outcomes.
/// Cw: each outcome is an independent Poissonian count; the effective run
/// count is the observed total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquisitionMode {
    Pulsed { runs: u64 },
    Cw,
}

/// A vector of outcome counts for one measurement setting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeRecord {
    counts: Vec<u64>,
    mode: AcquisitionMode,
}

impl OutcomeRecord {
    /// A multinomial record: `counts` from a known number of runs.
    pub fn pulsed(counts: Vec<u64>, runs: u64) -> Result<Self, StatsError> {
        if counts.len() < 2 {
            return Err(StatsError::EmptyCounts { got: counts.len() });
        }
        let sum: u64 = counts.iter().sum();
        if sum != runs {
            return Err(StatsError::CountMismatch { sum, runs });
        }
        Ok(Self {
            counts,
            mode: AcquisitionMode::Pulsed { runs },
        })
    }

    /// A counted (Poissonian) record; the run count is defined as the total.
    pub fn cw(counts: Vec<u64>) -> Result<Self, StatsError> {
        if counts.len() < 2 {
            return Err(StatsError::EmptyCounts { got: counts.len() });
        }
        Ok(Self {
            counts,
            mode: AcquisitionMode::Cw,
        })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    /// The effective number of runs `N`.
    pub fn total(&self) -> u64 {
        match self.mode {
            AcquisitionMode::Pulsed { runs } => runs,
            AcquisitionMode::Cw => self.counts.iter().sum(),
        }
    }

    pub fn mode(&self) -> AcquisitionMode {
        self.mode
    }
}

/// Gaussian summary of a measurement: `z`, `Theta` and the completeness
/// scale that was folded into them.
#[derive(Debug, Clone)]
pub struct MeasurementMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub scale: f64,
}

/// Dirichlet posterior moments of the outcome probabilities given a record.
///
/// Mean `(f_i + 1) / (N + d)`; covariance with diagonal
/// `(f_i+1)(N+d-f_i-1) / [(N+d)^2 (N+d+1)]` and off-diagonal
/// `-(f_i+1)(f_j+1) / [(N+d)^2 (N+d+1)]`.
pub fn dirichlet_moments(rec: &OutcomeRecord) -> MeasurementMoments {
    let d = rec.dim();
    let n = rec.total() as f64;
    let nd = n + d as f64;
    let denom = nd * nd * (nd + 1.0);
    let fp1: Vec<f64> = rec.counts().iter().map(|&f| f as f64 + 1.0).collect();
    let mean = DVector::from_iterator(d, fp1.iter().map(|&a| a / nd));
    let covariance = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            fp1[i] * (nd - fp1[i]) / denom
        } else {
            -fp1[i] * fp1[j] / denom
        }
    });
    MeasurementMoments {
        mean,
        covariance,
        scale: 1.0,
    }
}

/// Closed-form Moore-Penrose inverse of the Dirichlet covariance:
/// `(N+d)(N+d+1) G Diag(f+1)^{-1} G` with `G = I - 11^T/d`.
pub fn dirichlet_cov_mp_inverse(rec: &OutcomeRecord) -> DMatrix<f64> {
    let d = rec.dim();
    let n = rec.total() as f64;
    let nd = n + d as f64;
    let factor = nd * (nd + 1.0);
    let g = DMatrix::from_fn(d, d, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - 1.0 / d as f64
    });
    let diag_inv = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0 / (rec.counts()[i] as f64 + 1.0)
        } else {
            0.0
        }
    });
    (&g * diag_inv * &g).scale(factor)
}

/// Moments for counted acquisition with a scalar-complete element family
/// (`sum_j Pi_j = M I`): the Dirichlet moments of the totals-normalized
/// record, scaled by `M` in the mean and `M^2` in the covariance. The
/// unknown source brightness cancels.
pub fn cw_moments(counts: &[u64], scale: f64) -> Result<MeasurementMoments, StatsError> {
    if counts.len() < 2 {
        return Err(StatsError::EmptyCounts { got: counts.len() });
    }
    if !(scale > 0.0) {
        return Err(StatsError::DegenerateRange {
            m: scale,
            big_m: scale,
        });
    }
    let rec = OutcomeRecord::cw(counts.to_vec())?;
    let mut mm = dirichlet_moments(&rec);
    mm.mean.scale_mut(scale);
    mm.covariance.scale_mut(scale * scale);
    mm.scale = scale;
    Ok(mm)
}

/// `phi_k` averaging factor for a non-scalar completeness sum with extremal
/// eigenvalues `m <= p_0 <= M`.
///
/// Evaluated through geometric sums `S_n(t) = 1 + t + ... + t^{n-1}` so the
/// expression stays exact and continuous at `m = M`.
fn phi_k(k: u32, d: usize, m: f64, big_m: f64) -> f64 {
    let t = m / big_m;
    let geo = |n: usize| -> f64 {
        let mut acc = 0.0;
        let mut pow = 1.0;
        for _ in 0..n {
            acc += pow;
            pow *= t;
        }
        acc
    };
    (d as f64 / (d + k as usize) as f64) * geo(d + k as usize) / geo(d)
}

/// Moments for counted acquisition when the element family sums to a
/// non-scalar operator with extremal eigenvalues `m < M`.
///
/// The probability total `p_0` is averaged over `[m, M]` with the simplex
/// volume measure, producing the `phi_k` factors:
/// mean `M phi_1 (f_i+1)/(N+d)`, second moments
/// `M^2 phi_2 (f_i+1)(f_j+1) / [(N+d)(N+d+1)]` off-diagonal and
/// `M^2 phi_2 (f_i+1)(f_i+2) / [(N+d)(N+d+1)]` on the diagonal.
pub fn nonpovm_moments(counts: &[u64], m: f64, big_m: f64) -> Result<MeasurementMoments, StatsError> {
    if counts.len() < 2 {
        return Err(StatsError::EmptyCounts { got: counts.len() });
    }
    if !(big_m > 0.0) || m < 0.0 || m > big_m {
        return Err(StatsError::DegenerateRange { m, big_m });
    }
    let d = counts.len();
    let n: f64 = counts.iter().map(|&f| f as f64).sum();
    let nd = n + d as f64;
    let phi1 = phi_k(1, d, m, big_m);
    let phi2 = phi_k(2, d, m, big_m);
    let fp1: Vec<f64> = counts.iter().map(|&f| f as f64 + 1.0).collect();
    let mean = DVector::from_iterator(d, fp1.iter().map(|&a| big_m * phi1 * a / nd));
    let second_factor = big_m * big_m * phi2 / (nd * (nd + 1.0));
    let covariance = DMatrix::from_fn(d, d, |i, j| {
        let second = if i == j {
            second_factor * fp1[i] * (fp1[i] + 1.0)
        } else {
            second_factor * fp1[i] * fp1[j]
        };
        second - mean[i] * mean[j]
    });
    Ok(MeasurementMoments {
        mean,
        covariance,
        scale: big_m,
    })
}

/// Chi-square CDF with `nu` degrees of freedom.
pub fn chi2_cdf(x: f64, nu: u32) -> f64 {
    assert!(nu >= 1, "chi2_cdf requires nu >= 1");
    assert!(x >= 0.0, "chi2_cdf requires x >= 0");
    if x == 0.0 {
        return 0.0;
    }
    special::reg_lower_gamma(nu as f64 / 2.0, x / 2.0)
}

/// Inverse chi-square CDF by bisection to 1e-10 in `x`.
pub fn chi2_quantile(p: f64, nu: u32) -> f64 {
    assert!((0.0..1.0).contains(&p), "chi2_quantile requires 0 <= p < 1");
    if p == 0.0 {
        return 0.0;
    }
    let mut hi = nu as f64;
    while chi2_cdf(hi, nu) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, nu) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Squared Mahalanobis threshold for the 95% confidence region with `nu`
/// degrees of freedom: `(sqrt(nu - 1/2) + c)^2` with `c = 1.16309`, or
/// `c = 1.5` for the conservative variant.
pub fn gamma_nu(nu: u32, conservative: bool) -> f64 {
    assert!(nu >= 1, "gamma_nu requires nu >= 1");
    let c = if conservative { 1.5 } else { 1.16309 };
    let root = (nu as f64 - 0.5).sqrt() + c;
    root * root
}

/// First inverse moment of the positive binomial distribution,
/// `mu_{-1}(p, n) = sum_{k=1}^n (1/k) C(n,k) p^k (1-p)^{n-k}`.
///
/// Exact enumeration; stable for the moderate `n` it is used with.
fn inv_moment_exact(p: f64, n: u64) -> f64 {
    let q = 1.0 - p;
    if q <= 0.0 {
        return 1.0 / n as f64;
    }
    // term_k = C(n,k) p^k q^{n-k}, built by recursion from term_0 = q^n.
    let mut term = q.powi(n as i32);
    let mut acc = 0.0;
    for k in 1..=n {
        term *= (n - k + 1) as f64 / k as f64 * (p / q);
        acc += term / k as f64;
    }
    acc
}

/// Second-order Poissonian approximation of `mu_{-1}(p, n)`, relative error
/// `O(1/n^3)`; needed because the Wald variance amplifies `g` by `O(N^3)`.
///
/// Written for a run count `N = n - 1`, so the internal scale is `n` itself.
fn inv_moment_approx(p: f64, n: u64) -> f64 {
    let n1 = n as f64;
    let nm1 = n as f64 - 1.0;
    let mu = n1 * p;
    let f = special::exp_neg_ei(mu) - (-mu).exp() * (mu.ln() + special::EULER_GAMMA);
    let a = 3.0 * mu.powi(4) - 8.0 * mu.powi(3) - 12.0 * n1 * mu * mu + 24.0 * n1 * n1;
    let b = 12.0 * mu.powi(3) - 6.0 * mu * mu - 24.0 * n1 * mu - (12.0 * nm1 + 10.0);
    let c = -3.0 * mu.powi(3) + 5.0 * mu * mu + (12.0 * nm1 + 14.0) * mu + (12.0 * nm1 + 10.0);
    (a * f + b * (-mu).exp() + c) / (24.0 * n1 * n1)
}

/// Exact mean and variance of the Wald statistic
/// `Z = (p - mu)^* Sigma^+ (p - mu)` over multinomial draws `F ~ Mtn(N, p)`.
///
/// The variance involves `g(p, N) = p^3 mu_{-1}(p, N+1)`; for `N <= 60` the
/// inverse moment is enumerated exactly, beyond that the second-order
/// approximation is used.
pub fn wald_moments(p: &[f64], runs: u64) -> (f64, f64) {
    let d = p.len();
    assert!(d >= 2, "wald_moments requires at least two outcomes");
    assert!(runs >= 1, "wald_moments requires N >= 1");
    let total: f64 = p.iter().sum();
    assert!(
        (total - 1.0).abs() < 1e-8 && p.iter().all(|&x| x > 0.0),
        "wald_moments requires a strictly positive probability vector summing to 1"
    );
    let n = runs as f64;
    let nd = n + d as f64;

    let tail_sum: f64 = p.iter().map(|&pi| pi * (1.0 - pi).powi(runs as i32 + 1)).sum();
    let mu_z = (nd + 1.0) * (nd / (n + 1.0) * (1.0 - tail_sum) - 1.0);

    let mut pair_sum = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let (pi, pj) = (p[i], p[j]);
            pair_sum += pi
                * pj
                * (1.0 + (1.0 - pi - pj).powi(runs as i32 + 2)
                    - (1.0 - pi).powi(runs as i32 + 2)
                    - (1.0 - pj).powi(runs as i32 + 2));
        }
    }
    let g_sum: f64 = p
        .iter()
        .map(|&pi| {
            let inv_moment = if runs <= 60 {
                inv_moment_exact(pi, runs + 1)
            } else {
                inv_moment_approx(pi, runs + 1)
            };
            pi.powi(3) * inv_moment
        })
        .sum();
    let brace = (n + 1.0) / (n + 2.0) * pair_sum + (n + 1.0) * g_sum - (1.0 - tail_sum) * (1.0 - tail_sum);
    let sigma2_z = (nd + 1.0) * (nd + 1.0) * nd * nd / ((n + 1.0) * (n + 1.0)) * brace;
    (mu_z, sigma2_z)
}

/// Conservative inflation factor for the Wald standard deviation: 1 when the
/// smallest outcome probability exceeds `20/N` (well-converged regime),
/// otherwise the empirical worst-case factor `1.285 (1 + 2(d - 3/2)/N)`.
/// The boundary `p_min = 20/N` is assigned to the converged branch.
pub fn conservative_sigma_factor(p_min: f64, runs: u64, d: usize) -> f64 {
    assert!(p_min > 0.0 && p_min < 1.0, "p_min must lie in (0, 1)");
    let n = runs as f64;
    if p_min >= 20.0 / n {
        1.0
    } else {
        1.285 * (1.0 + 2.0 * (d as f64 - 1.5) / n)
    }
}
