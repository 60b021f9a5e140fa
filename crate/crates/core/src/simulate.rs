//! Synthetic tomography data: Born-rule probabilities, multinomial and
//! Poisson count sampling, and an end-to-end coverage experiment used to
//! validate the confidence-region calibration.
//!
//! All draws come from a caller-supplied generator; the documented portable
//! choice is `ChaCha12Rng`, with per-trial reproducibility via
//! `(seed, trial index) -> stream`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::confidence::{self, ConfidenceError};
use crate::kalman::{self, KalmanError, MeasurementSetting};
use crate::repr::HermitianMatrix;
use crate::special;
use crate::stats::{self, OutcomeRecord, StatsError};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("true state is not physical: {detail}")]
    NotAState { detail: &'static str },
    #[error("brightness factor must be positive, got {brightness}")]
    BadBrightness { brightness: f64 },
    #[error("the model has no measurement settings")]
    NoSettings,
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// How counts are produced from probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceMode {
    /// A fixed number of runs per setting; counts are multinomial.
    Pulsed { runs: u64 },
    /// Free-running acquisition; counts are independent Poisson draws with
    /// means `brightness * p_k`.
    Cw { brightness: f64 },
}

/// Ground truth for data generation: the state, the measured settings, and
/// the acquisition mode.
#[derive(Debug, Clone)]
pub struct TrueModel {
    pub rho_true: HermitianMatrix,
    pub settings: Vec<MeasurementSetting>,
    pub mode: SourceMode,
}

impl TrueModel {
    pub fn new(
        rho_true: HermitianMatrix,
        settings: Vec<MeasurementSetting>,
        mode: SourceMode,
    ) -> Result<Self, SimulateError> {
        if (rho_true.trace() - 1.0).abs() > 1e-12 {
            return Err(SimulateError::NotAState {
                detail: "trace differs from one",
            });
        }
        if rho_true.eigenvalues().first().copied().unwrap_or(0.0) < -1e-12 {
            return Err(SimulateError::NotAState {
                detail: "negative eigenvalue",
            });
        }
        if let SourceMode::Cw { brightness } = mode {
            if !(brightness > 0.0) {
                return Err(SimulateError::BadBrightness { brightness });
            }
        }
        Ok(TrueModel {
            rho_true,
            settings,
            mode,
        })
    }
}

/// Born-rule outcome probabilities `p_k = Tr[rho Pi_k]`.
pub fn born_probabilities(rho: &HermitianMatrix, povm: &[HermitianMatrix]) -> DVector<f64> {
    DVector::from_iterator(
        povm.len(),
        povm.iter()
            .map(|pi| (pi.as_matrix() * rho.as_matrix()).trace().re),
    )
}

/// The documented portable generator for a given seed.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// An independent stream of the same seed for one trial of an ensemble.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Multinomial counts for one pulsed setting. Probabilities are normalized
/// first, so over-complete scalings (sum `M != 1`) are accepted.
pub fn sample_pulsed<R: Rng + ?Sized>(
    p: &DVector<f64>,
    runs: u64,
    rng: &mut R,
) -> Result<OutcomeRecord, SimulateError> {
    let total: f64 = p.iter().map(|&v| v.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(SimulateError::NotAState {
            detail: "probabilities sum to zero",
        });
    }
    let q = DVector::from_iterator(p.len(), p.iter().map(|&v| v.max(0.0) / total));
    let counts = multinomial(&q, runs, rng);
    Ok(OutcomeRecord::pulsed(counts, runs)?)
}

/// Independent Poisson counts with means `brightness * p_k`.
pub fn sample_cw<R: Rng + ?Sized>(
    p: &DVector<f64>,
    brightness: f64,
    rng: &mut R,
) -> Result<OutcomeRecord, SimulateError> {
    if !(brightness > 0.0) {
        return Err(SimulateError::BadBrightness { brightness });
    }
    let counts: Vec<u64> = p
        .iter()
        .map(|&pk| poisson(brightness * pk.max(0.0), rng))
        .collect();
    Ok(OutcomeRecord::cw(counts)?)
}

/// One dataset draw: an outcome record per setting of the model.
pub fn sample_dataset<R: Rng + ?Sized>(
    model: &TrueModel,
    rng: &mut R,
) -> Result<Vec<OutcomeRecord>, SimulateError> {
    model
        .settings
        .iter()
        .map(|setting| {
            let p = born_probabilities(&model.rho_true, setting.povm());
            match model.mode {
                SourceMode::Pulsed { runs } => sample_pulsed(&p, runs, rng),
                SourceMode::Cw { brightness } => sample_cw(&p, brightness, rng),
            }
        })
        .collect()
}

/// Outcome of a calibration ensemble.
#[derive(Debug, Clone)]
pub struct CoverageResult {
    /// Fraction of trials with `M^2(rho_true) <= gamma`; NaN when empty.
    pub coverage: f64,
    /// The squared Mahalanobis distance of the true state, one per trial.
    pub m2_samples: Vec<f64>,
    /// The 95% chi-square threshold used for scoring.
    pub gamma: f64,
    /// Posterior degrees of freedom.
    pub nu: usize,
    /// Set when no trials were requested.
    pub empty: bool,
}

/// Repeated simulate-and-reconstruct trials scoring how often the true state
/// falls inside the nominal 95% confidence region. Each trial reconstructs
/// with a unit-width dummy prior that is divided back out at the end.
pub fn coverage_experiment(
    model: &TrueModel,
    trials: u64,
    seed: u64,
) -> Result<CoverageResult, SimulateError> {
    let first = model.settings.first().ok_or(SimulateError::NoSettings)?;
    let constraints = first.constraints();
    let nu = constraints.free_dim();
    if trials == 0 {
        return Ok(CoverageResult {
            coverage: f64::NAN,
            m2_samples: Vec::new(),
            gamma: f64::NAN,
            nu,
            empty: true,
        });
    }
    let gamma = stats::chi2_quantile(0.95, nu as u32);
    let prior = kalman::init_prior(constraints, 1.0);
    let mut m2_samples = Vec::with_capacity(trials as usize);
    let mut inside = 0u64;
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial);
        let mut state = prior.clone();
        for setting in &model.settings {
            let p = born_probabilities(&model.rho_true, setting.povm());
            let rec = match model.mode {
                SourceMode::Pulsed { runs } => sample_pulsed(&p, runs, &mut rng)?,
                SourceMode::Cw { brightness } => sample_cw(&p, brightness, &mut rng)?,
            };
            state = kalman::kalman_update(&state, setting, &rec)?;
        }
        let corrected = kalman::correct_prior(&state, state.prior_b(), None)?;
        let m2 = confidence::mahalanobis_sq(&corrected, &model.rho_true)?;
        if m2 <= gamma {
            inside += 1;
        }
        m2_samples.push(m2);
    }
    Ok(CoverageResult {
        coverage: inside as f64 / trials as f64,
        m2_samples,
        gamma,
        nu,
        empty: false,
    })
}

/// Multinomial draw by sequential conditional binomials.
fn multinomial<R: Rng + ?Sized>(p: &DVector<f64>, n: u64, rng: &mut R) -> Vec<u64> {
    let d = p.len();
    assert!(d > 0, "multinomial needs at least one outcome");
    let mut counts = vec![0u64; d];
    let mut remaining = n;
    let mut mass_left = 1.0f64;
    for i in 0..d {
        if remaining == 0 {
            break;
        }
        if i == d - 1 {
            counts[i] = remaining;
            break;
        }
        let q = if mass_left > 1e-300 {
            (p[i] / mass_left).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let f = binomial(remaining, q, rng);
        counts[i] = f;
        remaining -= f;
        mass_left -= p[i];
    }
    counts
}

/// Exact binomial sampling by inversion enumerated outward from the mode,
/// with the probability mass computed by stable recurrences. Cost grows with
/// the standard deviation, which stays small for every use in this crate.
fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    if p > 0.5 {
        let mirrored = binomial(n, 1.0 - p, rng);
        return n - mirrored;
    }
    let nf = n as f64;
    let mode = (((nf + 1.0) * p).floor()).min(nf) as u64;
    let mf = mode as f64;
    let ln_pmf_mode = special::ln_gamma(nf + 1.0) - special::ln_gamma(mf + 1.0)
        - special::ln_gamma(nf - mf + 1.0)
        + mf * p.ln()
        + (nf - mf) * (1.0 - p).ln();
    let pmf_mode = ln_pmf_mode.exp();
    let odds = p / (1.0 - p);
    let mut u = rng.random::<f64>() - pmf_mode;
    if u <= 0.0 {
        return mode;
    }
    let mut hi = mode;
    let mut lo = mode;
    let mut pmf_hi = pmf_mode;
    let mut pmf_lo = pmf_mode;
    loop {
        let mut advanced = false;
        if hi < n {
            pmf_hi *= (nf - hi as f64) / (hi as f64 + 1.0) * odds;
            hi += 1;
            u -= pmf_hi;
            if u <= 0.0 {
                return hi;
            }
            advanced = true;
        }
        if lo > 0 {
            pmf_lo *= lo as f64 / (nf - lo as f64 + 1.0) / odds;
            lo -= 1;
            u -= pmf_lo;
            if u <= 0.0 {
                return lo;
            }
            advanced = true;
        }
        if !advanced {
            // Floating-point leftovers; all mass has been enumerated.
            return mode;
        }
    }
}

/// Poisson sampling: direct inversion below mean 30, transformed rejection
/// with squeeze above.
fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if mean < 30.0 {
        let mut k = 0u64;
        let mut pmf = (-mean).exp();
        let mut u = rng.random::<f64>() - pmf;
        let guard = 500 + 20 * mean.ceil() as u64;
        while u > 0.0 && k < guard {
            k += 1;
            pmf *= mean / k as f64;
            u -= pmf;
        }
        return k;
    }
    let b = 0.931 + 2.53 * mean.sqrt();
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    let ln_mean = mean.ln();
    loop {
        let u = rng.random::<f64>() - 0.5;
        let mut v = rng.random::<f64>();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        v = v * inv_alpha / (a / (us * us) + b);
        if v.ln() <= k * ln_mean - mean - special::ln_gamma(k + 1.0) {
            return k as u64;
        }
    }
}
