//! The five pipeline commands. Each reads/writes the JSON formats from
//! `jsonio` and maps library failures onto the documented exit codes.

use std::path::Path;
use std::sync::Arc;

use kftomo::confidence;
use kftomo::kalman::{self, GaussianState, KalmanError, MeasurementSetting};
use kftomo::regularize::{self, CostFunctional};
use kftomo::repr::{self, Complex64, ConstraintSubspaces, HermitianMatrix};
use kftomo::restrict::{self, PhysicalSetSpec, Schedule};
use kftomo::simulate::{self, SourceMode, TrueModel};
use kftomo::stats::{self, OutcomeRecord};
use nalgebra::{DMatrix, DVector};

use crate::jsonio::{
    self, CMatrix, CVector, Dataset, ModeField, ModeSpec, ModelSpec, ProblemKind,
    ReconstructStage, RegularizeStage, Report, RestrictStage, SettingRecord,
};
use crate::{CliError, CostArg, GlobalOpts, MethodArg};

/// Effective prior width kept along unmeasured directions when the dummy
/// prior cannot be divided out entirely.
const VARIANCE_CAP: f64 = 100.0;

fn invalid(message: String) -> CliError {
    CliError::Invalid { message }
}

fn numeric(message: String) -> CliError {
    CliError::Numeric { message }
}

/// A dataset resolved into library objects.
struct Problem {
    kind: ProblemKind,
    dimension: Option<usize>,
    elements: Option<usize>,
    levels: Option<usize>,
    constraints: Arc<ConstraintSubspaces>,
    settings: Vec<MeasurementSetting>,
    records: Vec<OutcomeRecord>,
    total_counts: u64,
}

fn state_constraints(dimension: usize) -> Result<Arc<ConstraintSubspaces>, CliError> {
    let eye = DMatrix::<Complex64>::identity(dimension, dimension);
    let rho0 = HermitianMatrix::new(eye.map(|z| z / dimension as f64))
        .map_err(|e| invalid(format!("reference state: {e}")))?;
    Ok(Arc::new(
        repr::standard_state_constraints(dimension, &rho0)
            .map_err(|e| invalid(format!("state constraints: {e}")))?,
    ))
}

fn probe_setting(
    probe: &[f64],
    elements: usize,
    levels: usize,
    constraints: &Arc<ConstraintSubspaces>,
    idx: usize,
) -> Result<MeasurementSetting, CliError> {
    if probe.len() != levels {
        return Err(invalid(format!(
            "setting {idx}: probe has {} levels, expected {levels}",
            probe.len()
        )));
    }
    if probe.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(invalid(format!(
            "setting {idx}: probe weights must be finite and non-negative"
        )));
    }
    let mut h = DMatrix::<Complex64>::zeros(elements, elements * levels);
    for k in 0..elements {
        for i in 0..levels {
            h[(k, k * levels + i)] = Complex64::new(probe[i], 0.0);
        }
    }
    MeasurementSetting::from_matrix(h, constraints)
        .map_err(|e| invalid(format!("setting {idx}: {e}")))
}

fn build_record(sr: &SettingRecord, idx: usize) -> Result<OutcomeRecord, CliError> {
    match sr.mode {
        ModeField::Pulsed => {
            let runs = sr
                .runs
                .ok_or_else(|| invalid(format!("setting {idx}: pulsed mode requires \"runs\"")))?;
            OutcomeRecord::pulsed(sr.counts.clone(), runs)
                .map_err(|e| invalid(format!("setting {idx}: {e}")))
        }
        ModeField::Cw => OutcomeRecord::cw(sr.counts.clone())
            .map_err(|e| invalid(format!("setting {idx}: {e}"))),
    }
}

fn build_problem(ds: &Dataset) -> Result<Problem, CliError> {
    if ds.settings.is_empty() {
        return Err(invalid("dataset has no settings".into()));
    }
    match ds.kind {
        ProblemKind::State => {
            let dimension = ds
                .dimension
                .ok_or_else(|| invalid("state dataset requires \"dimension\"".into()))?;
            if !(2..=64).contains(&dimension) {
                return Err(invalid(format!("unsupported dimension {dimension}")));
            }
            let constraints = state_constraints(dimension)?;
            let mut settings = Vec::with_capacity(ds.settings.len());
            let mut records = Vec::with_capacity(ds.settings.len());
            let mut total = 0u64;
            for (idx, sr) in ds.settings.iter().enumerate() {
                let povm_json = sr.povm.as_ref().ok_or_else(|| {
                    invalid(format!("setting {idx}: state dataset requires \"povm\""))
                })?;
                let mut povm = Vec::with_capacity(povm_json.len());
                for (j, cm) in povm_json.iter().enumerate() {
                    let element = cm
                        .to_hermitian()
                        .map_err(|e| invalid(format!("setting {idx}, element {j}: {e}")))?;
                    if element.dim() != dimension {
                        return Err(invalid(format!(
                            "setting {idx}, element {j}: dimension {} != {dimension}",
                            element.dim()
                        )));
                    }
                    povm.push(element);
                }
                if sr.counts.len() != povm.len() {
                    return Err(invalid(format!(
                        "setting {idx}: {} counts for {} elements",
                        sr.counts.len(),
                        povm.len()
                    )));
                }
                settings.push(
                    MeasurementSetting::from_povm(povm, &constraints)
                        .map_err(|e| invalid(format!("setting {idx}: {e}")))?,
                );
                let rec = build_record(sr, idx)?;
                total += rec.total();
                records.push(rec);
            }
            Ok(Problem {
                kind: ds.kind,
                dimension: Some(dimension),
                elements: None,
                levels: None,
                constraints,
                settings,
                records,
                total_counts: total,
            })
        }
        ProblemKind::DiagonalPovm => {
            let elements = ds
                .elements
                .ok_or_else(|| invalid("diagonal_povm dataset requires \"elements\"".into()))?;
            let levels = ds
                .levels
                .ok_or_else(|| invalid("diagonal_povm dataset requires \"levels\"".into()))?;
            if elements < 2 || levels < 2 || elements * levels > 4096 {
                return Err(invalid(format!(
                    "unsupported element family shape {elements} x {levels}"
                )));
            }
            let constraints = Arc::new(
                repr::diagonal_povm_constraints(elements, levels)
                    .map_err(|e| invalid(format!("element constraints: {e}")))?,
            );
            let mut settings = Vec::with_capacity(ds.settings.len());
            let mut records = Vec::with_capacity(ds.settings.len());
            let mut total = 0u64;
            for (idx, sr) in ds.settings.iter().enumerate() {
                let probe = sr.probe.as_ref().ok_or_else(|| {
                    invalid(format!(
                        "setting {idx}: diagonal_povm dataset requires \"probe\""
                    ))
                })?;
                if sr.counts.len() != elements {
                    return Err(invalid(format!(
                        "setting {idx}: {} counts for {elements} elements",
                        sr.counts.len()
                    )));
                }
                settings.push(probe_setting(probe, elements, levels, &constraints, idx)?);
                let rec = build_record(sr, idx)?;
                total += rec.total();
                records.push(rec);
            }
            Ok(Problem {
                kind: ds.kind,
                dimension: None,
                elements: Some(elements),
                levels: Some(levels),
                constraints,
                settings,
                records,
                total_counts: total,
            })
        }
    }
}

pub fn cmd_simulate(model_path: &Path, opts: &GlobalOpts) -> Result<(), CliError> {
    let model: ModelSpec = jsonio::read_json(model_path)?;
    let mut rng = simulate::seeded_rng(opts.seed);
    let mut metadata = model.metadata.clone();
    metadata.insert("seed".into(), opts.seed.to_string());
    metadata.insert("generator".into(), "chacha12".into());

    let dataset = match model.kind {
        ProblemKind::State => {
            let dimension = model
                .dimension
                .ok_or_else(|| invalid("state model requires \"dimension\"".into()))?;
            let rho_json = model
                .true_state
                .as_ref()
                .ok_or_else(|| invalid("state model requires \"true_state\"".into()))?;
            let rho = rho_json
                .to_hermitian()
                .map_err(|e| invalid(format!("true_state: {e}")))?;
            if rho.dim() != dimension {
                return Err(invalid(format!(
                    "true_state dimension {} != {dimension}",
                    rho.dim()
                )));
            }
            let model_settings = model
                .settings
                .as_ref()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| invalid("state model requires non-empty \"settings\"".into()))?;
            let constraints = state_constraints(dimension)?;
            let mut settings = Vec::with_capacity(model_settings.len());
            for (idx, ms) in model_settings.iter().enumerate() {
                let mut povm = Vec::with_capacity(ms.povm.len());
                for (j, cm) in ms.povm.iter().enumerate() {
                    povm.push(
                        cm.to_hermitian()
                            .map_err(|e| invalid(format!("setting {idx}, element {j}: {e}")))?,
                    );
                }
                settings.push(
                    MeasurementSetting::from_povm(povm, &constraints)
                        .map_err(|e| invalid(format!("setting {idx}: {e}")))?,
                );
            }
            let mode = match model.mode {
                ModeSpec::Pulsed { runs } => SourceMode::Pulsed { runs },
                ModeSpec::Cw { brightness } => SourceMode::Cw { brightness },
            };
            let true_model = TrueModel::new(rho, settings, mode)
                .map_err(|e| invalid(format!("model: {e}")))?;
            let draws = simulate::sample_dataset(&true_model, &mut rng)
                .map_err(|e| numeric(format!("sampling failed: {e}")))?;
            let settings_json = model_settings
                .iter()
                .zip(&draws)
                .map(|(ms, rec)| SettingRecord {
                    povm: Some(ms.povm.clone()),
                    probe: None,
                    counts: rec.counts().to_vec(),
                    mode: match model.mode {
                        ModeSpec::Pulsed { .. } => ModeField::Pulsed,
                        ModeSpec::Cw { .. } => ModeField::Cw,
                    },
                    runs: match model.mode {
                        ModeSpec::Pulsed { runs } => Some(runs),
                        ModeSpec::Cw { .. } => None,
                    },
                })
                .collect();
            Dataset {
                kind: ProblemKind::State,
                dimension: Some(dimension),
                elements: None,
                levels: None,
                settings: settings_json,
                metadata,
                true_state: model.true_state.clone(),
                true_elements: None,
            }
        }
        ProblemKind::DiagonalPovm => {
            let elements = model
                .elements
                .ok_or_else(|| invalid("diagonal_povm model requires \"elements\"".into()))?;
            let levels = model
                .levels
                .ok_or_else(|| invalid("diagonal_povm model requires \"levels\"".into()))?;
            let theta = model
                .true_elements
                .as_ref()
                .ok_or_else(|| invalid("diagonal_povm model requires \"true_elements\"".into()))?;
            if theta.len() != elements || theta.iter().any(|row| row.len() != levels) {
                return Err(invalid(format!(
                    "true_elements must be {elements} rows of {levels} levels"
                )));
            }
            for i in 0..levels {
                let total: f64 = theta.iter().map(|row| row[i]).sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(invalid(format!(
                        "true_elements level {i} sums to {total}, expected 1"
                    )));
                }
            }
            if theta
                .iter()
                .any(|row| row.iter().any(|&w| w < -1e-9 || w > 1.0 + 1e-9))
            {
                return Err(invalid("true_elements entries must lie in [0, 1]".into()));
            }
            let probes = model
                .probes
                .as_ref()
                .filter(|p| !p.is_empty())
                .ok_or_else(|| invalid("diagonal_povm model requires \"probes\"".into()))?;
            let mut settings_json = Vec::with_capacity(probes.len());
            for (idx, probe) in probes.iter().enumerate() {
                if probe.len() != levels {
                    return Err(invalid(format!(
                        "probe {idx} has {} levels, expected {levels}",
                        probe.len()
                    )));
                }
                let p = DVector::from_iterator(
                    elements,
                    theta
                        .iter()
                        .map(|row| row.iter().zip(probe).map(|(&t, &w)| t * w).sum::<f64>()),
                );
                let (rec, mode, runs) = match model.mode {
                    ModeSpec::Pulsed { runs } => (
                        simulate::sample_pulsed(&p, runs, &mut rng)
                            .map_err(|e| numeric(format!("probe {idx}: {e}")))?,
                        ModeField::Pulsed,
                        Some(runs),
                    ),
                    ModeSpec::Cw { brightness } => (
                        simulate::sample_cw(&p, brightness, &mut rng)
                            .map_err(|e| numeric(format!("probe {idx}: {e}")))?,
                        ModeField::Cw,
                        None,
                    ),
                };
                settings_json.push(SettingRecord {
                    povm: None,
                    probe: Some(probe.clone()),
                    counts: rec.counts().to_vec(),
                    mode,
                    runs,
                });
            }
            Dataset {
                kind: ProblemKind::DiagonalPovm,
                dimension: None,
                elements: Some(elements),
                levels: Some(levels),
                settings: settings_json,
                metadata,
                true_state: None,
                true_elements: Some(theta.clone()),
            }
        }
    };

    let out = opts
        .output
        .clone()
        .unwrap_or_else(|| jsonio::derived_path(model_path, "dataset.json"));
    jsonio::write_json(&out, &dataset)?;
    println!(
        "wrote {} ({} settings, seed {})",
        out.display(),
        dataset.settings.len(),
        opts.seed
    );
    Ok(())
}

pub fn cmd_reconstruct(input: &Path, opts: &GlobalOpts) -> Result<(), CliError> {
    let out = opts
        .output
        .clone()
        .unwrap_or_else(|| jsonio::derived_path(input, "report.json"));
    if let Ok(existing) = jsonio::read_json::<Report>(&out) {
        if existing.reconstruct.is_some() {
            println!("{}: reconstruct stage already present", out.display());
            return Ok(());
        }
    }
    let ds: Dataset = jsonio::read_json(input)?;
    let problem = build_problem(&ds)?;

    let mut single_shot = false;
    let mut prior_correction = "none";
    let mut state: Option<GaussianState> = None;
    if problem.settings.len() == 1 && problem.settings[0].is_scalar_complete() {
        match kalman::single_shot_posterior(&problem.settings[0], &problem.records[0]) {
            Ok(s) => {
                single_shot = true;
                state = Some(s);
            }
            Err(KalmanError::RankDeficient) => {}
            Err(e) => return Err(numeric(format!("setting 0: {e}"))),
        }
    }
    let state = match state {
        Some(s) => s,
        None => {
            let mut s = kalman::init_prior(&problem.constraints, 1.0);
            for (idx, (setting, rec)) in
                problem.settings.iter().zip(&problem.records).enumerate()
            {
                s = kalman::kalman_update(&s, setting, rec)
                    .map_err(|e| numeric(format!("setting {idx}: {e}")))?;
            }
            match kalman::correct_prior(&s, s.prior_b(), None) {
                Ok(c) => {
                    prior_correction = "removed";
                    c
                }
                Err(KalmanError::NotCorrectable { .. }) => {
                    let b_prime = kalman::widen_for_variance_cap(s.prior_b(), VARIANCE_CAP)
                        .map_err(|e| numeric(format!("prior correction: {e}")))?;
                    prior_correction = "variance_capped";
                    kalman::correct_prior(&s, b_prime, None)
                        .map_err(|e| numeric(format!("prior correction: {e}")))?
                }
                Err(e) => return Err(numeric(format!("prior correction: {e}"))),
            }
        }
    };

    let nu = state.dof();
    let gamma = stats::gamma_nu(nu as u32, opts.conservative);
    let mean_ambient = state.mean_vector();
    let (mean_matrix, element_diagonals) = match problem.kind {
        ProblemKind::State => {
            let m = state
                .mean_matrix()
                .map_err(|e| numeric(format!("posterior mean: {e}")))?;
            (Some(CMatrix::from_hermitian(&m)), None)
        }
        ProblemKind::DiagonalPovm => (
            None,
            Some(regularize::element_diagonals(
                &mean_ambient,
                problem.elements.unwrap(),
                problem.levels.unwrap(),
            )),
        ),
    };
    let stage = ReconstructStage {
        kind: problem.kind,
        dimension: problem.dimension,
        elements: problem.elements,
        levels: problem.levels,
        x0: CVector::from_dvector(problem.constraints.x0()),
        x1: CMatrix::from_dmatrix(problem.constraints.x1()),
        mu_tilde: CVector::from_dvector(state.mu_tilde()),
        sigma_tilde: CMatrix::from_dmatrix(state.sigma_tilde()),
        mean_matrix,
        element_diagonals,
        covariance_spectrum: state.covariance_spectrum(),
        nu,
        gamma,
        conservative: opts.conservative,
        prior_b: state.prior_b().is_finite().then(|| state.prior_b()),
        single_shot,
        prior_correction: prior_correction.into(),
        settings_count: problem.settings.len(),
        total_counts: problem.total_counts,
    };
    let mut report = Report::default();
    report
        .provenance
        .insert("input".into(), input.display().to_string());
    report
        .provenance
        .insert("tool".into(), format!("kftomo {}", env!("CARGO_PKG_VERSION")));
    report
        .provenance
        .insert("conservative".into(), opts.conservative.to_string());
    report.reconstruct = Some(stage);
    jsonio::write_json(&out, &report)?;
    println!(
        "{}: reconstructed ({} settings, nu = {nu}, gamma = {gamma:.4}{})",
        out.display(),
        problem.settings.len(),
        if single_shot { ", single-shot" } else { "" }
    );
    Ok(())
}

fn rebuild_state(stage: &ReconstructStage) -> Result<GaussianState, CliError> {
    let x0 = stage
        .x0
        .to_dvector()
        .map_err(|e| invalid(format!("stored x0: {e}")))?;
    let x1 = stage
        .x1
        .to_dmatrix()
        .map_err(|e| invalid(format!("stored x1: {e}")))?;
    let cs = ConstraintSubspaces::new(x0, x1)
        .map_err(|e| invalid(format!("stored subspaces: {e}")))?;
    let mu = stage
        .mu_tilde
        .to_dvector()
        .map_err(|e| invalid(format!("stored mean: {e}")))?;
    let sigma = stage
        .sigma_tilde
        .to_dmatrix()
        .map_err(|e| invalid(format!("stored covariance: {e}")))?;
    GaussianState::from_parts(
        mu,
        sigma,
        Arc::new(cs),
        stage.prior_b.unwrap_or(f64::INFINITY),
    )
    .map_err(|e| invalid(format!("stored state: {e}")))
}

fn physical_spec(stage: &ReconstructStage, cs: &ConstraintSubspaces) -> PhysicalSetSpec {
    match stage.kind {
        ProblemKind::State => PhysicalSetSpec::psd_trace_one(stage.dimension.unwrap_or(2)),
        ProblemKind::DiagonalPovm => PhysicalSetSpec::orthant_coordinates(cs),
    }
}

pub fn cmd_restrict(
    report_path: &Path,
    method: MethodArg,
    epsilon: f64,
    opts: &GlobalOpts,
) -> Result<(), CliError> {
    let mut report: Report = jsonio::read_json(report_path)?;
    let stage = report.reconstruct.clone().ok_or_else(|| CliError::Missing {
        message: format!(
            "{}: no reconstruct stage; run `kftomo reconstruct` first",
            report_path.display()
        ),
    })?;
    if let Some(existing) = &report.restrict {
        println!("{}: restrict stage already present", report_path.display());
        if existing.within_region {
            return Ok(());
        }
        return Err(CliError::Diagnostic {
            m2_ml: existing.m2_ml,
            gamma: existing.gamma,
        });
    }
    let state = rebuild_state(&stage)?;
    let spec = physical_spec(&stage, state.constraints()).with_epsilon(epsilon);
    let gamma = stage.gamma;

    let (m2_ml, x_ml, rho_ml, restricted, iterations, converged) = match method {
        MethodArg::Simple => {
            let ml = restrict::maxlik_state(&state, &spec)
                .map_err(|e| numeric(format!("closest physical state: {e}")))?;
            (ml.m2, ml.x_ambient, ml.rho, None, None, None)
        }
        MethodArg::Kalman => {
            let result = match stage.kind {
                ProblemKind::State => restrict::restrict_psd(&state, &spec, opts.seed),
                ProblemKind::DiagonalPovm => {
                    restrict::restrict_orthant(&state, &spec, Schedule::SmallestFirst)
                }
            }
            .map_err(|e| numeric(format!("restriction: {e}")))?;
            (
                result.m2_ml,
                result.x_ml,
                result.rho_ml,
                Some(result.state),
                Some(result.iterations),
                Some(result.converged),
            )
        }
    };
    let gamma_phys = confidence::gamma_phys(gamma, Some(m2_ml.sqrt()));
    let within_region = m2_ml <= gamma;
    let (ml_diagonals, rho_ml_json) = match stage.kind {
        ProblemKind::State => (None, rho_ml.as_ref().map(CMatrix::from_hermitian)),
        ProblemKind::DiagonalPovm => (
            Some(regularize::element_diagonals(
                &x_ml,
                stage.elements.unwrap_or(0),
                stage.levels.unwrap_or(0),
            )),
            None,
        ),
    };
    let (restricted_mu, restricted_sigma, restricted_mean, restricted_diagonals) =
        match &restricted {
            None => (None, None, None, None),
            Some(rs) => {
                let mean = rs.mean_vector();
                let (mm, dd) = match stage.kind {
                    ProblemKind::State => (
                        Some(CMatrix::from_hermitian(&rs.mean_matrix().map_err(|e| {
                            numeric(format!("restricted mean: {e}"))
                        })?)),
                        None,
                    ),
                    ProblemKind::DiagonalPovm => (
                        None,
                        Some(regularize::element_diagonals(
                            &mean,
                            stage.elements.unwrap_or(0),
                            stage.levels.unwrap_or(0),
                        )),
                    ),
                };
                (
                    Some(CVector::from_dvector(rs.mu_tilde())),
                    Some(CMatrix::from_dmatrix(rs.sigma_tilde())),
                    mm,
                    dd,
                )
            }
        };
    report.restrict = Some(RestrictStage {
        method: match method {
            MethodArg::Simple => "simple".into(),
            MethodArg::Kalman => "kalman".into(),
        },
        m2_ml,
        gamma,
        gamma_phys,
        within_region,
        x_ml: CVector::from_dvector(&x_ml),
        rho_ml: rho_ml_json,
        ml_diagonals,
        restricted_mu_tilde: restricted_mu,
        restricted_sigma_tilde: restricted_sigma,
        restricted_mean_matrix: restricted_mean,
        restricted_diagonals,
        iterations,
        converged,
        epsilon,
        seed: opts.seed,
    });
    jsonio::write_json(report_path, &report)?;
    if !within_region {
        return Err(CliError::Diagnostic { m2_ml, gamma });
    }
    println!(
        "{}: restricted (M^2_ML = {m2_ml:.4} <= gamma = {gamma:.4}, gamma_phys = {gamma_phys:.4})",
        report_path.display()
    );
    Ok(())
}

pub fn cmd_regularize(report_path: &Path, cost: CostArg, opts: &GlobalOpts) -> Result<(), CliError> {
    let _ = opts;
    let mut report: Report = jsonio::read_json(report_path)?;
    let stage = report.reconstruct.clone().ok_or_else(|| CliError::Missing {
        message: format!(
            "{}: no reconstruct stage; run `kftomo reconstruct` first",
            report_path.display()
        ),
    })?;
    let restrict_stage = report.restrict.clone().ok_or_else(|| CliError::Missing {
        message: format!(
            "{}: no restrict stage; run `kftomo restrict` first",
            report_path.display()
        ),
    })?;
    if report.regularize.is_some() {
        println!(
            "{}: regularize stage already present",
            report_path.display()
        );
        return Ok(());
    }
    let state = rebuild_state(&stage)?;
    let spec = physical_spec(&stage, state.constraints());
    let functional = match (cost, stage.kind) {
        (CostArg::Smoothness, ProblemKind::DiagonalPovm) => CostFunctional::Smoothness {
            elements: stage.elements.unwrap_or(0),
            levels: stage.levels.unwrap_or(0),
        },
        (CostArg::Entropy, ProblemKind::State) => CostFunctional::NegEntropy {
            dim: stage.dimension.unwrap_or(0),
        },
        (CostArg::Smoothness, ProblemKind::State) => {
            return Err(invalid(
                "smoothness cost requires a diagonal element family; this is a state report"
                    .into(),
            ))
        }
        (CostArg::Entropy, ProblemKind::DiagonalPovm) => {
            return Err(invalid(
                "entropy cost requires a state report; this is a diagonal element family".into(),
            ))
        }
    };
    let gamma_phys = restrict_stage.gamma_phys;
    let x_ml = restrict_stage
        .x_ml
        .to_dvector()
        .map_err(|e| invalid(format!("stored ML point: {e}")))?;
    let cs = state.constraints();
    let cost_at_ml = functional.value(&cs.to_tilde(&x_ml), cs);
    let solution = match regularize::regularized_solution(&state, &spec, &functional, gamma_phys) {
        Ok(s) => s,
        Err(regularize::RegularizeError::EmptyRegion { m2_ml, gamma_phys }) => {
            return Err(CliError::Missing {
                message: format!(
                    "physical confidence region is empty (M^2_ML = {m2_ml:.4} > gamma_phys = {gamma_phys:.4}); nothing to regularize"
                ),
            })
        }
        Err(e) => return Err(numeric(format!("regularization: {e}"))),
    };
    let (solution_matrix, solution_diagonals) = match stage.kind {
        ProblemKind::State => (
            solution.rho.as_ref().map(CMatrix::from_hermitian),
            None,
        ),
        ProblemKind::DiagonalPovm => (
            None,
            Some(regularize::element_diagonals(
                &solution.x_ambient,
                stage.elements.unwrap_or(0),
                stage.levels.unwrap_or(0),
            )),
        ),
    };
    report.regularize = Some(RegularizeStage {
        cost: match cost {
            CostArg::Smoothness => "smoothness".into(),
            CostArg::Entropy => "entropy".into(),
        },
        cost_at_ml,
        cost_after: solution.cost_value,
        m2: solution.m2,
        gamma_phys,
        solution_matrix,
        solution_diagonals,
        solution_ambient: CVector::from_dvector(&solution.x_ambient),
        iterations: solution.iterations,
        kkt_residual: solution.kkt_residual,
    });
    jsonio::write_json(report_path, &report)?;
    println!(
        "{}: regularized (cost {:.6} -> {:.6}, M^2 = {:.4} <= gamma_phys = {gamma_phys:.4})",
        report_path.display(),
        cost_at_ml,
        solution.cost_value,
        solution.m2
    );
    Ok(())
}

pub fn cmd_report(
    report_path: &Path,
    slice: Option<&str>,
    errorbars: bool,
    opts: &GlobalOpts,
) -> Result<(), CliError> {
    let report: Report = jsonio::read_json(report_path)?;
    let stage = report.reconstruct.clone().ok_or_else(|| {
        invalid(format!(
            "{}: no reconstruct stage; run `kftomo reconstruct` first",
            report_path.display()
        ))
    })?;
    if slice.is_none() && !errorbars {
        return Err(invalid(
            "choose an output: --errorbars or --slice \"i,j\"".into(),
        ));
    }
    let state = rebuild_state(&stage)?;

    if errorbars {
        let out = opts
            .output
            .clone()
            .unwrap_or_else(|| jsonio::derived_path(report_path, "errorbars.csv"));
        let mean = state.mean_vector();
        let stddev = confidence::marginal_stddevs(&state);
        let mut csv = String::new();
        match stage.kind {
            ProblemKind::DiagonalPovm => {
                let elements = stage.elements.unwrap_or(0);
                let levels = stage.levels.unwrap_or(0);
                csv.push_str("element,level,mean,stddev\n");
                for e in 0..elements {
                    for i in 0..levels {
                        let idx = e * levels + i;
                        csv.push_str(&format!(
                            "{e},{i},{:.17e},{:.17e}\n",
                            mean[idx].re, stddev[idx]
                        ));
                    }
                }
            }
            ProblemKind::State => {
                let d = stage.dimension.unwrap_or(0);
                csv.push_str("row,col,mean_re,mean_im,stddev\n");
                for row in 0..d {
                    for col in 0..d {
                        let idx = col * d + row;
                        csv.push_str(&format!(
                            "{row},{col},{:.17e},{:.17e},{:.17e}\n",
                            mean[idx].re, mean[idx].im, stddev[idx]
                        ));
                    }
                }
            }
        }
        write_text(&out, &csv)?;
        println!("{}: wrote error bars", out.display());
    }

    if let Some(pair) = slice {
        if stage.kind != ProblemKind::State {
            return Err(invalid(
                "--slice requires a state report (eigenprojector construction)".into(),
            ));
        }
        let (i, j) = parse_slice_arg(pair)?;
        let out = opts
            .output
            .clone()
            .unwrap_or_else(|| jsonio::derived_path(report_path, "slice.csv"));
        let csv = slice_csv(&state, i, j)?;
        write_text(&out, &csv)?;
        println!("{}: wrote slice contours", out.display());
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn parse_slice_arg(arg: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = arg.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(invalid(format!(
            "--slice expects two eigenvector indices like \"0,1\", got {arg:?}"
        )));
    }
    let i = parts[0]
        .parse::<usize>()
        .map_err(|_| invalid(format!("--slice index {:?} is not an integer", parts[0])))?;
    let j = parts[1]
        .parse::<usize>()
        .map_err(|_| invalid(format!("--slice index {:?} is not an integer", parts[1])))?;
    if i == j {
        return Err(invalid("--slice needs two distinct indices".into()));
    }
    Ok((i, j))
}

/// Confidence contours (50% and 95%) of the posterior projected onto the
/// plane of two eigenprojector expectation values. Indices count the mean's
/// eigenvalues in ascending order, so "0,1" picks the two smallest.
fn slice_csv(state: &GaussianState, i: usize, j: usize) -> Result<String, CliError> {
    let mean = state
        .mean_matrix()
        .map_err(|e| numeric(format!("posterior mean: {e}")))?;
    let d = mean.dim();
    if i >= d || j >= d {
        return Err(invalid(format!(
            "--slice indices must be below the dimension {d}"
        )));
    }
    let m = mean.as_matrix();
    let sym = (m + m.adjoint()).map(|z| z * 0.5);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let projector = |idx: usize| -> HermitianMatrix {
        let v = eig.eigenvectors.column(order[idx]).clone_owned();
        HermitianMatrix::new(&v * v.adjoint()).expect("projector is Hermitian")
    };
    let pa = projector(i);
    let pb = projector(j);
    let cs = state.constraints();
    let a_tilde = cs.x1().adjoint() * repr::vec_matrix(pa.as_matrix());
    let b_tilde = cs.x1().adjoint() * repr::vec_matrix(pb.as_matrix());
    let mean_vec = state.mean_vector();
    let mean_a = repr::vec_matrix(pa.as_matrix()).dotc(&mean_vec).re;
    let mean_b = repr::vec_matrix(pb.as_matrix()).dotc(&mean_vec).re;
    let sigma = state.sigma_tilde();
    let var_a = a_tilde.dotc(&(sigma * &a_tilde)).re.max(0.0);
    let var_b = b_tilde.dotc(&(sigma * &b_tilde)).re.max(0.0);
    let cov_ab = a_tilde.dotc(&(sigma * &b_tilde)).re;
    // 2x2 Cholesky factor of the marginal covariance.
    let l11 = var_a.sqrt();
    let l21 = if l11 > 0.0 { cov_ab / l11 } else { 0.0 };
    let l22 = (var_b - l21 * l21).max(0.0).sqrt();
    let mut csv = String::from("contour,theta,x,y\n");
    for (label, q) in [("50", 0.5), ("95", 0.95)] {
        let r = stats::chi2_quantile(q, 2).sqrt();
        let points = 128;
        for t in 0..=points {
            let theta = 2.0 * std::f64::consts::PI * t as f64 / points as f64;
            let (c, s) = (theta.cos(), theta.sin());
            let x = mean_a + r * l11 * c;
            let y = mean_b + r * (l21 * c + l22 * s);
            csv.push_str(&format!("{label},{theta:.6},{x:.17e},{y:.17e}\n"));
        }
    }
    Ok(csv)
}
