//! Acceptance suite: one test per advertised guarantee, each printing a
//! single pass/fail line. Every numeric target is checked against an
//! independent oracle computed inside this file (quadrature, Monte Carlo,
//! grid search) rather than against the library's own formulas.

use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde_json::{json, Value};

use kftomo::confidence;
use kftomo::kalman::{self, GaussianState, MeasurementSetting};
use kftomo::regularize;
use kftomo::repr::{self, ConstraintSubspaces, HermitianMatrix};
use kftomo::restrict::{self, PhysicalKind, PhysicalSetSpec, Schedule};
use kftomo::simulate::{self, SourceMode, TrueModel};
use kftomo::stats::{self, AcquisitionMode, MeasurementMoments, OutcomeRecord};

const ALPHA0: f64 = 1.6448536269514722;

macro_rules! ck {
    ($fails:expr, $cond:expr, $($msg:tt)+) => {
        if !($cond) {
            $fails.push(format!($($msg)+));
        }
    };
}

fn conclude(number: u32, name: &str, fails: &[String]) {
    if fails.is_empty() {
        println!("criterion {number:02} {name}: PASS");
    } else {
        println!("criterion {number:02} {name}: FAIL");
        for f in fails {
            println!("  - {f}");
        }
        panic!("criterion {number:02} {name}: {}", fails.join("; "));
    }
}

// ---------------------------------------------------------------------------
// Shared numeric helpers.
// ---------------------------------------------------------------------------

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn cr(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn hermitized(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (m + m.adjoint()).map(|z| z * 0.5)
}

fn hpd_inverse(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    Cholesky::new(hermitized(m))
        .expect("matrix must be positive definite")
        .inverse()
}

fn std_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(1e-300);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn rel_dev_v(a: &DVector<Complex64>, b: &DVector<Complex64>) -> f64 {
    (a - b).norm() / (1.0 + b.norm())
}

fn rel_dev_m(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
    (a - b).norm() / (1.0 + b.norm())
}

// ---------------------------------------------------------------------------
// Gauss-Legendre quadrature on [0, 1]; exact for polynomials of degree
// 2n - 1, which covers every Beta-type integrand used below.
// ---------------------------------------------------------------------------

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        nodes[i] = 0.5 * (x + 1.0);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// `int_0^1 x^a (1-x)^b dx` by quadrature (exact: polynomial integrand).
fn poly_integral(a: i32, b: i32, gl: &(Vec<f64>, Vec<f64>)) -> f64 {
    gl.0.iter()
        .zip(&gl.1)
        .map(|(&x, &w)| w * x.powi(a) * (1.0 - x).powi(b))
        .sum()
}

/// Posterior mean and covariance of outcome probabilities under a flat prior
/// on the simplex, computed by numerical integration only. Marginals reduce
/// to Beta integrals; pair moments separate after the substitution
/// `q = (1 - p) t`.
fn simplex_quadrature_moments(f: &[u64], gl: &(Vec<f64>, Vec<f64>)) -> (DVector<f64>, DMatrix<f64>) {
    let d = f.len();
    let n: u64 = f.iter().sum();
    let mut mean = DVector::zeros(d);
    let mut second_diag = DVector::zeros(d);
    for i in 0..d {
        let a = f[i] as i32;
        let b = (n - f[i]) as i32 + d as i32 - 2;
        let z = poly_integral(a, b, gl);
        mean[i] = poly_integral(a + 1, b, gl) / z;
        second_diag[i] = poly_integral(a + 2, b, gl) / z;
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..d {
        cov[(i, i)] = second_diag[i] - mean[i] * mean[i];
        for j in (i + 1)..d {
            let e_pq = if d == 2 {
                mean[i] - second_diag[i]
            } else {
                let fi = f[i] as i32;
                let fj = f[j] as i32;
                let cc = (n - f[i] - f[j]) as i32 + d as i32 - 2;
                let p_part = poly_integral(fi + 1, fj + cc + 1, gl) / poly_integral(fi, fj + cc, gl);
                let t_part = poly_integral(fj + 1, cc - 1, gl) / poly_integral(fj, cc - 1, gl);
                p_part * t_part
            };
            let v = e_pq - mean[i] * mean[j];
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

fn compositions(d: usize, n: u64) -> Vec<Vec<u64>> {
    fn rec(idx: usize, remaining: u64, cur: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if idx + 1 == cur.len() {
            cur[idx] = remaining;
            out.push(cur.clone());
            return;
        }
        for v in 0..=remaining {
            cur[idx] = v;
            rec(idx + 1, remaining - v, cur, out);
        }
    }
    let mut out = Vec::new();
    let mut cur = vec![0u64; d];
    rec(0, n, &mut cur, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Qubit construction helpers.
// ---------------------------------------------------------------------------

fn pauli_matrices() -> [DMatrix<Complex64>; 3] {
    [
        DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]),
        DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)]),
        DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)]),
    ]
}

fn qubit_constraints() -> Arc<ConstraintSubspaces> {
    let rho0 =
        HermitianMatrix::from_real(&DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5])).unwrap();
    Arc::new(repr::standard_state_constraints(2, &rho0).unwrap())
}

fn bloch_matrix(r: [f64; 3]) -> DMatrix<Complex64> {
    let [sx, sy, sz] = pauli_matrices();
    let id = DMatrix::<Complex64>::identity(2, 2);
    (id + sx * cr(r[0]) + sy * cr(r[1]) + sz * cr(r[2])) * cr(0.5)
}

fn random_spd(n: usize, scale: f64, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| std_normal(rng));
    let mut s = a.transpose() * &a * (scale / n as f64);
    for i in 0..n {
        s[(i, i)] += 0.1 * scale;
    }
    s
}

/// A posterior with the Hermitian real structure produced by actual updates:
/// the covariance is a real combination of Pauli-direction dyads.
fn random_qubit_state(
    cs: &Arc<ConstraintSubspaces>,
    r: [f64; 3],
    var_scale: f64,
    rng: &mut ChaCha12Rng,
) -> GaussianState {
    let mu = cs.to_tilde(&repr::vec_matrix(&bloch_matrix(r)));
    let dirs = pauli_matrices().map(|s| cs.x1().adjoint() * repr::vec_matrix(&s));
    let coeff = random_spd(3, var_scale, rng);
    let mut sigma = DMatrix::<Complex64>::zeros(3, 3);
    for i in 0..3 {
        for j in 0..3 {
            sigma += (&dirs[i] * dirs[j].adjoint()) * cr(0.5 * coeff[(i, j)]);
        }
    }
    GaussianState::from_parts(mu, hermitized(&sigma), Arc::clone(cs), 1.0).unwrap()
}

fn random_bloch(span: f64, rng: &mut ChaCha12Rng) -> [f64; 3] {
    [
        (rng.random::<f64>() * 2.0 - 1.0) * span,
        (rng.random::<f64>() * 2.0 - 1.0) * span,
        (rng.random::<f64>() * 2.0 - 1.0) * span,
    ]
}

/// Random POVM: raw positive matrices conjugated by the inverse square root
/// of their sum, so the family sums to the identity exactly.
fn random_povm(dim: usize, k: usize, rng: &mut ChaCha12Rng) -> Vec<HermitianMatrix> {
    let mut raw = Vec::with_capacity(k);
    let mut sum = DMatrix::<Complex64>::zeros(dim, dim);
    for _ in 0..k {
        let b = DMatrix::from_fn(dim, dim, |_, _| c(std_normal(rng), std_normal(rng)));
        let a = hermitized(&(b.adjoint() * &b)) + DMatrix::<Complex64>::identity(dim, dim) * cr(0.05);
        sum += &a;
        raw.push(a);
    }
    let eig = sum.symmetric_eigen();
    let mut w = DMatrix::<Complex64>::zeros(dim, dim);
    for j in 0..dim {
        let v = eig.eigenvectors.column(j).clone_owned();
        w += (&v * v.adjoint()) * cr(1.0 / eig.eigenvalues[j].sqrt());
    }
    raw.into_iter()
        .map(|a| HermitianMatrix::new(hermitized(&(&w * a * &w))).unwrap())
        .collect()
}

/// Three two-outcome settings `(1 +/- u sigma_i u^*)/2`, optionally rotated
/// by Haar unitaries.
fn pauli_pair_settings(
    cs: &Arc<ConstraintSubspaces>,
    rng: Option<&mut ChaCha12Rng>,
) -> Vec<MeasurementSetting> {
    let id = DMatrix::<Complex64>::identity(2, 2);
    let mut rng = rng;
    pauli_matrices()
        .into_iter()
        .map(|s| {
            let rotated = match rng.as_deref_mut() {
                Some(r) => {
                    let u = restrict::haar_unitary(2, r);
                    &u * s * u.adjoint()
                }
                None => s,
            };
            let plus = HermitianMatrix::new(hermitized(&((&id + &rotated) * cr(0.5)))).unwrap();
            let minus = HermitianMatrix::new(hermitized(&((&id - &rotated) * cr(0.5)))).unwrap();
            MeasurementSetting::from_povm(vec![plus, minus], cs).unwrap()
        })
        .collect()
}

/// One six-element scalar-complete setting: three Haar-rotated Pauli bases,
/// so the element sum is exactly three times the identity.
fn rotated_basis_povm(rng: &mut ChaCha12Rng) -> Vec<HermitianMatrix> {
    let id = DMatrix::<Complex64>::identity(2, 2);
    let mut povm = Vec::with_capacity(6);
    for s in pauli_matrices() {
        let u = restrict::haar_unitary(2, rng);
        let rotated = &u * s * u.adjoint();
        povm.push(HermitianMatrix::new(hermitized(&((&id + &rotated) * cr(0.5)))).unwrap());
        povm.push(HermitianMatrix::new(hermitized(&((&id - &rotated) * cr(0.5)))).unwrap());
    }
    povm
}

// ---------------------------------------------------------------------------
// CLI helpers.
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_kftomo"))
        .args(args)
        .output()
        .expect("failed to spawn kftomo");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kftomo-acceptance-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_json_file(path: &PathBuf, value: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn read_json_file(path: &PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn cm_json(m: &DMatrix<Complex64>) -> Value {
    let re: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].re).collect())
        .collect();
    let im: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].im).collect())
        .collect();
    json!({ "re": re, "im": im })
}

fn cm_from_json(v: &Value) -> DMatrix<Complex64> {
    let re = v["re"].as_array().unwrap();
    let rows = re.len();
    let cols = re[0].as_array().unwrap().len();
    DMatrix::from_fn(rows, cols, |i, j| {
        c(
            v["re"][i][j].as_f64().unwrap(),
            v["im"][i][j].as_f64().unwrap(),
        )
    })
}

fn f64_rows(v: &Value) -> Vec<Vec<f64>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|row| {
            row.as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_f64().unwrap())
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Criterion 1: Dirichlet moments against simplex quadrature, and the
// Penrose identities for the closed-form covariance pseudoinverse.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_dirichlet_oracle_equivalence() {
    let start = Instant::now();
    let mut fails = Vec::new();
    let gl = gauss_legendre_unit(64);

    // Quadrature self-checks against analytically trivial integrals.
    let q10 = poly_integral(10, 0, &gl);
    ck!(fails, (q10 - 1.0 / 11.0).abs() <= 1e-14, "quadrature check int x^10 = {q10}");
    let q34 = poly_integral(3, 4, &gl);
    ck!(fails, (q34 - 1.0 / 280.0).abs() <= 1e-14, "quadrature check B(4,5) = {q34}");

    let mut worst_mean = 0.0f64;
    let mut worst_cov = 0.0f64;
    let mut worst_penrose = 0.0f64;
    let mut cases = 0usize;
    let mut check_case = |f: &[u64]| {
        let n: u64 = f.iter().sum();
        let rec = OutcomeRecord::pulsed(f.to_vec(), n).unwrap();
        let mm = stats::dirichlet_moments(&rec);
        let (mean_o, cov_o) = simplex_quadrature_moments(f, &gl);
        worst_mean = worst_mean.max((&mm.mean - &mean_o).amax());
        worst_cov = worst_cov.max((&mm.covariance - &cov_o).amax());

        let s = &mm.covariance;
        let sp = stats::dirichlet_cov_mp_inverse(&rec);
        let ss = s * &sp;
        let ps = &sp * s;
        let r1 = (&ss * s - s).norm() / s.norm();
        let r2 = (&ps * &sp - &sp).norm() / sp.norm();
        let r3 = (&ss - ss.transpose()).norm() / (1.0 + ss.norm());
        let r4 = (&ps - ps.transpose()).norm() / (1.0 + ps.norm());
        worst_penrose = worst_penrose.max(r1).max(r2).max(r3).max(r4);
        cases += 1;
    };

    for d in 2..=4usize {
        for n in 0..=12u64 {
            for f in compositions(d, n) {
                check_case(&f);
            }
        }
    }
    let mut rng = simulate::seeded_rng(101);
    for _ in 0..100 {
        let d = rng.random_range(2..=6usize);
        let n = rng.random_range(0..=30u64);
        let mut f = vec![0u64; d];
        for _ in 0..n {
            let idx = rng.random_range(0..d);
            f[idx] += 1;
        }
        check_case(&f);
    }

    ck!(fails, cases > 2300, "expected exhaustive+random coverage, got {cases} cases");
    ck!(fails, worst_mean <= 1e-8, "mean deviates from quadrature by {worst_mean:.3e}");
    ck!(fails, worst_cov <= 1e-8, "covariance deviates from quadrature by {worst_cov:.3e}");
    ck!(fails, worst_penrose <= 1e-8, "worst Penrose residual {worst_penrose:.3e}");
    let elapsed = start.elapsed().as_secs_f64();
    ck!(fails, elapsed < 30.0, "runtime {elapsed:.1}s exceeds 30s");
    conclude(1, "dirichlet-oracle-equivalence", &fails);
}

// ---------------------------------------------------------------------------
// Criterion 2: Kalman update algebra on random qubit instances.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_kalman_update_algebra() {
    let start = Instant::now();
    let mut fails = Vec::new();
    let cs = qubit_constraints();
    let id_setting =
        MeasurementSetting::from_matrix(DMatrix::<Complex64>::identity(4, 4), &cs).unwrap();
    let mut rng = simulate::seeded_rng(202);

    let mut worst_parallel = 0.0f64;
    let mut worst_forms = 0.0f64;
    let mut worst_commute = 0.0f64;
    for _ in 0..50 {
        let state = random_qubit_state(&cs, random_bloch(0.6, &mut rng), 0.05, &mut rng);

        // (a) identity outcome map: posterior precision is the sum of the
        // prior precision and the measurement precision.
        let theta_r = random_spd(4, 0.5, &mut rng);
        let z_r = DVector::from_fn(4, |_, _| rng.random::<f64>());
        let mm = MeasurementMoments {
            mean: z_r.clone(),
            covariance: theta_r.clone(),
            scale: 1.0,
        };
        let post =
            kalman::kalman_update_with_moments(&state, &id_setting, &mm, AcquisitionMode::Cw)
                .unwrap();
        let z1 = id_setting.z1();
        let h_tilde = z1.adjoint() * id_setting.h() * cs.x1();
        let theta_tilde = z1.adjoint() * theta_r.map(|x| cr(x)) * z1;
        let z_tilde = z1.adjoint() * (z_r.map(|x| cr(x)) - id_setting.z0());
        let prior_prec = hpd_inverse(state.sigma_tilde());
        let post_prec = hpd_inverse(post.sigma_tilde());
        let theta_prec = hpd_inverse(&theta_tilde);
        let rhs = &prior_prec + h_tilde.adjoint() * &theta_prec * &h_tilde;
        worst_parallel = worst_parallel.max(rel_dev_m(&post_prec, &rhs));
        let lhs_mu = &post_prec * post.mu_tilde();
        let rhs_mu = &prior_prec * state.mu_tilde() + h_tilde.adjoint() * &theta_prec * &z_tilde;
        worst_parallel = worst_parallel.max(rel_dev_v(&lhs_mu, &rhs_mu));

        // (b) tilde-coordinate update vs the projector-form update.
        let setting = MeasurementSetting::from_povm(random_povm(2, 3, &mut rng), &cs).unwrap();
        let counts: Vec<u64> = (0..3).map(|_| rng.random_range(10..400u64)).collect();
        let runs = counts.iter().sum();
        let rec = OutcomeRecord::pulsed(counts, runs).unwrap();
        let tilde_post = kalman::kalman_update(&state, &setting, &rec).unwrap();
        let (proj_mean, proj_cov) = kalman::kalman_update_projector_form(
            &state.mean_vector(),
            &state.covariance_full(),
            &setting,
            &rec,
        )
        .unwrap();
        worst_forms = worst_forms.max(rel_dev_v(&tilde_post.mean_vector(), &proj_mean));
        worst_forms = worst_forms.max(rel_dev_m(&tilde_post.covariance_full(), &proj_cov));

        // (c) update order commutativity.
        let setting_b = MeasurementSetting::from_povm(random_povm(2, 4, &mut rng), &cs).unwrap();
        let counts_b: Vec<u64> = (0..4).map(|_| rng.random_range(10..400u64)).collect();
        let runs_b = counts_b.iter().sum();
        let rec_b = OutcomeRecord::pulsed(counts_b, runs_b).unwrap();
        let ab = kalman::kalman_update(
            &kalman::kalman_update(&state, &setting, &rec).unwrap(),
            &setting_b,
            &rec_b,
        )
        .unwrap();
        let ba = kalman::kalman_update(
            &kalman::kalman_update(&state, &setting_b, &rec_b).unwrap(),
            &setting,
            &rec,
        )
        .unwrap();
        worst_commute = worst_commute.max(rel_dev_v(ab.mu_tilde(), ba.mu_tilde()));
        worst_commute = worst_commute.max(rel_dev_m(ab.sigma_tilde(), ba.sigma_tilde()));
    }

    ck!(fails, worst_parallel <= 1e-10, "parallel-sum residual {worst_parallel:.3e}");
    ck!(fails, worst_forms <= 1e-8, "tilde vs projector residual {worst_forms:.3e}");
    ck!(fails, worst_commute <= 1e-9, "commutativity residual {worst_commute:.3e}");
    let elapsed = start.elapsed().as_secs_f64();
    ck!(fails, elapsed < 10.0, "runtime {elapsed:.1}s exceeds 10s");
    conclude(2, "kalman-update-algebra", &fails);
}

// ---------------------------------------------------------------------------
// Criterion 3: dummy-prior insertion and correction round trip.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_prior_round_trip() {
    let start = Instant::now();
    let mut fails = Vec::new();
    let cs = qubit_constraints();
    let mut rng = simulate::seeded_rng(303);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let setting = MeasurementSetting::from_povm(rotated_basis_povm(&mut rng), &cs).unwrap();
        ck!(fails, setting.is_scalar_complete(), "rotated basis family must be scalar-complete");
        let counts: Vec<u64> = (0..6).map(|_| rng.random_range(50..2000u64)).collect();
        let rec = OutcomeRecord::cw(counts).unwrap();

        let single = kalman::single_shot_posterior(&setting, &rec).unwrap();
        let b = 1e6;
        let prior = kalman::init_prior(&cs, b);
        let updated = kalman::kalman_update(&prior, &setting, &rec).unwrap();
        let corrected = kalman::correct_prior(&updated, b, None).unwrap();

        ck!(fails, !corrected.prior_b().is_finite(), "corrected prior width must be infinite");
        worst = worst.max(rel_dev_v(corrected.mu_tilde(), single.mu_tilde()));
        worst = worst.max(rel_dev_m(corrected.sigma_tilde(), single.sigma_tilde()));
    }
    ck!(fails, worst <= 1e-5, "round-trip deviation {worst:.3e} exceeds 1e-5");
    let elapsed = start.elapsed().as_secs_f64();
    ck!(fails, elapsed < 10.0, "runtime {elapsed:.1}s exceeds 10s");
    conclude(3, "prior-round-trip", &fails);
}

// ---------------------------------------------------------------------------
// Criterion 4: frequentist coverage of the 95% confidence region.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_coverage_calibration() {
    let start = Instant::now();
    let mut fails = Vec::new();
    let cs = qubit_constraints();
    let settings = pauli_pair_settings(&cs, None);
    let rho = HermitianMatrix::new(hermitized(&bloch_matrix([0.3, 0.2, 0.4]))).unwrap();
    let model = TrueModel::new(rho, settings, SourceMode::Pulsed { runs: 1000 }).unwrap();
    let trials = 500u64;
    let result = simulate::coverage_experiment(&model, trials, 2026).unwrap();

    ck!(fails, result.nu == 3, "expected 3 degrees of freedom, got {}", result.nu);
    ck!(fails, !result.empty, "coverage experiment returned empty");
    ck!(
        fails,
        result.coverage >= 0.93 && result.coverage <= 0.985,
        "coverage {:.4} outside [0.93, 0.985]",
        result.coverage
    );
    let nu = 3.0f64;
    let mean_m2: f64 = result.m2_samples.iter().sum::<f64>() / result.m2_samples.len() as f64;
    let allowance = 3.0 * (2.0 * nu / trials as f64).sqrt() * 1.3f64.sqrt();
    ck!(
        fails,
        (mean_m2 - nu).abs() <= allowance,
        "mean M^2 {mean_m2:.4} deviates from {nu} by more than {allowance:.4}"
    );
    let elapsed = start.elapsed().as_secs_f64();
    ck!(fails, elapsed < 60.0, "runtime {elapsed:.1}s exceeds 60s");
    conclude(4, "coverage-calibration", &fails);
}

// ---------------------------------------------------------------------------
// Criterion 5: the mode always lies within the advertised Mahalanobis bound.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_mode_within_region() {
    let mut fails = Vec::new();
    let mut rng = simulate::seeded_rng(505);
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let d = rng.random_range(2..=6usize);
        let n = rng.random_range(1..=200u64);
        let weights: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = weights.iter().sum();
        let mut f = vec![0u64; d];
        for _ in 0..n {
            let mut u = rng.random::<f64>() * total;
            let mut idx = d - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            f[idx] += 1;
        }
        let rec = OutcomeRecord::pulsed(f.clone(), n).unwrap();
        let mm = stats::dirichlet_moments(&rec);
        let sp = stats::dirichlet_cov_mp_inverse(&rec);
        let mode = DVector::from_iterator(d, f.iter().map(|&v| v as f64 / n as f64));
        let delta = &mode - &mm.mean;
        let m2 = delta.dot(&(&sp * &delta));
        let bound = (n as f64 + d as f64 + 1.0) * (d as f64 - 1.0) / (n as f64 + 1.0);
        worst_excess = worst_excess.max(m2 - bound);
    }
    ck!(
        fails,
        worst_excess <= 1e-9,
        "mode exceeded the bound by {worst_excess:.3e}"
    );
    conclude(5, "mode-within-region", &fails);
}

// ---------------------------------------------------------------------------
// Criterion 6: Wald statistic moments against Monte Carlo, and the location
// of the standard deviation peak.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_wald_moment_statistics() {
    let mut fails = Vec::new();
    let n_runs = 100u64;
    let (mu_z, var_z) = stats::wald_moments(&[0.5, 0.5], n_runs);
    let sigma_z = var_z.sqrt();

    let draws = 100_000usize;
    let mut rng = simulate::seeded_rng(606);
    let p_true = DVector::from_vec(vec![0.5, 0.5]);
    let mut zs = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut f0 = 0u64;
        for _ in 0..n_runs {
            if rng.random::<f64>() < 0.5 {
                f0 += 1;
            }
        }
        let rec = OutcomeRecord::pulsed(vec![f0, n_runs - f0], n_runs).unwrap();
        let mm = stats::dirichlet_moments(&rec);
        let sp = stats::dirichlet_cov_mp_inverse(&rec);
        let delta = &p_true - &mm.mean;
        zs.push(delta.dot(&(&sp * &delta)));
    }
    let nf = draws as f64;
    let mc_mean: f64 = zs.iter().sum::<f64>() / nf;
    let mc_var: f64 = zs.iter().map(|z| (z - mc_mean).powi(2)).sum::<f64>() / nf;
    let mc_sd = mc_var.sqrt();
    let m4: f64 = zs.iter().map(|z| (z - mc_mean).powi(4)).sum::<f64>() / nf;
    let se_mean = mc_sd / nf.sqrt();
    let se_sd = ((m4 - mc_var * mc_var) / nf).sqrt() / (2.0 * mc_sd);

    ck!(
        fails,
        (mc_mean - mu_z).abs() <= 4.0 * se_mean,
        "MC mean {mc_mean:.5} vs predicted {mu_z:.5} (4se = {:.5})",
        4.0 * se_mean
    );
    ck!(
        fails,
        (mc_sd - sigma_z).abs() <= 4.0 * se_sd,
        "MC sd {mc_sd:.5} vs predicted {sigma_z:.5} (4se = {:.5})",
        4.0 * se_sd
    );

    let mut best_p = 0.0;
    let mut best_sd = f64::NEG_INFINITY;
    for i in 1..=250 {
        let p = 0.002 * i as f64;
        let (_, v) = stats::wald_moments(&[p, 1.0 - p], n_runs);
        if v.sqrt() > best_sd {
            best_sd = v.sqrt();
            best_p = p;
        }
    }
    let peak = best_p * n_runs as f64;
    ck!(
        fails,
        (5.0..=10.0).contains(&peak),
        "sd peak at p*N = {peak:.2}, expected within [5, 10]"
    );
    conclude(6, "wald-moment-statistics", &fails);
}

// ---------------------------------------------------------------------------
// Criterion 7: orthant restriction on the reference two-dimensional
// instance, plus the truncated-normal approximation against a direct
// KL grid-search oracle.
// ---------------------------------------------------------------------------

/// Best approximation of the positive part of N(mu, sigma^2) by N(a0 s, s^2),
/// found by brute force: Simpson moments of the truncated density, then a
/// fine scan of the cross-entropy in s.
fn truncated_normal_oracle(mu: f64, sigma: f64, alpha0: f64) -> (f64, f64) {
    let hi = mu + 14.0 * sigma;
    let steps = 280_000usize; // even
    let h = (hi - 0.0) / steps as f64;
    let density = |x: f64| {
        let t = (x - mu) / sigma;
        (-0.5 * t * t).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for i in 0..=steps {
        let x = i as f64 * h;
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let fx = w * density(x);
        s0 += fx;
        s1 += fx * x;
        s2 += fx * x * x;
    }
    s0 *= h / 3.0;
    s1 *= h / 3.0;
    s2 *= h / 3.0;

    // Cross entropy against N(alpha0 s, s^2), constants dropped.
    let objective = |s: f64| {
        let m = alpha0 * s;
        -s0 * s.ln() - (s2 - 2.0 * m * s1 + m * m * s0) / (2.0 * s * s)
    };
    let mut best_s = 0.0;
    let mut best_v = f64::NEG_INFINITY;
    let mut s = 1e-3;
    while s <= 2.0 * sigma {
        let v = objective(s);
        if v > best_v {
            best_v = v;
            best_s = s;
        }
        s += 1e-4;
    }
    let mut fine_best = best_s;
    let mut fine_v = best_v;
    let mut t = best_s - 2e-4;
    while t <= best_s + 2e-4 {
        let v = objective(t);
        if v > fine_v {
            fine_v = v;
            fine_best = t;
        }
        t += 1e-7;
    }
    (alpha0 * fine_best, fine_best)
}

#[test]
fn criterion_07_restriction_fidelity() {
    let start = Instant::now();
    let mut fails = Vec::new();

    let cs = Arc::new(ConstraintSubspaces::unconstrained(2));
    let mu = DVector::from_vec(vec![cr(-1.0), cr(2.0)]);
    let sigma = DMatrix::from_row_slice(2, 2, &[cr(1.0), cr(-0.9), cr(-0.9), cr(1.0)]);
    let state = GaussianState::from_parts(mu, sigma, Arc::clone(&cs), 1.0).unwrap();
    let spec = PhysicalSetSpec::orthant_coordinates(&cs);
    ck!(
        fails,
        (spec.alpha0() - ALPHA0).abs() <= 1e-9,
        "threshold ratio {:.12} differs from {ALPHA0}",
        spec.alpha0()
    );
    let PhysicalKind::Orthant { directions, .. } = &spec.kind else {
        panic!("coordinate orthant spec expected");
    };

    for schedule in [Schedule::SmallestFirst, Schedule::FixedOrder] {
        let res = restrict::restrict_orthant(&state, &spec, schedule).unwrap();
        ck!(fails, res.converged, "restriction did not converge ({schedule:?})");
        for (i, dir) in directions.iter().enumerate() {
            let (m, v) = dir.marginal(&res.state);
            let ratio = m / v.sqrt();
            ck!(
                fails,
                ratio >= (1.0 - spec.epsilon) * 1.64485 - 1e-9,
                "marginal {i} ratio {ratio:.5} below target ({schedule:?})"
            );
        }
    }

    let (mt, st) = restrict::truncated_normal_approx(-1.0, 1.0, ALPHA0).unwrap();
    let (mo, so) = truncated_normal_oracle(-1.0, 1.0, ALPHA0);
    ck!(
        fails,
        (mt - mo).abs() <= 1e-4 && (st - so).abs() <= 1e-4,
        "truncated normal ({mt:.6}, {st:.6}) vs oracle ({mo:.6}, {so:.6})"
    );

    let elapsed = start.elapsed().as_secs_f64();
    ck!(fails, elapsed < 5.0, "runtime {elapsed:.1}s exceeds 5s");
    conclude(7, "restriction-fidelity", &fails);
}

// ---------------------------------------------------------------------------
// Criterion 8: closest physical state against a Bloch-ball grid search, and
// the physical confidence bound over restricted samples.
// ---------------------------------------------------------------------------

fn grid_search(
    quad: &impl Fn([f64; 3]) -> f64,
    center: [f64; 3],
    half: f64,
    step: f64,
) -> ([f64; 3], f64) {
    let mut best = (center, f64::INFINITY);
    let steps = (2.0 * half / step).round() as i64;
    for i in 0..=steps {
        for j in 0..=steps {
            for k in 0..=steps {
                let mut r = [
                    center[0] - half + i as f64 * step,
                    center[1] - half + j as f64 * step,
                    center[2] - half + k as f64 * step,
                ];
                let n2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
                if n2 > 1.0 {
                    let s = 1.0 / n2.sqrt();
                    r = [r[0] * s, r[1] * s, r[2] * s];
                }
                let v = quad(r);
                if v < best.1 {
                    best = (r, v);
                }
            }
        }
    }
    best
}

#[test]
fn criterion_08_maxlik_grid_and_bound() {
    let mut fails = Vec::new();
    let cs = qubit_constraints();
    let mut rng = simulate::seeded_rng(808);
    let spec = PhysicalSetSpec::psd_trace_one(2);
    let gamma = stats::chi2_quantile(0.95, 3);

    // Half Pauli directions: the tilde image of the Bloch parameterization.
    let v_dirs = pauli_matrices().map(|s| cs.x1().adjoint() * (repr::vec_matrix(&s) * cr(0.5)));
    // Orthonormal Pauli directions for covariance coordinates.
    let u_dirs = pauli_matrices().map(|s| {
        cs.x1().adjoint() * (repr::vec_matrix(&s) * cr(std::f64::consts::FRAC_1_SQRT_2))
    });

    let mut worst_grid = 0.0f64;
    let mut worst_quad_check = 0.0f64;
    let mut inside = 0usize;
    let mut total = 0usize;
    for trial in 0..50u64 {
        // Posterior mean at Bloch radius 0.9..1.5: the regime where the
        // physical boundary actually matters.
        let dir = {
            let g = [std_normal(&mut rng), std_normal(&mut rng), std_normal(&mut rng)];
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-9);
            [g[0] / n, g[1] / n, g[2] / n]
        };
        let radius = 0.9 + 0.6 * rng.random::<f64>();
        let r_mean = [dir[0] * radius, dir[1] * radius, dir[2] * radius];
        let state = random_qubit_state(&cs, r_mean, 0.02, &mut rng);

        let ml = restrict::maxlik_state(&state, &spec).unwrap();

        // Real quadratic form of M^2 over the Bloch ball.
        let sinv = hpd_inverse(state.sigma_tilde());
        let mut qq = [[0.0f64; 3]; 3];
        let mut bb = [0.0f64; 3];
        for i in 0..3 {
            bb[i] = (v_dirs[i].adjoint() * &sinv * state.mu_tilde())[(0, 0)].re;
            for j in 0..3 {
                qq[i][j] = (v_dirs[i].adjoint() * &sinv * &v_dirs[j])[(0, 0)].re;
            }
        }
        let cc = (state.mu_tilde().adjoint() * &sinv * state.mu_tilde())[(0, 0)].re;
        let quad = |r: [f64; 3]| -> f64 {
            let mut v = cc;
            for i in 0..3 {
                v -= 2.0 * bb[i] * r[i];
                for j in 0..3 {
                    v += qq[i][j] * r[i] * r[j];
                }
            }
            v
        };
        for _ in 0..5 {
            let r = random_bloch(1.0, &mut rng);
            let x = cs.to_tilde(&repr::vec_matrix(&bloch_matrix(r)));
            let direct = confidence::mahalanobis_sq_tilde(&state, &x).unwrap();
            let dev = (quad(r) - direct).abs() / (1.0 + direct);
            worst_quad_check = worst_quad_check.max(dev);
        }

        let (r1, _) = grid_search(&quad, [0.0; 3], 1.0, 0.04);
        let (r2, _) = grid_search(&quad, r1, 0.06, 0.008);
        let (r3, _) = grid_search(&quad, r2, 0.012, 0.002);
        let (_, grid_min) = grid_search(&quad, r3, 0.003, 0.0005);
        worst_grid = worst_grid.max((ml.m2 - grid_min).abs());
        ck!(
            fails,
            grid_min >= ml.m2 - 1e-6,
            "trial {trial}: grid found a better physical point ({grid_min:.6e} < {:.6e})",
            ml.m2
        );

        // Physical confidence bound over physical states inside the
        // restricted posterior's own confidence region: each such state
        // must also satisfy the inflated bound of the original posterior.
        let restricted = restrict::restrict_psd(&state, &spec, 900 + trial).unwrap();
        let gamma_phys = confidence::gamma_phys(gamma, Some(ml.m2.sqrt()));
        let sr = restricted.state.sigma_tilde().clone();
        let mut c_r = DMatrix::<f64>::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                c_r[(i, j)] = (u_dirs[i].adjoint() * &sr * &u_dirs[j])[(0, 0)].re;
            }
        }
        let mut rebuilt = DMatrix::<Complex64>::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                rebuilt += (&u_dirs[i] * u_dirs[j].adjoint()) * cr(c_r[(i, j)]);
            }
        }
        ck!(
            fails,
            rel_dev_m(&rebuilt, &sr) <= 1e-8,
            "trial {trial}: restricted covariance leaves the Hermitian span"
        );
        let mut c_j = c_r.clone();
        for i in 0..3 {
            c_j[(i, i)] += 1e-14 * (1.0 + c_r.trace());
        }
        let chol = Cholesky::new(c_j).expect("restricted covariance must be PSD");
        let l = chol.l();
        let mu_r = restricted.state.mu_tilde().clone();

        let mut kept = 0usize;
        let mut attempts = 0usize;
        while kept < 20 && attempts < 2000 {
            attempts += 1;
            let g = DVector::from_vec(vec![
                std_normal(&mut rng),
                std_normal(&mut rng),
                std_normal(&mut rng),
            ]);
            let xi = &l * g;
            let mut x = mu_r.clone();
            for i in 0..3 {
                x += &u_dirs[i] * cr(xi[i]);
            }
            let rho = repr::mat_vector(&cs.from_tilde(&x)).unwrap();
            let eigs = HermitianMatrix::new(hermitized(&rho)).unwrap().eigenvalues();
            if eigs[0] < -1e-10 {
                continue;
            }
            let m2_restricted = confidence::mahalanobis_sq_tilde(&restricted.state, &x).unwrap();
            if m2_restricted > gamma {
                continue;
            }
            kept += 1;
            total += 1;
            let m2 = confidence::mahalanobis_sq_tilde(&state, &x).unwrap();
            if m2 <= gamma_phys + 1e-9 {
                inside += 1;
            }
        }
        ck!(fails, kept == 20, "trial {trial}: only {kept} physical samples in {attempts} attempts");
    }

    ck!(fails, worst_quad_check <= 1e-9, "quadratic form check residual {worst_quad_check:.3e}");
    ck!(fails, worst_grid <= 1e-3, "worst grid deviation {worst_grid:.3e} exceeds 1e-3");
    ck!(fails, total == 1000, "expected 1000 physical samples, got {total}");
    let frac = inside as f64 / total as f64;
    ck!(
        fails,
        frac >= 0.99,
        "physical bound held for {inside}/{total} = {frac:.4} of draws, need >= 0.99"
    );
    conclude(8, "maxlik-grid-and-bound", &fails);
}

// ---------------------------------------------------------------------------
// Criterion 9: two-qubit single-shot pipeline through the CLI, including the
// drift diagnostic.
// ---------------------------------------------------------------------------

fn polarization_kets() -> [DVector<Complex64>; 6] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [
        DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]),
        DVector::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0)]),
        DVector::from_vec(vec![c(s, 0.0), c(s, 0.0)]),
        DVector::from_vec(vec![c(s, 0.0), c(-s, 0.0)]),
        DVector::from_vec(vec![c(s, 0.0), c(0.0, s)]),
        DVector::from_vec(vec![c(s, 0.0), c(0.0, -s)]),
    ]
}

fn kron_ket(a: &DVector<Complex64>, b: &DVector<Complex64>) -> DVector<Complex64> {
    DVector::from_fn(a.len() * b.len(), |i, _| a[i / b.len()] * b[i % b.len()])
}

/// The 36 product projectors of the standard two-qubit polarization basis
/// sweep, grouped per basis pair.
fn product_projectors() -> Vec<HermitianMatrix> {
    let kets = polarization_kets();
    let pairs = [[0usize, 1], [2, 3], [4, 5]];
    let mut out = Vec::with_capacity(36);
    for g1 in 0..3 {
        for g2 in 0..3 {
            for p1 in 0..2 {
                for p2 in 0..2 {
                    let k = kron_ket(&kets[pairs[g1][p1]], &kets[pairs[g2][p2]]);
                    out.push(HermitianMatrix::new(hermitized(&(&k * k.adjoint()))).unwrap());
                }
            }
        }
    }
    out
}

#[test]
fn criterion_09_two_qubit_pipeline() {
    let mut fails = Vec::new();
    let dir = work_dir("c9");
    let projectors = product_projectors();

    let mut sum = DMatrix::<Complex64>::zeros(4, 4);
    for p in &projectors {
        sum += p.as_matrix();
    }
    let nine_id = DMatrix::<Complex64>::identity(4, 4) * cr(9.0);
    ck!(
        fails,
        (&sum - &nine_id).norm() <= 1e-12,
        "projector family must sum to nine times the identity"
    );

    let s = std::f64::consts::FRAC_1_SQRT_2;
    let bell = DVector::from_vec(vec![cr(s), cr(0.0), cr(0.0), cr(s)]);
    let rho_true = HermitianMatrix::new(hermitized(&(&bell * bell.adjoint()))).unwrap();

    let brightness = 111_111.0;
    let model = json!({
        "kind": "state",
        "mode": { "cw": { "brightness": brightness } },
        "dimension": 4,
        "true_state": cm_json(rho_true.as_matrix()),
        "settings": [ { "povm": projectors.iter().map(|p| cm_json(p.as_matrix())).collect::<Vec<_>>() } ],
        "metadata": {}
    });
    let model_path = dir.join("model.json");
    write_json_file(&model_path, &model);

    let ds_path = dir.join("dataset.json");
    let (code, _, err) = run_cli(&[
        "simulate",
        model_path.to_str().unwrap(),
        "--seed",
        "4242",
        "--output",
        ds_path.to_str().unwrap(),
    ]);
    ck!(fails, code == 0, "simulate exited {code}: {err}");
    if code != 0 {
        conclude(9, "two-qubit-pipeline", &fails);
        return;
    }

    let ds = read_json_file(&ds_path);
    let counts: Vec<u64> = ds["settings"][0]["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    let total: u64 = counts.iter().sum();
    ck!(
        fails,
        (800_000..=1_200_000).contains(&total),
        "total counts {total} not near 1e6"
    );

    let report_path = dir.join("report.json");
    let t0 = Instant::now();
    let (code, _, err) = run_cli(&[
        "reconstruct",
        ds_path.to_str().unwrap(),
        "--output",
        report_path.to_str().unwrap(),
    ]);
    let recon_secs = t0.elapsed().as_secs_f64();
    ck!(fails, code == 0, "reconstruct exited {code}: {err}");
    if code != 0 {
        conclude(9, "two-qubit-pipeline", &fails);
        return;
    }
    ck!(fails, recon_secs < 1.0, "reconstruction took {recon_secs:.3}s, need < 1s");

    let report = read_json_file(&report_path);
    ck!(
        fails,
        report["reconstruct"]["single_shot"].as_bool() == Some(true),
        "expected the single-shot path"
    );
    ck!(
        fails,
        report["reconstruct"]["nu"].as_u64() == Some(15),
        "expected 15 degrees of freedom, got {}",
        report["reconstruct"]["nu"]
    );

    let (code, _, err) = run_cli(&["restrict", report_path.to_str().unwrap(), "--method", "simple"]);
    ck!(fails, code == 0, "restrict exited {code}: {err}");
    if code != 0 {
        conclude(9, "two-qubit-pipeline", &fails);
        return;
    }
    let report = read_json_file(&report_path);
    ck!(
        fails,
        report["restrict"]["within_region"].as_bool() == Some(true),
        "clean data must stay within the confidence region"
    );
    let rho_ml = cm_from_json(&report["restrict"]["rho_ml"]);
    let fidelity = (bell.adjoint() * &rho_ml * &bell)[(0, 0)].re;
    ck!(fails, fidelity >= 0.99, "fidelity {fidelity:.4} below 0.99");

    // Drifted counts: alternating +/-5% probability perturbation.
    let p = simulate::born_probabilities(&rho_true, &projectors);
    let drifted = DVector::from_fn(36, |k, _| p[k] * (1.0 + 0.05 * if k % 2 == 0 { 1.0 } else { -1.0 }));
    let mut rng = simulate::seeded_rng(77);
    let drift_rec = simulate::sample_cw(&drifted, brightness, &mut rng).unwrap();
    let drift_ds = json!({
        "kind": "state",
        "dimension": 4,
        "settings": [ {
            "povm": projectors.iter().map(|pj| cm_json(pj.as_matrix())).collect::<Vec<_>>(),
            "counts": drift_rec.counts().to_vec(),
            "mode": "cw"
        } ],
        "metadata": {}
    });
    let drift_ds_path = dir.join("drift.dataset.json");
    write_json_file(&drift_ds_path, &drift_ds);
    let drift_report_path = dir.join("drift.report.json");
    let (code, _, err) = run_cli(&[
        "reconstruct",
        drift_ds_path.to_str().unwrap(),
        "--output",
        drift_report_path.to_str().unwrap(),
    ]);
    ck!(fails, code == 0, "drift reconstruct exited {code}: {err}");
    if code != 0 {
        conclude(9, "two-qubit-pipeline", &fails);
        return;
    }
    let (code, _, err) = run_cli(&[
        "restrict",
        drift_report_path.to_str().unwrap(),
        "--method",
        "simple",
    ]);
    ck!(fails, code == 4, "drift restrict exited {code}, expected 4");
    ck!(
        fails,
        err.contains("this indicates that something has gone wrong"),
        "diagnostic message missing from stderr: {err}"
    );
    let drift_report = read_json_file(&drift_report_path);
    ck!(
        fails,
        drift_report["restrict"]["within_region"].as_bool() == Some(false),
        "drift report must record the failed region check"
    );
    // Re-running reproduces the stored diagnostic.
    let (code, _, _) = run_cli(&[
        "restrict",
        drift_report_path.to_str().unwrap(),
        "--method",
        "simple",
    ]);
    ck!(fails, code == 4, "repeated restrict exited {code}, expected stored diagnostic 4");

    conclude(9, "two-qubit-pipeline", &fails);
}

// ---------------------------------------------------------------------------
// Criterion 10: photon-counting detector pipeline through the CLI.
// ---------------------------------------------------------------------------

fn binomial_coefficient(n: u64, k: u64) -> f64 {
    let mut v = 1.0f64;
    for i in 0..k {
        v *= (n - i) as f64 / (i + 1) as f64;
    }
    v
}

#[test]
fn criterion_10_detector_pipeline() {
    let start = Instant::now();
    let mut fails = Vec::new();
    let dir = work_dir("c10");
    let elements = 9usize;
    let levels = 20usize;
    let modes = 8u64;

    // Click statistics of a multiplexed counter: the probability that k of
    // the 8 bins fire given n incident photons (uniform routing).
    let mut theta = vec![vec![0.0f64; levels]; elements];
    for (k, row) in theta.iter_mut().enumerate() {
        for (n, value) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..=k as u64 {
                let frac = (k as u64 - j) as f64 / modes as f64;
                // powi(0) == 1 for every base, which is the 0^0 = 1
                // convention the inclusion-exclusion sum needs.
                let pow = frac.powi(n as i32);
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign * binomial_coefficient(k as u64, j) * pow;
            }
            *value = binomial_coefficient(modes, k as u64) * acc;
        }
    }
    for n in 0..levels {
        let total: f64 = theta.iter().map(|row| row[n]).sum();
        ck!(
            fails,
            (total - 1.0).abs() <= 1e-9,
            "click distribution at level {n} sums to {total}"
        );
    }

    // Coherent probes, truncated and renormalized over the retained levels.
    let probes: Vec<Vec<f64>> = (0..31)
        .map(|k| {
            let alpha = 0.4 + 0.08 * k as f64;
            let mean = alpha * alpha;
            let mut row = Vec::with_capacity(levels);
            let mut weight = (-mean).exp();
            for n in 0..levels {
                if n > 0 {
                    weight *= mean / n as f64;
                }
                row.push(weight);
            }
            let total: f64 = row.iter().sum();
            row.iter().map(|w| w / total).collect()
        })
        .collect();

    let model = json!({
        "kind": "diagonal_povm",
        "mode": { "pulsed": { "runs": 38084 } },
        "elements": elements,
        "levels": levels,
        "true_elements": theta,
        "probes": probes,
        "metadata": {}
    });
    let model_path = dir.join("model.json");
    write_json_file(&model_path, &model);

    let ds_path = dir.join("dataset.json");
    let (code, _, err) = run_cli(&[
        "simulate",
        model_path.to_str().unwrap(),
        "--seed",
        "1337",
        "--output",
        ds_path.to_str().unwrap(),
    ]);
    ck!(fails, code == 0, "simulate exited {code}: {err}");
    if code != 0 {
        conclude(10, "detector-pipeline", &fails);
        return;
    }

    let report_path = dir.join("report.json");
    let (code, _, err) = run_cli(&[
        "reconstruct",
        ds_path.to_str().unwrap(),
        "--output",
        report_path.to_str().unwrap(),
    ]);
    ck!(fails, code == 0, "reconstruct exited {code}: {err}");
    if code != 0 {
        conclude(10, "detector-pipeline", &fails);
        return;
    }

    let (code, _, err) = run_cli(&[
        "restrict",
        report_path.to_str().unwrap(),
        "--method",
        "kalman",
        "--seed",
        "7",
    ]);
    ck!(fails, code == 0, "restrict exited {code}: {err}");
    if code != 0 {
        conclude(10, "detector-pipeline", &fails);
        return;
    }

    let (code, _, err) = run_cli(&[
        "regularize",
        report_path.to_str().unwrap(),
        "--cost",
        "smoothness",
    ]);
    ck!(fails, code == 0, "regularize exited {code}: {err}");
    if code != 0 {
        conclude(10, "detector-pipeline", &fails);
        return;
    }

    let report = read_json_file(&report_path);
    ck!(
        fails,
        report["reconstruct"]["nu"].as_u64() == Some(160),
        "expected 160 degrees of freedom, got {}",
        report["reconstruct"]["nu"]
    );
    let spectrum: Vec<f64> = report["reconstruct"]["covariance_spectrum"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let spread = spectrum.first().unwrap() / spectrum.last().unwrap();
    ck!(
        fails,
        spread > 1e4,
        "covariance spectrum spread {spread:.3e} below four decades"
    );
    ck!(
        fails,
        report["restrict"]["within_region"].as_bool() == Some(true),
        "restriction must stay within the confidence region"
    );
    ck!(
        fails,
        report["restrict"]["converged"].as_bool() == Some(true),
        "restriction must converge"
    );

    let restricted_diagonals = f64_rows(&report["restrict"]["restricted_diagonals"]);
    let restricted_cost = regularize::smoothness_cost(&restricted_diagonals);
    let cost_after = report["regularize"]["cost_after"].as_f64().unwrap();
    let cost_at_ml = report["regularize"]["cost_at_ml"].as_f64().unwrap();
    ck!(
        fails,
        cost_after <= restricted_cost + 1e-9 + 1e-6 * restricted_cost.abs(),
        "regularized cost {cost_after:.6e} above restricted-mean cost {restricted_cost:.6e}"
    );
    ck!(
        fails,
        cost_after <= cost_at_ml + 1e-9 + 1e-6 * cost_at_ml.abs(),
        "regularized cost {cost_after:.6e} above the closest-physical-state cost {cost_at_ml:.6e}"
    );
    let m2 = report["regularize"]["m2"].as_f64().unwrap();
    let gamma_phys = report["regularize"]["gamma_phys"].as_f64().unwrap();
    ck!(
        fails,
        m2 <= gamma_phys * (1.0 + 1e-6),
        "regularized point left the physical confidence region ({m2:.4} > {gamma_phys:.4})"
    );

    let elapsed = start.elapsed().as_secs_f64();
    ck!(fails, elapsed < 600.0, "runtime {elapsed:.1}s exceeds 10 minutes");
    conclude(10, "detector-pipeline", &fails);
}

// ---------------------------------------------------------------------------
// Criterion 11: posterior covariance halves when every count doubles.
// ---------------------------------------------------------------------------

fn largest_remainder_counts(p: &DVector<f64>, n: u64) -> Vec<u64> {
    let mut base: Vec<u64> = p.iter().map(|&v| (v * n as f64).floor() as u64).collect();
    let assigned: u64 = base.iter().sum();
    let mut fractional: Vec<(f64, usize)> = p
        .iter()
        .enumerate()
        .map(|(i, &v)| (v * n as f64 - (v * n as f64).floor(), i))
        .collect();
    fractional.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for k in 0..(n - assigned) as usize {
        base[fractional[k].1] += 1;
    }
    base
}

#[test]
fn criterion_11_variance_scaling() {
    let mut fails = Vec::new();
    let cs = qubit_constraints();
    let mut rng = simulate::seeded_rng(1111);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let n = rng.random_range(200..=1000u64);
        let r = random_bloch(0.8 / 3.0f64.sqrt(), &mut rng);
        let rho = HermitianMatrix::new(hermitized(&bloch_matrix(r))).unwrap();
        let settings = pauli_pair_settings(&cs, Some(&mut rng));
        let baseline_counts: Vec<Vec<u64>> = settings
            .iter()
            .map(|setting| {
                let p = simulate::born_probabilities(&rho, setting.povm());
                largest_remainder_counts(&p, n)
            })
            .collect();

        let posterior = |scale: u64| -> GaussianState {
            let mut state = kalman::init_prior(&cs, 1.0);
            for (setting, counts) in settings.iter().zip(&baseline_counts) {
                let scaled: Vec<u64> = counts.iter().map(|&v| v * scale).collect();
                let rec = OutcomeRecord::pulsed(scaled, n * scale).unwrap();
                state = kalman::kalman_update(&state, setting, &rec).unwrap();
            }
            kalman::correct_prior(&state, 1.0, None).unwrap()
        };
        let base = posterior(1);
        let doubled = posterior(2);
        let spec_base = base.covariance_spectrum();
        let spec_doubled = doubled.covariance_spectrum();
        for (i, (sb, sd)) in spec_base.iter().zip(&spec_doubled).enumerate() {
            let ratio = sd / sb;
            worst = worst.max((ratio - 0.5).abs());
            ck!(
                fails,
                (0.45..=0.55).contains(&ratio),
                "trial {trial}: eigenvalue {i} ratio {ratio:.4} outside [0.45, 0.55]"
            );
        }
    }
    ck!(fails, worst <= 0.05, "worst ratio deviation {worst:.4}");
    conclude(11, "variance-scaling", &fails);
}
