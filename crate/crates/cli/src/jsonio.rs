//! File formats: dataset and model JSON read by the pipeline, the
//! accumulating report JSON written by it. Complex matrices are stored as
//! separate real and imaginary row-major arrays; see FORMATS.md.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kftomo::repr::{Complex64, HermitianMatrix};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CMatrix {
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl CMatrix {
    pub fn from_dmatrix(m: &DMatrix<Complex64>) -> Self {
        let rows = m.nrows();
        let cols = m.ncols();
        let mut re = vec![vec![0.0; cols]; rows];
        let mut im = vec![vec![0.0; cols]; rows];
        for i in 0..rows {
            for j in 0..cols {
                re[i][j] = m[(i, j)].re;
                im[i][j] = m[(i, j)].im;
            }
        }
        CMatrix { re, im }
    }

    pub fn from_hermitian(h: &HermitianMatrix) -> Self {
        Self::from_dmatrix(h.as_matrix())
    }

    pub fn to_dmatrix(&self) -> Result<DMatrix<Complex64>, String> {
        let rows = self.re.len();
        if rows == 0 {
            return Err("matrix has no rows".into());
        }
        let cols = self.re[0].len();
        if cols == 0 {
            return Err("matrix has no columns".into());
        }
        if self.im.len() != rows {
            return Err("re and im row counts differ".into());
        }
        for (i, (r, c)) in self.re.iter().zip(&self.im).enumerate() {
            if r.len() != cols || c.len() != cols {
                return Err(format!("ragged matrix row {i}"));
            }
        }
        Ok(DMatrix::from_fn(rows, cols, |i, j| {
            Complex64::new(self.re[i][j], self.im[i][j])
        }))
    }

    pub fn to_hermitian(&self) -> Result<HermitianMatrix, String> {
        let m = self.to_dmatrix()?;
        HermitianMatrix::new(m).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CVector {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl CVector {
    pub fn from_dvector(v: &DVector<Complex64>) -> Self {
        CVector {
            re: v.iter().map(|z| z.re).collect(),
            im: v.iter().map(|z| z.im).collect(),
        }
    }

    pub fn to_dvector(&self) -> Result<DVector<Complex64>, String> {
        if self.re.len() != self.im.len() {
            return Err("re and im lengths differ".into());
        }
        Ok(DVector::from_iterator(
            self.re.len(),
            self.re
                .iter()
                .zip(&self.im)
                .map(|(&r, &i)| Complex64::new(r, i)),
        ))
    }
}

/// Which estimation problem a dataset describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// Density-matrix tomography: settings carry POVM elements.
    State,
    /// Phase-insensitive detector tomography: settings carry probe
    /// diagonals, the unknowns are diagonal POVM elements.
    DiagonalPovm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeField {
    Pulsed,
    Cw,
}

/// One measurement setting of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingRecord {
    /// POVM elements (`state` datasets).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub povm: Option<Vec<CMatrix>>,
    /// Probe diagonal weights (`diagonal_povm` datasets).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<Vec<f64>>,
    pub counts: Vec<u64>,
    pub mode: ModeField,
    /// Number of runs; required for pulsed settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub kind: ProblemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elements: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    pub settings: Vec<SettingRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
    /// Ground truth carried along by simulated datasets so downstream
    /// checks can score themselves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_state: Option<CMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_elements: Option<Vec<Vec<f64>>>,
}

/// Acquisition mode of a simulation model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSpec {
    Pulsed { runs: u64 },
    Cw { brightness: f64 },
}

/// One setting of a simulation model (`state` kind).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSetting {
    pub povm: Vec<CMatrix>,
}

/// Ground-truth description consumed by `kftomo simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ProblemKind,
    pub mode: ModeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_state: Option<CMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settings: Option<Vec<ModelSetting>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elements: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_elements: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructStage {
    pub kind: ProblemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elements: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    /// Affine reference point and constraint-orthogonal isometry defining
    /// the free coordinates; stored so later stages rebuild the exact state.
    pub x0: CVector,
    pub x1: CMatrix,
    pub mu_tilde: CVector,
    pub sigma_tilde: CMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_matrix: Option<CMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_diagonals: Option<Vec<Vec<f64>>>,
    /// Eigenvalues of the free-coordinate covariance, descending.
    pub covariance_spectrum: Vec<f64>,
    pub nu: usize,
    pub gamma: f64,
    pub conservative: bool,
    /// Effective prior width after correction; absent means infinite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_b: Option<f64>,
    pub single_shot: bool,
    /// "removed", "variance_capped", or "none".
    pub prior_correction: String,
    pub settings_count: usize,
    pub total_counts: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestrictStage {
    pub method: String,
    pub m2_ml: f64,
    pub gamma: f64,
    pub gamma_phys: f64,
    pub within_region: bool,
    pub x_ml: CVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_ml: Option<CMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ml_diagonals: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restricted_mu_tilde: Option<CVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restricted_sigma_tilde: Option<CMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restricted_mean_matrix: Option<CMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restricted_diagonals: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    pub epsilon: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularizeStage {
    pub cost: String,
    pub cost_at_ml: f64,
    pub cost_after: f64,
    pub m2: f64,
    pub gamma_phys: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution_matrix: Option<CMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution_diagonals: Option<Vec<Vec<f64>>>,
    pub solution_ambient: CVector,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// The accumulating analysis report: one stage per pipeline step, keyed so
/// re-running a stage on its own output is a no-op.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Report {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruct: Option<ReconstructStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restrict: Option<RestrictStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularize: Option<RegularizeStage>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Invalid {
        message: format!("serialization failed: {e}"),
    })?;
    fs::write(path, text + "\n").map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// `foo.json -> foo.<suffix>`; non-json names just gain the suffix.
pub fn derived_path(input: &Path, suffix: &str) -> PathBuf {
    let name = input.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let stem = name.strip_suffix(".json").unwrap_or(name);
    input.with_file_name(format!("{stem}.{suffix}"))
}
