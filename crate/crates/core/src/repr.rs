//! Matrix and vectorization layer.
//!
//! States, POVM elements and observables are Hermitian matrices. The
//! statistical machinery works on their column-major vectorizations, so this
//! module owns the `vec`/`mat` pair, pseudo-inversion, the Woodbury identity
//! and the isometries that strip exactly known affine constraints (unit trace
//! on states, completeness sums on POVMs) off the estimation space.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use num_complex::Complex64;

/// Relative eigenvalue threshold below which `mp_inverse` treats a direction
/// as null.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Hermiticity tolerance applied by [`HermitianMatrix::new`], relative to the
/// larger of 1 and the largest entry magnitude.
pub const HERMITICITY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("matrix is not Hermitian: max |A - A^*| entry = {max_dev:.3e}")]
    NotHermitian { max_dev: f64 },
    #[error("vector of length {len} cannot be reshaped into a square matrix")]
    NonSquareLength { len: usize },
    #[error("dimension mismatch in {context}")]
    DimensionMismatch { context: &'static str },
    #[error("matrix is not an orthogonal projector: ||T^2 - T|| = {deviation:.3e}")]
    NotAProjector { deviation: f64 },
    #[error("Woodbury core matrix is singular")]
    SingularCore,
    #[error("dimension must be positive")]
    EmptyDimension,
}

/// A square complex matrix validated to be Hermitian at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix {
    data: DMatrix<Complex64>,
}

impl HermitianMatrix {
    /// Validates Hermiticity entrywise within [`HERMITICITY_TOL`] and stores
    /// the exactly symmetrized average `(A + A^*) / 2`.
    pub fn new(data: DMatrix<Complex64>) -> Result<Self, ReprError> {
        if data.nrows() != data.ncols() {
            return Err(ReprError::DimensionMismatch {
                context: "HermitianMatrix::new (non-square input)",
            });
        }
        let scale = data
            .iter()
            .map(|z| z.norm())
            .fold(1.0_f64, f64::max);
        let mut max_dev = 0.0_f64;
        for i in 0..data.nrows() {
            for j in i..data.ncols() {
                let dev = (data[(i, j)] - data[(j, i)].conj()).norm();
                max_dev = max_dev.max(dev);
            }
        }
        if max_dev > HERMITICITY_TOL * scale {
            return Err(ReprError::NotHermitian { max_dev });
        }
        let sym = (&data + data.adjoint()).map(|z| z * 0.5);
        Ok(Self { data: sym })
    }

    /// Builds from a real symmetric matrix.
    pub fn from_real(m: &DMatrix<f64>) -> Result<Self, ReprError> {
        Self::new(m.map(|x| Complex64::new(x, 0.0)))
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            data: DMatrix::identity(dim, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<Complex64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<Complex64> {
        self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.trace().re
    }

    /// Real eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self
            .data
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }

    /// Column-major vectorization.
    pub fn to_state_vector(&self) -> StateVector {
        StateVector::new(vec_matrix(&self.data))
    }
}

/// Column-major vectorization of a square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    data: DVector<Complex64>,
}

impl StateVector {
    pub fn new(data: DVector<Complex64>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    pub fn as_vector(&self) -> &DVector<Complex64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<Complex64> {
        self.data
    }
}

/// `vec`: stacks the columns of a Hermitian matrix into a vector.
pub fn vec(m: &HermitianMatrix) -> StateVector {
    m.to_state_vector()
}

/// Column-major flatten of an arbitrary square matrix.
pub fn vec_matrix(m: &DMatrix<Complex64>) -> DVector<Complex64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of `vec`: reshapes a length-`D^2` vector into a `D x D` matrix.
pub fn mat(v: &StateVector) -> Result<DMatrix<Complex64>, ReprError> {
    mat_vector(v.as_vector())
}

/// Inverse of `vec_matrix`.
pub fn mat_vector(v: &DVector<Complex64>) -> Result<DMatrix<Complex64>, ReprError> {
    let len = v.len();
    let dim = (len as f64).sqrt().round() as usize;
    if dim * dim != len {
        return Err(ReprError::NonSquareLength { len });
    }
    Ok(DMatrix::from_column_slice(dim, dim, v.as_slice()))
}

/// Reshapes and validates the result as Hermitian.
pub fn mat_hermitian(v: &StateVector) -> Result<HermitianMatrix, ReprError> {
    HermitianMatrix::new(mat(v)?)
}

/// Moore-Penrose inverse of a Hermitian matrix via eigendecomposition.
///
/// Eigenvalues with `|lambda| <= rank_tol * max |lambda|` are treated as zero
/// and excluded from the inversion.
pub fn mp_inverse(m: &DMatrix<Complex64>, rank_tol: f64) -> DMatrix<Complex64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "mp_inverse requires a square matrix");
    let sym = (m + m.adjoint()).map(|z| z * 0.5);
    let eig = sym.symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |a, &l| a.max(l.abs()));
    let mut out = DMatrix::<Complex64>::zeros(n, n);
    if max_abs == 0.0 {
        return out;
    }
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > rank_tol * max_abs {
            let v = eig.eigenvectors.column(k);
            let scale = Complex64::new(1.0 / lambda, 0.0);
            // out += v v^* / lambda
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] += v[i] * v[j].conj() * scale;
                }
            }
        }
    }
    out
}

/// Woodbury identity: `(A + U C V)^{-1}` given `A^{-1}`.
///
/// Returns `A^{-1} - A^{-1} U (C^{-1} + V A^{-1} U)^{-1} V A^{-1}`.
pub fn woodbury_inverse(
    a_inv: &DMatrix<Complex64>,
    u: &DMatrix<Complex64>,
    c: &DMatrix<Complex64>,
    v: &DMatrix<Complex64>,
) -> Result<DMatrix<Complex64>, ReprError> {
    let n = a_inv.nrows();
    let k = u.ncols();
    if a_inv.ncols() != n || u.nrows() != n || v.ncols() != n || v.nrows() != k || c.nrows() != k || c.ncols() != k {
        return Err(ReprError::DimensionMismatch {
            context: "woodbury_inverse operand shapes",
        });
    }
    let c_inv = c
        .clone()
        .try_inverse()
        .ok_or(ReprError::SingularCore)?;
    let a_inv_u = a_inv * u;
    let core = c_inv + v * &a_inv_u;
    let core_inv = core.try_inverse().ok_or(ReprError::SingularCore)?;
    Ok(a_inv - &a_inv_u * core_inv * (v * a_inv))
}

/// Extracts a partial isometry `V` with `V V^* = T` and `V^* V = I_r` from an
/// orthogonal projector `T` of rank `r`.
///
/// The columns are the eigenvectors of `T` with eigenvalue above 1/2.
pub fn isometry_from_projector(t: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>, ReprError> {
    let n = t.nrows();
    if t.ncols() != n {
        return Err(ReprError::DimensionMismatch {
            context: "isometry_from_projector (non-square input)",
        });
    }
    let herm_dev = (t - t.adjoint()).norm();
    let idem_dev = (t * t - t).norm();
    let deviation = herm_dev.max(idem_dev);
    if deviation > 1e-8 * (1.0 + t.norm()) {
        return Err(ReprError::NotAProjector { deviation });
    }
    let sym = (t + t.adjoint()).map(|z| z * 0.5);
    let rank_from_trace = sym.trace().re.round();
    let eig = sym.symmetric_eigen();
    let mut cols: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 0.5).collect();
    // Deterministic ordering: descending eigenvalue, then index.
    cols.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    if (cols.len() as f64 - rank_from_trace).abs() > 0.1 {
        return Err(ReprError::NotAProjector {
            deviation: (cols.len() as f64 - rank_from_trace).abs(),
        });
    }
    let mut v = DMatrix::<Complex64>::zeros(n, cols.len());
    for (j, &k) in cols.iter().enumerate() {
        v.set_column(j, &eig.eigenvectors.column(k));
    }
    Ok(v)
}

/// Discrete Fourier isometry: the unitary DFT matrix with its constant first
/// column removed.
///
/// The result `V` is `d x (d-1)` with `V^* V = I` and
/// `V V^* = I - J/d` where `J` is the all-ones matrix.
pub fn dft_isometry(d: usize) -> DMatrix<Complex64> {
    assert!(d >= 1, "dft_isometry requires d >= 1");
    let scale = 1.0 / (d as f64).sqrt();
    DMatrix::from_fn(d, d - 1, |j, c| {
        let k = c + 1;
        let phase = 2.0 * std::f64::consts::PI * (j as f64) * (k as f64) / d as f64;
        Complex64::from_polar(scale, phase)
    })
}

/// Real isometry onto the complement of the constant vector (Helmert basis):
/// column `c` has entries `1/sqrt((c+1)(c+2))` on rows `0..=c`, then
/// `-(c+1)/sqrt((c+1)(c+2))` on row `c+1`, then zeros.
///
/// Same span as `dft_isometry`, but with real entries, which keeps the free
/// coordinates of real-valued problems real.
pub fn helmert_isometry(d: usize) -> DMatrix<Complex64> {
    assert!(d >= 1, "helmert_isometry requires d >= 1");
    DMatrix::from_fn(d, d - 1, |j, c| {
        let m = (c + 1) as f64;
        let norm = (m * (m + 1.0)).sqrt();
        if j <= c {
            Complex64::new(1.0 / norm, 0.0)
        } else if j == c + 1 {
            Complex64::new(-m / norm, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// The affine-constraint data for an estimation problem: reference point
/// `x0`, partial isometry `x1` onto the free directions, and the projector
/// `t_x = x1 x1^*`.
///
/// Measurement-side reductions depend on the individual setting and live with
/// it; see the kalman module.
#[derive(Debug, Clone)]
pub struct ConstraintSubspaces {
    x0: DVector<Complex64>,
    x1: DMatrix<Complex64>,
    t_x: DMatrix<Complex64>,
}

impl ConstraintSubspaces {
    /// Builds from a reference point and a partial isometry. Validates
    /// `x1^* x1 = I` to 1e-10.
    pub fn new(x0: DVector<Complex64>, x1: DMatrix<Complex64>) -> Result<Self, ReprError> {
        if x1.nrows() != x0.len() {
            return Err(ReprError::DimensionMismatch {
                context: "ConstraintSubspaces::new (x0 length vs x1 rows)",
            });
        }
        let gram = x1.adjoint() * &x1;
        let dev = (&gram - DMatrix::<Complex64>::identity(gram.nrows(), gram.ncols())).norm();
        if dev > 1e-10 * (1.0 + x1.norm()) {
            return Err(ReprError::NotAProjector { deviation: dev });
        }
        let t_x = &x1 * x1.adjoint();
        Ok(Self { x0, x1, t_x })
    }

    /// Trivial constraints: `x0 = 0`, `x1 = I`. Used for unconstrained toy
    /// problems.
    pub fn unconstrained(dim: usize) -> Self {
        Self {
            x0: DVector::zeros(dim),
            x1: DMatrix::identity(dim, dim),
            t_x: DMatrix::identity(dim, dim),
        }
    }

    /// Ambient dimension of the estimation space.
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// Number of free (tilde) coordinates.
    pub fn free_dim(&self) -> usize {
        self.x1.ncols()
    }

    pub fn x0(&self) -> &DVector<Complex64> {
        &self.x0
    }

    pub fn x1(&self) -> &DMatrix<Complex64> {
        &self.x1
    }

    pub fn t_x(&self) -> &DMatrix<Complex64> {
        &self.t_x
    }

    /// Maps an ambient point to tilde coordinates: `x1^* (x - x0)`.
    pub fn to_tilde(&self, x: &DVector<Complex64>) -> DVector<Complex64> {
        self.x1.adjoint() * (x - &self.x0)
    }

    /// Maps tilde coordinates back to the ambient space: `x0 + x1 xt`.
    pub fn from_tilde(&self, xt: &DVector<Complex64>) -> DVector<Complex64> {
        &self.x0 + &self.x1 * xt
    }

    /// Norm of the component of `x - x0` outside the constraint subspace.
    pub fn off_subspace_residual(&self, x: &DVector<Complex64>) -> f64 {
        let delta = x - &self.x0;
        (&delta - &self.t_x * &delta).norm()
    }
}

/// Constraints for state tomography on a `dim`-level system: trace fixed to
/// `Tr rho0`, reference point `vec(rho0)`.
///
/// The isometry acts as the identity on off-diagonal vectorization positions
/// and as the DFT isometry on the `dim` diagonal positions, which makes the
/// free coordinates of a Hermitian trace-one matrix exactly `dim^2 - 1`.
pub fn standard_state_constraints(dim: usize, rho0: &HermitianMatrix) -> Result<ConstraintSubspaces, ReprError> {
    if dim == 0 {
        return Err(ReprError::EmptyDimension);
    }
    if rho0.dim() != dim {
        return Err(ReprError::DimensionMismatch {
            context: "standard_state_constraints (rho0 dimension)",
        });
    }
    let n = dim * dim;
    let diag_positions: Vec<usize> = (0..dim).map(|i| i * (dim + 1)).collect();
    let dft = dft_isometry(dim);
    let mut x1 = DMatrix::<Complex64>::zeros(n, n - 1);
    let mut col = 0;
    for k in 1..n {
        if k % (dim + 1) == 0 {
            let kp = k / (dim + 1);
            for (jp, &row) in diag_positions.iter().enumerate() {
                x1[(row, col)] = dft[(jp, kp - 1)];
            }
        } else {
            x1[(k, col)] = Complex64::new(1.0, 0.0);
        }
        col += 1;
    }
    ConstraintSubspaces::new(vec(rho0).into_vector(), x1)
}

/// Constraints for reconstructing a diagonal POVM with `elements` outcomes on
/// `levels` basis states: for every level the element diagonals sum to one.
///
/// Coordinates are stacked element-major: index `e * levels + i` holds the
/// `i`-th diagonal entry of element `e`. The reference point is the uniform
/// POVM `1/elements`.
pub fn diagonal_povm_constraints(elements: usize, levels: usize) -> Result<ConstraintSubspaces, ReprError> {
    if elements == 0 || levels == 0 {
        return Err(ReprError::EmptyDimension);
    }
    let n = elements * levels;
    let x0 = DVector::from_element(n, Complex64::new(1.0 / elements as f64, 0.0));
    let basis = helmert_isometry(elements);
    let k_free = elements - 1;
    let mut x1 = DMatrix::<Complex64>::zeros(n, levels * k_free);
    for i in 0..levels {
        for c in 0..k_free {
            let col = i * k_free + c;
            for e in 0..elements {
                x1[(e * levels + i, col)] = basis[(e, c)];
            }
        }
    }
    ConstraintSubspaces::new(x0, x1)
}
