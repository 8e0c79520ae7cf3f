//! Small dense matrix kernel.
//!
//! Everything here works on dense `nalgebra` storage; the dimensions in play
//! are the state dimension `d` (at most a few tens) and the regression basis
//! size.

use nalgebra::{DMatrix, DVector, SymmetricEigen, LU, SVD};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gaussian_flow::GaussianState;
use crate::rng::fill_normal;

pub type SquareMatrix = DMatrix<f64>;

/// Relative tolerance for the pivoted Cholesky factorization of covariances.
const CHOLESKY_REL_TOL: f64 = 1e-12;
/// Covariances with an eigenvalue below `-PSD_SAMPLE_TOL * ||Q||` are rejected.
const PSD_SAMPLE_TOL: f64 = 1e-10;
/// Condition estimates above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

/// A real symmetric matrix. Construction symmetrizes the input, so
/// `m[(i, j)] == m[(j, i)]` holds bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    /// Builds from an arbitrary square matrix by averaging with its transpose.
    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "symmetric matrix must be square");
        let n = m.nrows();
        let mut s = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        SymmetricMatrix(s)
    }

    pub fn identity(dim: usize) -> Self {
        SymmetricMatrix(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SymmetricMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymmetricMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Row-major entries; the input must already be symmetric up to 1e-12
    /// relative.
    pub fn from_row_slice(dim: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::InvalidInput(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        let m = DMatrix::from_row_slice(dim, dim, entries);
        let scale = m.amax().max(1.0);
        if (&m - m.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidInput("matrix is not symmetric".into()));
        }
        Ok(Self::from_matrix(m))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        SymmetricMatrix(&self.0 * factor)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let eig = symmetric_eigen(self)?;
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        Ok(vals)
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigenvalues()?[0])
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}

fn symmetric_eigen(q: &SymmetricMatrix) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !q.is_finite() {
        return Err(Error::InvalidInput("symmetric matrix has non-finite entries".into()));
    }
    SymmetricEigen::try_new(q.0.clone(), f64::EPSILON, 10_000).ok_or_else(|| Error::Numerical {
        context: "symmetric eigendecomposition".into(),
        detail: format!("no convergence for {}", q.0),
    })
}

/// `e^{m t}` by scaling and squaring with a Padé approximant.
pub fn matrix_exp(m: &SquareMatrix, t: f64) -> Result<SquareMatrix> {
    if !m.is_square() {
        return Err(Error::InvalidInput("matrix exponential of a non-square matrix".into()));
    }
    check_finite(m, "matrix exponential argument")?;
    if !t.is_finite() {
        return Err(Error::InvalidInput("non-finite time in matrix exponential".into()));
    }
    if t == 0.0 || m.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::identity(m.nrows(), m.ncols()));
    }
    let e = (m * t).exp();
    check_finite(&e, "matrix exponential result")?;
    Ok(e)
}

/// Frobenius projection onto the positive semidefinite cone: negative
/// eigenvalues are clamped to exactly zero. PSD inputs are returned unchanged.
pub fn project_psd(q: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let eig = symmetric_eigen(q)?;
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return Ok(q.clone());
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let recon = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    Ok(SymmetricMatrix::from_matrix(recon))
}

/// Lower factor `L` (d x r) with `Q = L Lᵀ`, from a pivoted Cholesky
/// factorization stopped at tolerance `CHOLESKY_REL_TOL * trace(Q)`.
/// Returns `None` when the factorization stops before full rank.
fn pivoted_cholesky(q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let d = q.nrows();
    let tol = CHOLESKY_REL_TOL * q.trace().max(0.0);
    let mut a = q.clone();
    let mut perm: Vec<usize> = (0..d).collect();
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        // pick the largest remaining diagonal entry
        let (p, &piv) = (j..d)
            .map(|i| (i, &a[(perm[i], perm[i])]))
            .max_by(|x, y| x.1.total_cmp(y.1))
            .unwrap();
        if piv <= tol {
            return None;
        }
        perm.swap(j, p);
        let pj = perm[j];
        let ljj = piv.sqrt();
        l[(pj, j)] = ljj;
        for &pi in &perm[(j + 1)..] {
            l[(pi, j)] = a[(pi, pj)] / ljj;
        }
        for ii in (j + 1)..d {
            let pi = perm[ii];
            for jj in (j + 1)..=ii {
                let pk = perm[jj];
                let v = a[(pi, pk)] - l[(pi, j)] * l[(pk, j)];
                a[(pi, pk)] = v;
                a[(pk, pi)] = v;
            }
        }
    }
    Some(l)
}

/// Reusable sampler for `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(state: &GaussianState) -> Result<Self> {
        let cov = &state.cov;
        if cov.dim() != state.mean.len() {
            return Err(Error::InvalidInput("mean/covariance dimension mismatch".into()));
        }
        if !cov.is_finite() || state.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("gaussian state has non-finite entries".into()));
        }
        let eig = symmetric_eigen(cov)?;
        let norm = cov.as_matrix().norm();
        let min = eig.eigenvalues.min();
        if min < -PSD_SAMPLE_TOL * norm {
            return Err(Error::InvalidState(format!(
                "covariance is not positive semidefinite (min eigenvalue {min:.3e})"
            )));
        }
        let factor = match pivoted_cholesky(cov.as_matrix()) {
            Some(l) => l,
            None => {
                let floor = CHOLESKY_REL_TOL * cov.trace().max(0.0);
                let sqrt = eig.eigenvalues.map(|l| if l > floor { l.sqrt() } else { 0.0 });
                &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
            }
        };
        Ok(GaussianSampler {
            mean: state.mean.clone(),
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Writes one draw into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let mut z = vec![0.0; d];
        fill_normal(rng, &mut z);
        for (i, o) in out.iter_mut().enumerate() {
            let mut v = self.mean[i];
            for (j, zj) in z.iter().enumerate() {
                v += self.factor[(i, j)] * zj;
            }
            *o = v;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        DVector::from_vec(out)
    }
}

/// One draw of `N(state.mean, state.cov)`.
pub fn sample_gaussian<R: Rng + ?Sized>(state: &GaussianState, rng: &mut R) -> Result<DVector<f64>> {
    Ok(GaussianSampler::new(state)?.sample(rng))
}

/// LU factorization with a 2-norm condition estimate, for repeated solves.
#[derive(Debug, Clone)]
pub struct LinearSolver {
    matrix: DMatrix<f64>,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    condition: f64,
}

/// 2-norm condition number from singular values (infinite when singular).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = SVD::new(m.clone(), false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

impl LinearSolver {
    pub fn new(m: &SquareMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidInput("linear solve with a non-square matrix".into()));
        }
        check_finite(m, "linear system matrix")?;
        let condition = condition_number(m);
        if !(condition <= MAX_CONDITION) {
            return Err(Error::Singular { condition });
        }
        Ok(LinearSolver {
            matrix: m.clone(),
            lu: m.clone().lu(),
            condition,
        })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = self.lu.solve(rhs).expect("factorization checked nonsingular");
        // one round of iterative refinement
        let r = rhs - &self.matrix * &x;
        if let Some(dx) = self.lu.solve(&r) {
            x += dx;
        }
        x
    }
}

/// Solves `m x = rhs`.
pub fn solve_linear(m: &SquareMatrix, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if rhs.len() != m.nrows() {
        return Err(Error::InvalidInput("right-hand side length mismatch".into()));
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("right-hand side has non-finite entries".into()));
    }
    Ok(LinearSolver::new(m)?.solve(rhs))
}
