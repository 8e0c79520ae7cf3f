//! Least-squares regression on monomial bases and affine drift fitting.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SVD};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest are treated as zero.
const RANK_CUTOFF: f64 = 1e-10;

/// Tag written into serialized models; identifies the monomial ordering.
pub const ORDERING_TAG: &str = "graded-lex";

/// Drift `x -> a x + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDrift {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl AffineDrift {
    pub fn new(a: DMatrix<f64>, c: DVector<f64>) -> Self {
        assert!(a.is_square() && a.nrows() == c.len(), "affine drift dimensions");
        AffineDrift { a, c }
    }

    pub fn zero(dim: usize) -> Self {
        AffineDrift {
            a: DMatrix::zeros(dim, dim),
            c: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.c.iter()).all(|v| v.is_finite())
    }

    /// Writes `a x + c` into `out`.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut v = self.c[i];
            for j in 0..d {
                v += self.a[(i, j)] * x[j];
            }
            out[i] = v;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.apply_into(x, &mut out);
        out
    }
}

/// Number of monomials of total degree at most `degree` in `dim` variables.
pub fn basis_size(dim: usize, degree: u32) -> Result<usize> {
    match degree {
        1 => Ok(1 + dim),
        2 => Ok(1 + dim + dim * (dim + 1) / 2),
        p => Err(Error::Config(format!("unsupported polynomial degree {p} (supported: 1, 2)"))),
    }
}

/// Monomials of `x`: constant, linear terms in index order, then products
/// `x_i x_j` for `i <= j` in lexicographic order.
pub fn basis_features(x: &[f64], degree: u32) -> Result<Vec<f64>> {
    let mut out = vec![0.0; basis_size(x.len(), degree)?];
    write_features(x, degree, &mut out);
    Ok(out)
}

fn write_features(x: &[f64], degree: u32, out: &mut [f64]) {
    let d = x.len();
    out[0] = 1.0;
    out[1..=d].copy_from_slice(x);
    if degree >= 2 {
        let mut idx = d + 1;
        for i in 0..d {
            for j in i..d {
                out[idx] = x[i] * x[j];
                idx += 1;
            }
        }
    }
}

/// Polynomial of degree `p` in `d` variables, coefficients in
/// [`basis_features`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialModel {
    dim: usize,
    degree: u32,
    coefficients: Vec<f64>,
}

/// Per-fit numerical diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitDiagnostics {
    /// Mean squared residual on the training data.
    pub residual: f64,
    /// 2-norm condition number of the design matrix.
    pub condition: f64,
    pub rank: usize,
}

impl PolynomialModel {
    pub fn new(dim: usize, degree: u32, coefficients: Vec<f64>) -> Result<Self> {
        let m = basis_size(dim, degree)?;
        if coefficients.len() != m {
            return Err(Error::InvalidInput(format!(
                "degree-{degree} model in {dim} variables needs {m} coefficients, got {}",
                coefficients.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite polynomial coefficient".into()));
        }
        Ok(PolynomialModel {
            dim,
            degree,
            coefficients,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let d = self.dim;
        let c = &self.coefficients;
        let mut v = c[0];
        for i in 0..d {
            v += c[1 + i] * x[i];
        }
        if self.degree >= 2 {
            let mut idx = d + 1;
            for i in 0..d {
                let mut row = 0.0;
                for j in i..d {
                    row += c[idx] * x[j];
                    idx += 1;
                }
                v += x[i] * row;
            }
        }
        v
    }

    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let c = &self.coefficients;
        out[..d].copy_from_slice(&c[1..=d]);
        if self.degree >= 2 {
            let mut idx = d + 1;
            for i in 0..d {
                for j in i..d {
                    let g = c[idx];
                    if i == j {
                        out[i] += 2.0 * g * x[i];
                    } else {
                        out[i] += g * x[j];
                        out[j] += g * x[i];
                    }
                    idx += 1;
                }
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.gradient_into(x, &mut out);
        out
    }

    /// Same polynomial with the constant term shifted by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        let mut m = self.clone();
        m.coefficients[0] += delta;
        m
    }

    /// Text record: a header line followed by one coefficient per line with
    /// 17 significant digits.
    pub fn to_record(&self) -> String {
        let mut s = format!(
            "polynomial d={} p={} ordering={} count={}\n",
            self.dim,
            self.degree,
            ORDERING_TAG,
            self.coefficients.len()
        );
        for c in &self.coefficients {
            writeln!(s, "{c:.16e}").unwrap();
        }
        s
    }

    /// Parses a record produced by [`to_record`](Self::to_record).
    pub fn from_record(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::InvalidInput("empty model record".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("polynomial") {
            return Err(Error::InvalidInput(format!("bad model header: {header}")));
        }
        let (mut dim, mut degree, mut count) = (None, None, None);
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("bad header field {f}")))?;
            let bad = |_| Error::InvalidInput(format!("bad header field {f}"));
            match k {
                "d" => dim = Some(v.parse::<usize>().map_err(bad)?),
                "p" => degree = Some(v.parse::<u32>().map_err(bad)?),
                "count" => count = Some(v.parse::<usize>().map_err(bad)?),
                "ordering" if v == ORDERING_TAG => {}
                _ => return Err(Error::InvalidInput(format!("unknown header field {f}"))),
            }
        }
        let (dim, degree) = match (dim, degree) {
            (Some(d), Some(p)) => (d, p),
            _ => return Err(Error::InvalidInput("model header lacks d or p".into())),
        };
        let coefficients = lines
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("bad coefficient {l}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(c) = count {
            if c != coefficients.len() {
                return Err(Error::InvalidInput("coefficient count does not match header".into()));
            }
        }
        PolynomialModel::new(dim, degree, coefficients)
    }
}

/// Minimal-norm least-squares solution of `design * X = targets` through a
/// QR factorization followed by an SVD of the triangular factor.
pub(crate) fn least_squares(design: DMatrix<f64>, targets: DMatrix<f64>) -> Result<(DMatrix<f64>, f64, usize)> {
    let (rows, cols) = design.shape();
    if rows < cols {
        return Err(Error::Underdetermined {
            samples: rows,
            unknowns: cols,
        });
    }
    let qr = design.qr();
    let mut qtb = targets;
    qr.q_tr_mul(&mut qtb);
    let r = qr.r();
    let rhs = qtb.rows(0, cols).into_owned();
    let svd = SVD::new(r, true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let eps = RANK_CUTOFF * smax;
    let rank = svd.rank(eps);
    let sol = svd.solve(&rhs, eps).map_err(|e| Error::Numerical {
        context: "least squares".into(),
        detail: e.into(),
    })?;
    Ok((sol, condition, rank))
}

fn check_points(points: &[f64], dim: usize, n: usize) -> Result<()> {
    if dim == 0 || points.len() != n * dim {
        return Err(Error::InvalidInput(format!(
            "expected {n} points of dimension {dim}, got {} values",
            points.len()
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite regression point".into()));
    }
    Ok(())
}

/// Least-squares polynomial fit of `targets` on `points` (row-major, `dim`
/// values per point).
pub fn fit_value(points: &[f64], dim: usize, targets: &[f64], degree: u32) -> Result<PolynomialModel> {
    fit_value_with_diagnostics(points, dim, targets, degree).map(|(m, _)| m)
}

pub fn fit_value_with_diagnostics(
    points: &[f64],
    dim: usize,
    targets: &[f64],
    degree: u32,
) -> Result<(PolynomialModel, FitDiagnostics)> {
    let n = targets.len();
    check_points(points, dim, n)?;
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite regression target".into()));
    }
    let m = basis_size(dim, degree)?;
    if n < m {
        return Err(Error::Underdetermined { samples: n, unknowns: m });
    }
    let mut rows = vec![0.0; n * m];
    rows.par_chunks_mut(m)
        .zip(points.par_chunks(dim))
        .for_each(|(row, x)| write_features(x, degree, row));
    let design = DMatrix::from_row_slice(n, m, &rows);
    drop(rows);
    let (sol, condition, rank) = least_squares(design, DMatrix::from_column_slice(n, 1, targets))?;
    let model = PolynomialModel::new(dim, degree, sol.column(0).iter().copied().collect())?;
    let residual = points
        .chunks(dim)
        .zip(targets)
        .map(|(x, y)| (model.eval(x) - y).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok((
        model,
        FitDiagnostics {
            residual,
            condition,
            rank,
        },
    ))
}

/// Componentwise least-squares fit of `targets ≈ a x + c`. `targets` is
/// row-major with `dim` values per sample. Returns the drift and the mean
/// squared residual `(1/N) Σ |a x_i + c - b_i|²`.
pub fn fit_affine_drift(points: &[f64], targets: &[f64], dim: usize) -> Result<(AffineDrift, f64)> {
    let n = points.len().checked_div(dim).unwrap_or(0);
    check_points(points, dim, n)?;
    check_points(targets, dim, n).map_err(|_| Error::InvalidInput("drift targets must be finite and match the points".into()))?;
    if n < dim + 1 {
        return Err(Error::Underdetermined {
            samples: n,
            unknowns: dim + 1,
        });
    }
    let design = DMatrix::from_fn(n, dim + 1, |i, j| if j < dim { points[i * dim + j] } else { 1.0 });
    let rhs = DMatrix::from_row_slice(n, dim, targets);
    let (sol, _, _) = least_squares(design, rhs)?;
    // sol is (dim+1) x dim: row j < dim holds a[., j], last row holds c
    let a = DMatrix::from_fn(dim, dim, |i, j| sol[(j, i)]);
    let c = DVector::from_fn(dim, |i, _| sol[(dim, i)]);
    let drift = AffineDrift::new(a, c);
    Ok((drift.clone(), drift_residual(&drift, points, targets, dim)))
}

/// `(1/N) Σ |a x_i + c - b_i|²`.
pub fn drift_residual(drift: &AffineDrift, points: &[f64], targets: &[f64], dim: usize) -> f64 {
    let n = points.len() / dim;
    let mut buf = vec![0.0; dim];
    let mut total = 0.0;
    for (x, b) in points.chunks(dim).zip(targets.chunks(dim)) {
        drift.apply_into(x, &mut buf);
        total += buf.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    }
    total / n as f64
}
