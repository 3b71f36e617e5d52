//! Dense linear-algebra kernel shared by the rest of the crate.
//!
//! Matrices are `nalgebra::DMatrix<f64>`, stored column-major. Every entry
//! point rejects non-finite input.

use nalgebra::{Cholesky, DMatrix, DVector, SVD};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{0}: matrix contains NaN or infinite entries")]
    NonFinite(&'static str),
    #[error("{what}: dimension mismatch (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("singular value decomposition failed to converge")]
    SvdFailed,
    #[error("invalid tolerance {0}")]
    InvalidTolerance(f64),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Relative symmetry tolerance used by [`cholesky`] and [`solve_spd`].
pub const SYMMETRY_TOL: f64 = 1e-10;

pub fn ensure_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite(what))
    }
}

/// Default relative truncation threshold for [`pinv`]: machine epsilon
/// scaled by the larger dimension.
pub fn default_pinv_tol(rows: usize, cols: usize) -> f64 {
    f64::EPSILON * rows.max(cols).max(1) as f64
}

/// Singular values in non-increasing order.
pub fn singular_values(m: &Matrix) -> Result<Vector> {
    ensure_finite(m, "singular_values")?;
    if m.is_empty() {
        return Ok(Vector::zeros(0));
    }
    let svd = SVD::try_new(m.clone(), false, false, f64::EPSILON, 0).ok_or(LinalgError::SvdFailed)?;
    Ok(svd.singular_values)
}

/// Moore-Penrose pseudo-inverse.
///
/// Singular values below `tol * sigma_max` are treated as zero. `tol = None`
/// selects [`default_pinv_tol`].
pub fn pinv(m: &Matrix, tol: Option<f64>) -> Result<Matrix> {
    ensure_finite(m, "pinv")?;
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Ok(Matrix::zeros(c, r));
    }
    let rel = tol.unwrap_or_else(|| default_pinv_tol(r, c));
    if !(rel > 0.0) || !rel.is_finite() {
        return Err(LinalgError::InvalidTolerance(rel));
    }
    let svd = SVD::try_new(m.clone(), true, true, f64::EPSILON, 0).ok_or(LinalgError::SvdFailed)?;
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Ok(Matrix::zeros(c, r));
    }
    let cutoff = rel * smax;
    let u = svd.u.as_ref().ok_or(LinalgError::SvdFailed)?;
    let v_t = svd.v_t.as_ref().ok_or(LinalgError::SvdFailed)?;

    // V * diag(1/s) * U^T, skipping truncated directions.
    let mut out = Matrix::zeros(c, r);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            let vi = v_t.row(i).transpose();
            let ui = u.column(i);
            out.ger(1.0 / s, &vi, &ui, 1.0);
        }
    }
    Ok(out)
}

fn check_symmetric(p: &Matrix) -> Result<()> {
    if !p.is_square() {
        return Err(LinalgError::DimensionMismatch {
            what: "symmetric matrix",
            expected: "square".into(),
            got: format!("{}x{}", p.nrows(), p.ncols()),
        });
    }
    let scale = p.amax().max(f64::MIN_POSITIVE);
    let asym = (p - p.transpose()).amax() / scale;
    if asym > SYMMETRY_TOL {
        return Err(LinalgError::NotSymmetric(asym));
    }
    Ok(())
}

fn factor(p: &Matrix) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    ensure_finite(p, "cholesky")?;
    check_symmetric(p)?;
    // Symmetrize so round-off asymmetry does not leak into the factor.
    let sym = (p + p.transpose()) * 0.5;
    Cholesky::new(sym).ok_or(LinalgError::NotPositiveDefinite)
}

/// Upper-triangular Cholesky factor `V` with `V^T V = P`.
pub fn cholesky(p: &Matrix) -> Result<Matrix> {
    Ok(factor(p)?.l().transpose())
}

/// Solves `G X = rhs` for symmetric positive-definite `G`.
pub fn solve_spd(g: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    ensure_finite(rhs, "solve_spd rhs")?;
    if rhs.nrows() != g.nrows() {
        return Err(LinalgError::DimensionMismatch {
            what: "solve_spd rhs rows",
            expected: g.nrows().to_string(),
            got: rhs.nrows().to_string(),
        });
    }
    Ok(factor(g)?.solve(rhs))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn inverse_spd(g: &Matrix) -> Result<Matrix> {
    let f = factor(g)?;
    let inv = f.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

pub fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Stacks matrices with equal column counts on top of each other.
pub fn vstack(blocks: &[&Matrix]) -> Matrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack: column count mismatch");
        out.view_mut((r, 0), b.shape()).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Places matrices with equal row counts side by side.
pub fn hstack(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack: row count mismatch");
        out.view_mut((0, c), b.shape()).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Frobenius norm of `a - b` relative to the Frobenius norm of `b`.
pub fn rel_frobenius_error(a: &Matrix, b: &Matrix) -> f64 {
    let denom = b.norm();
    let num = (a - b).norm();
    if denom == 0.0 {
        num
    } else {
        num / denom
    }
}
