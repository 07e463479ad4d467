//! Small dense helpers shared by the descent, RKHS and transformer modules.
//!
//! Token lists are stored as `DMatrix<f64>` with one token per row.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `L X = B` for lower-triangular `L` by forward substitution.
///
/// Only the lower triangle of `lower` is read. Row `i` of the solution is a
/// function of rows `0..=i` of `lower` and `rhs` alone, and the arithmetic is
/// performed in a fixed order, so solving a leading block gives bit-identical
/// rows to solving the full system.
pub fn forward_substitute(lower: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = lower.nrows();
    if lower.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "triangular matrix is {}x{}",
            n,
            lower.ncols()
        )));
    }
    if rhs.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "right-hand side has {} rows, expected {}",
            rhs.nrows(),
            n
        )));
    }
    let mut x = DMatrix::zeros(n, rhs.ncols());
    for i in 0..n {
        let diag = lower[(i, i)];
        if diag == 0.0 || !diag.is_finite() {
            return Err(Error::SingularDiagonal { index: i, value: diag });
        }
        for c in 0..rhs.ncols() {
            let mut acc = rhs[(i, c)];
            for j in 0..i {
                acc -= lower[(i, j)] * x[(j, c)];
            }
            x[(i, c)] = acc / diag;
        }
    }
    Ok(x)
}

/// `||W^T W - I||_F`.
pub fn orthogonality_defect(w: &DMatrix<f64>) -> f64 {
    let n = w.ncols();
    (w.transpose() * w - DMatrix::<f64>::identity(n, n)).norm()
}

/// Largest eigenvalue modulus of a general real square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Row `i` of a token matrix as an owned column vector.
pub fn row_vector(tokens: &DMatrix<f64>, i: usize) -> DVector<f64> {
    tokens.row(i).transpose()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Row-major nested vectors, the JSON layout used for every matrix we export.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch("ragged rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
