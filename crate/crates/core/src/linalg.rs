//! Kalman gain and the small dense solves the filters need.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `K = P H' (H P H' + R)^-1` for a column-selecting `H`, solved through the
/// `m x m` innovation covariance.
pub fn kalman_gain(p: &DMatrix<f64>, h_cols: &[usize], r_diag: &DVector<f64>) -> Result<DMatrix<f64>> {
    if !p.is_square() {
        return Err(Error::Shape("covariance must be square".into()));
    }
    if h_cols.len() != r_diag.len() {
        return Err(Error::Shape("H and R disagree on the number of observations".into()));
    }
    if let Some(c) = h_cols.iter().find(|&&c| c >= p.nrows()) {
        return Err(Error::Shape(format!("H reads column {c} of a {}-dim state", p.nrows())));
    }
    if let Some(r) = r_diag.iter().find(|r| !(**r > 0.0)) {
        return Err(Error::param("r_diag", format!("variances must be > 0, got {r}")));
    }
    let pht = p.select_columns(h_cols);
    let hpht = pht.select_rows(h_cols);
    gain_from_parts(&pht, &hpht, r_diag)
}

/// Gain from precomputed `P H'` (d x m) and `H P H'` (m x m).
pub(crate) fn gain_from_parts(
    pht: &DMatrix<f64>,
    hpht: &DMatrix<f64>,
    r_diag: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let mut s = hpht.clone();
    for (i, r) in r_diag.iter().enumerate() {
        s[(i, i)] += r;
    }
    let rhs = pht.transpose();
    Ok(spd_solve(s, rhs)?.transpose())
}

/// Solves `S X = B` for symmetric positive definite `S`, falling back to LU
/// when round-off has made `S` lose definiteness.
pub(crate) fn spd_solve(s: DMatrix<f64>, b: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.nrows() == 0 {
        return Ok(b);
    }
    match s.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&b)),
        None => s
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Numerical("singular innovation covariance".into())),
    }
}

/// Symmetric generalized inverse through an eigendecomposition, dropping
/// eigenvalues below `rel_tol` times the largest one. Returns the inverse and
/// whether anything was truncated.
pub fn symmetric_pinv(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, bool) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), false);
    }
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    let cut = rel_tol * max;
    let mut truncated = false;
    let inv_vals = DVector::from_iterator(
        n,
        eig.eigenvalues.iter().map(|&v| {
            if v > cut && max > 0.0 {
                1.0 / v
            } else {
                truncated = true;
                0.0
            }
        }),
    );
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= inv_vals[j];
    }
    (scaled * q.transpose(), truncated)
}
