//! Linear-Gaussian observations with a column-selecting operator.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Observed values `y`, the state column each observation reads (`H` has a
/// single unit entry per row) and the diagonal of `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussObs {
    y: DVector<f64>,
    h_cols: Vec<usize>,
    r_diag: DVector<f64>,
}

impl GaussObs {
    pub fn new(y: Vec<f64>, h_cols: Vec<usize>, r_diag: Vec<f64>) -> Result<Self> {
        if y.len() != h_cols.len() || y.len() != r_diag.len() {
            return Err(Error::Shape(format!(
                "y has {} rows, H {} and R {}",
                y.len(),
                h_cols.len(),
                r_diag.len()
            )));
        }
        if let Some(r) = r_diag.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::param("r_diag", format!("variances must be > 0, got {r}")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite observation".into()));
        }
        Ok(Self {
            y: DVector::from_vec(y),
            h_cols,
            r_diag: DVector::from_vec(r_diag),
        })
    }

    pub fn empty() -> Self {
        Self {
            y: DVector::zeros(0),
            h_cols: Vec::new(),
            r_diag: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.h_cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_cols.is_empty()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn h_cols(&self) -> &[usize] {
        &self.h_cols
    }

    pub fn r_diag(&self) -> &DVector<f64> {
        &self.r_diag
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        match self.h_cols.iter().find(|&&c| c >= d) {
            Some(c) => Err(Error::Shape(format!(
                "observation reads column {c}, state has {d}"
            ))),
            None => Ok(()),
        }
    }

    /// Observations with the given row indices.
    pub fn subset(&self, rows: &[usize]) -> GaussObs {
        GaussObs {
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            h_cols: rows.iter().map(|&i| self.h_cols[i]).collect(),
            r_diag: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.r_diag[i])),
        }
    }

    /// Same observations read from a reduced state: `col_map[c]` is the new
    /// position of state column `c`.
    pub fn remap_columns(&self, col_map: impl Fn(usize) -> usize) -> GaussObs {
        GaussObs {
            y: self.y.clone(),
            h_cols: self.h_cols.iter().map(|&c| col_map(c)).collect(),
            r_diag: self.r_diag.clone(),
        }
    }

    /// `H x` for every member: `k x m`.
    pub fn apply(&self, members: &DMatrix<f64>) -> DMatrix<f64> {
        members.select_columns(&self.h_cols)
    }

    /// Innovations `y - H x_i`, one row per member.
    pub fn innovations(&self, members: &DMatrix<f64>) -> DMatrix<f64> {
        let mut d = self.apply(members);
        for mut row in d.row_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.y[j] - *v;
            }
        }
        d
    }

    /// Dense `m x d` operator, for tests and small systems.
    pub fn h_matrix(&self, d: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.len(), d);
        for (i, &c) in self.h_cols.iter().enumerate() {
            h[(i, c)] = 1.0;
        }
        h
    }
}
