//! The ensemble of state vectors that every filter transforms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    Background,
    Analysis,
}

/// `k` state vectors of dimension `d`, stored as a `k x d` matrix (one row per member).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
    kind: EnsembleKind,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>, kind: EnsembleKind) -> Result<Self> {
        if members.nrows() < 2 {
            return Err(Error::InsufficientEnsemble(members.nrows()));
        }
        if let Some(pos) = members.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % members.nrows(), pos / members.nrows());
            return Err(Error::Numerical(format!(
                "non-finite value in member {row}, column {col}"
            )));
        }
        Ok(Self { members, kind })
    }

    pub fn background(members: DMatrix<f64>) -> Result<Self> {
        Self::new(members, EnsembleKind::Background)
    }

    pub fn from_rows(rows: &[Vec<f64>], kind: EnsembleKind) -> Result<Self> {
        let k = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged ensemble rows".into()));
        }
        Self::new(DMatrix::from_fn(k, d, |i, j| rows[i][j]), kind)
    }

    pub fn size(&self) -> usize {
        self.members.nrows()
    }

    pub fn dim(&self) -> usize {
        self.members.ncols()
    }

    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    pub fn member(&self, i: usize) -> DVector<f64> {
        self.members.row(i).transpose()
    }

    /// Sub-ensemble holding only the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> DMatrix<f64> {
        self.members.select_columns(cols)
    }

    pub(crate) fn with_members(members: DMatrix<f64>, kind: EnsembleKind) -> Self {
        Self { members, kind }
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.row_mean().transpose()
    }

    /// Member deviations from the ensemble mean.
    pub fn anomalies(&self) -> DMatrix<f64> {
        anomalies_of(&self.members)
    }
}

pub(crate) fn anomalies_of(members: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = members.row_mean();
    let mut a = members.clone();
    for mut row in a.row_iter_mut() {
        row -= &mean;
    }
    a
}

/// Sample mean and unbiased (k - 1) sample covariance.
pub fn ensemble_moments(ens: &Ensemble) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = ens.size();
    if k < 2 {
        return Err(Error::InsufficientEnsemble(k));
    }
    let a = ens.anomalies();
    let mut cov = a.tr_mul(&a) / (k as f64 - 1.0);
    // Symmetrize away round-off.
    let cov_t = cov.transpose();
    cov += cov_t;
    cov *= 0.5;
    Ok((ens.mean(), cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn rejects_single_member_and_nan() {
        assert!(matches!(
            Ensemble::background(DMatrix::zeros(1, 3)),
            Err(Error::InsufficientEnsemble(1))
        ));
        let mut m = DMatrix::zeros(3, 2);
        m[(1, 1)] = f64::NAN;
        assert!(Ensemble::background(m).is_err());
    }

    #[test]
    fn identical_members_have_zero_covariance() {
        let v = [1.5, -2.0, 7.0];
        let ens = Ensemble::background(DMatrix::from_fn(4, 3, |_, j| v[j])).unwrap();
        let (mean, cov) = ensemble_moments(&ens).unwrap();
        assert_eq!(mean.as_slice(), &v);
        assert!(cov.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn two_scalar_members() {
        let ens = Ensemble::background(DMatrix::from_column_slice(2, 1, &[0.0, 2.0])).unwrap();
        let (mean, cov) = ensemble_moments(&ens).unwrap();
        assert_eq!(mean[0], 1.0);
        assert_eq!(cov[(0, 0)], 2.0);
    }

    #[test]
    fn standard_normal_sample_covariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let k = 10_000;
        let m = DMatrix::from_fn(k, 3, |_, _| StandardNormal.sample(&mut rng));
        let (_, cov) = ensemble_moments(&Ensemble::background(m).unwrap()).unwrap();
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!((cov - eye).abs().max() < 0.05);
    }
}
