//! Gaspari–Cohn tapering and tapered (Schur-product) covariance estimates.

use nalgebra::DMatrix;

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::grid::{FieldLayout, GridGeometry};

/// Fifth-order piecewise rational correlation of Gaspari and Cohn with
/// half-length `c`. Compactly supported on `[0, 2c)`.
pub fn gaspari_cohn(distance: f64, c: f64) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::param("c", format!("must be positive, got {c}")));
    }
    if !(distance >= 0.0) {
        return Err(Error::param("distance", format!("must be >= 0, got {distance}")));
    }
    Ok(gc_unchecked(distance / c))
}

fn gc_unchecked(z: f64) -> f64 {
    if z <= 1.0 {
        (((-0.25 * z + 0.5) * z + 0.625) * z - 5.0 / 3.0) * z * z + 1.0
    } else if z < 2.0 {
        ((((z / 12.0 - 0.5) * z + 0.625) * z + 5.0 / 3.0) * z - 5.0) * z + 4.0 - 2.0 / (3.0 * z)
    } else {
        0.0
    }
}

/// Localization half-length on a periodic grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaperSpec {
    half_length: f64,
    geometry: GridGeometry,
}

impl TaperSpec {
    pub fn new(half_length: f64, geometry: GridGeometry) -> Result<Self> {
        if !(half_length > 0.0 && half_length.is_finite()) {
            return Err(Error::param(
                "half_length",
                format!("must be positive, got {half_length}"),
            ));
        }
        Ok(Self {
            half_length,
            geometry,
        })
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    /// Taper weight between two grid points.
    pub fn point_weight(&self, i: usize, j: usize) -> f64 {
        gc_unchecked(self.geometry.distance(i, j) / self.half_length)
    }

    /// Dense `n x n` taper matrix on the grid points.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.geometry.n_points();
        DMatrix::from_fn(n, n, |i, j| self.point_weight(i, j))
    }
}

/// Taper weights between state columns.
pub trait Taper: Send + Sync {
    fn dim(&self) -> usize;

    fn weight(&self, a: usize, b: usize) -> f64;

    /// Columns with non-zero weight to `a`, ascending; includes `a` itself.
    fn support(&self, a: usize) -> Vec<usize>;
}

/// Spatial Gaspari–Cohn taper applied uniformly to every variable: the
/// weight between two columns depends only on the distance of their points.
#[derive(Debug, Clone)]
pub struct GridTaper {
    spec: TaperSpec,
    layout: FieldLayout,
    by_offset: Vec<f64>,
}

impl GridTaper {
    pub fn new(spec: TaperSpec, layout: FieldLayout) -> Result<Self> {
        if spec.geometry() != layout.geometry() {
            return Err(Error::Shape("taper and layout use different grids".into()));
        }
        let g = spec.geometry();
        let by_offset = (0..=g.n_points() / 2)
            .map(|off| gc_unchecked(off as f64 * g.dx() / spec.half_length()))
            .collect();
        Ok(Self {
            spec,
            layout,
            by_offset,
        })
    }

    pub fn spec(&self) -> &TaperSpec {
        &self.spec
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    /// Largest grid offset with non-zero weight.
    pub fn reach(&self) -> usize {
        self.by_offset.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

impl Taper for GridTaper {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn weight(&self, a: usize, b: usize) -> f64 {
        let g = self.layout.geometry();
        self.by_offset[g.circular_offset(self.layout.point(a), self.layout.point(b))]
    }

    fn support(&self, a: usize) -> Vec<usize> {
        let g = self.layout.geometry();
        let n = g.n_points();
        let p = self.layout.point(a);
        let reach = self.reach();
        let mut cols: Vec<usize> = if 2 * reach + 1 >= n {
            (0..self.layout.dim()).collect()
        } else {
            (0..=2 * reach)
                .flat_map(|s| self.layout.columns_at((p + n - reach + s) % n).iter().copied())
                .collect()
        };
        cols.sort_unstable();
        cols
    }
}

/// Explicit column-by-column taper; used for small systems and for switching
/// localization off (all ones).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTaper {
    weights: DMatrix<f64>,
}

impl DenseTaper {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if !weights.is_square() {
            return Err(Error::Shape("taper matrix must be square".into()));
        }
        if (&weights - weights.transpose()).abs().max() > 0.0 {
            return Err(Error::InvalidInput("taper matrix must be symmetric".into()));
        }
        Ok(Self { weights })
    }

    pub fn ones(d: usize) -> Self {
        Self {
            weights: DMatrix::from_element(d, d, 1.0),
        }
    }
}

impl Taper for DenseTaper {
    fn dim(&self) -> usize {
        self.weights.nrows()
    }

    fn weight(&self, a: usize, b: usize) -> f64 {
        self.weights[(a, b)]
    }

    fn support(&self, a: usize) -> Vec<usize> {
        (0..self.dim())
            .filter(|&b| b == a || self.weights[(a, b)] != 0.0)
            .collect()
    }
}

/// Row-compressed symmetric covariance, exactly zero wherever the taper is.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCov {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCov {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&j) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Schur product of the sample covariance with the taper.
pub fn tapered_covariance(ens: &Ensemble, taper: &dyn Taper) -> Result<SparseCov> {
    let d = ens.dim();
    if taper.dim() != d {
        return Err(Error::Shape(format!(
            "taper covers {} columns, ensemble has {d}",
            taper.dim()
        )));
    }
    let a = ens.anomalies();
    let scale = 1.0 / (ens.size() as f64 - 1.0);
    let mut row_ptr = Vec::with_capacity(d + 1);
    let mut cols = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for i in 0..d {
        for j in taper.support(i) {
            let w = taper.weight(i, j);
            if w != 0.0 {
                cols.push(j);
                values.push(w * scale * a.column(i).dot(&a.column(j)));
            }
        }
        row_ptr.push(cols.len());
    }
    Ok(SparseCov {
        dim: d,
        row_ptr,
        cols,
        values,
    })
}

/// Tapered cross-covariance block between two column sets, from anomalies
/// that were taken over those same column sets (`k x rows.len()` and
/// `k x cols.len()`).
pub fn tapered_cross_cov(
    row_anom: &DMatrix<f64>,
    rows: &[usize],
    col_anom: &DMatrix<f64>,
    cols: &[usize],
    taper: &dyn Taper,
) -> DMatrix<f64> {
    let scale = 1.0 / (row_anom.nrows() as f64 - 1.0);
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        let w = taper.weight(rows[i], cols[j]);
        if w == 0.0 {
            0.0
        } else {
            w * scale * row_anom.column(i).dot(&col_anom.column(j))
        }
    })
}

/// Tapered covariance of one column set with itself.
pub fn tapered_block_cov(anom: &DMatrix<f64>, cols: &[usize], taper: &dyn Taper) -> DMatrix<f64> {
    let s = cols.len();
    let scale = 1.0 / (anom.nrows() as f64 - 1.0);
    let mut m = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in i..s {
            let w = taper.weight(cols[i], cols[j]);
            if w != 0.0 {
                let v = w * scale * anom.column(i).dot(&anom.column(j));
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::ensemble_moments;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn gc_worked_values() {
        assert_eq!(gaspari_cohn(0.0, 3.0).unwrap(), 1.0);
        assert_eq!(gaspari_cohn(6.0, 3.0).unwrap(), 0.0);
        assert_eq!(gaspari_cohn(60.0, 3.0).unwrap(), 0.0);
        // Both branches of the quintic evaluated at z = 1 by hand give 5/24.
        assert!((gaspari_cohn(3.0, 3.0).unwrap() - 5.0 / 24.0).abs() < 1e-15);
        assert!((gc_unchecked(1.0 + 1e-12) - 5.0 / 24.0).abs() < 1e-10);
        assert!(gaspari_cohn(1.0, 0.0).is_err());
        assert!(gaspari_cohn(1.0, -1.0).is_err());
    }

    #[test]
    fn gc_monotone_and_continuous() {
        let c = 5000.0;
        let mut prev = 1.0;
        for i in 0..=1000 {
            let r = 2.0 * c * i as f64 / 1000.0;
            let v = gaspari_cohn(r, c).unwrap();
            assert!(v <= prev + 1e-15, "not monotone at {r}");
            assert!((0.0..=1.0).contains(&v));
            assert!((prev - v) < 0.01, "jump at {r}");
            prev = v;
        }
        assert!(gc_unchecked(2.0 - 1e-9).abs() < 1e-12);
    }

    #[test]
    fn taper_matrix_is_a_valid_correlation() {
        // Support 2l within half the ring; beyond that arc-distance GC is not PSD.
        for (n, l) in [(64, 3.0), (40, 1.0), (17, 4.0), (64, 16.0)] {
            let spec = TaperSpec::new(l, GridGeometry::new(n, 1.0).unwrap()).unwrap();
            let c = spec.matrix();
            assert_eq!(c, c.transpose());
            assert!(c.diagonal().iter().all(|&v| v == 1.0));
            let eig = c.symmetric_eigen();
            assert!(eig.eigenvalues.min() >= -1e-8, "n={n} l={l}: {}", eig.eigenvalues.min());
        }
    }

    fn random_ensemble(k: usize, d: usize, seed: u64) -> Ensemble {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ensemble::background(DMatrix::from_fn(k, d, |_, _| StandardNormal.sample(&mut rng))).unwrap()
    }

    #[test]
    fn tapered_covariance_is_schur_product() {
        let geom = GridGeometry::new(20, 1.0).unwrap();
        let layout = FieldLayout::stacked(geom, 3);
        let taper = GridTaper::new(TaperSpec::new(2.5, geom).unwrap(), layout.clone()).unwrap();
        let ens = random_ensemble(12, 60, 3);
        let (_, cov) = ensemble_moments(&ens).unwrap();
        let tc = tapered_covariance(&ens, &taper).unwrap().to_dense();
        for i in 0..60 {
            for j in 0..60 {
                let w = gaspari_cohn(layout.distance(i, j), 2.5).unwrap();
                let expect = cov[(i, j)] * w;
                assert!((tc[(i, j)] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
                if w == 0.0 {
                    assert_eq!(tc[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn five_point_grid_against_precomputed_weights() {
        // l = 1 grid spacing: weights by offset are 1, 5/24, 0.
        let geom = GridGeometry::new(5, 1.0).unwrap();
        let taper =
            GridTaper::new(TaperSpec::new(1.0, geom).unwrap(), FieldLayout::stacked(geom, 1)).unwrap();
        let ens = random_ensemble(7, 5, 9);
        let (_, cov) = ensemble_moments(&ens).unwrap();
        let tc = tapered_covariance(&ens, &taper).unwrap();
        let by_offset = [1.0, 5.0 / 24.0, 0.0];
        for i in 0..5 {
            for j in 0..5 {
                let off = geom.circular_offset(i, j);
                assert!((tc.get(i, j) - cov[(i, j)] * by_offset[off]).abs() < 1e-12);
            }
        }
        assert_eq!(tc.get(0, 2), 0.0);
        assert_eq!(tc.get(0, 3), 0.0);
    }

    #[test]
    fn all_ones_taper_gives_sample_covariance() {
        let ens = random_ensemble(6, 8, 1);
        let (_, cov) = ensemble_moments(&ens).unwrap();
        let tc = tapered_covariance(&ens, &DenseTaper::ones(8)).unwrap().to_dense();
        assert!((tc - cov).abs().max() < 1e-13);
    }

    #[test]
    fn far_points_have_exactly_zero_covariance() {
        let geom = GridGeometry::new(300, 500.0).unwrap();
        let layout = FieldLayout::stacked(geom, 3);
        let taper = GridTaper::new(TaperSpec::new(5000.0, geom).unwrap(), layout).unwrap();
        assert_eq!(taper.reach(), 19);
        let ens = random_ensemble(5, 900, 4);
        let tc = tapered_covariance(&ens, &taper).unwrap();
        assert_eq!(tc.get(0, 20), 0.0);
        assert_eq!(tc.get(0, 300 + 20), 0.0);
        assert!(tc.get(0, 19) != 0.0);
        assert!(tc.get(0, 600 + 281) != 0.0); // wraps round
    }

    #[test]
    fn shape_mismatch() {
        let ens = random_ensemble(4, 6, 2);
        assert!(matches!(
            tapered_covariance(&ens, &DenseTaper::ones(5)),
            Err(Error::Shape(_))
        ));
    }
}
