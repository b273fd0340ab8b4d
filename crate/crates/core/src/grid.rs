//! Periodic 1D grid geometry and the mapping from state columns to grid points.

use crate::error::{Error, Result};

/// A periodic one-dimensional grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    n_points: usize,
    dx: f64,
}

impl GridGeometry {
    pub fn new(n_points: usize, dx: f64) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::param("n_points", format!("need at least 2, got {n_points}")));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(Error::param("dx", format!("must be positive, got {dx}")));
        }
        Ok(Self { n_points, dx })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn length(&self) -> f64 {
        self.n_points as f64 * self.dx
    }

    /// Number of grid steps between two points going the short way round.
    pub fn circular_offset(&self, i: usize, j: usize) -> usize {
        let d = i.abs_diff(j) % self.n_points;
        d.min(self.n_points - d)
    }

    /// Circular distance in meters.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.circular_offset(i, j) as f64 * self.dx
    }

    /// Grid points within `radius` meters of `center`, in ascending offset order
    /// (center, +1, -1, +2, -2, ...). Each point is listed once.
    pub fn points_within(&self, center: usize, radius: f64) -> Vec<usize> {
        // Small slack so that radius = m * dx includes the m-th neighbour.
        let reach = ((radius + 1e-9 * self.dx) / self.dx).floor() as usize;
        let reach = reach.min(self.n_points / 2);
        let mut out = Vec::with_capacity(2 * reach + 1);
        out.push(center);
        for off in 1..=reach {
            let right = (center + off) % self.n_points;
            let left = (center + self.n_points - off) % self.n_points;
            out.push(right);
            if left != right {
                out.push(left);
            }
        }
        out
    }
}

/// Maps every state column to the grid point it lives at.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldLayout {
    geometry: GridGeometry,
    points: Vec<usize>,
    by_point: Vec<Vec<usize>>,
}

impl FieldLayout {
    pub fn new(geometry: GridGeometry, points: Vec<usize>) -> Result<Self> {
        let n = geometry.n_points();
        let mut by_point = vec![Vec::new(); n];
        for (col, &p) in points.iter().enumerate() {
            if p >= n {
                return Err(Error::Shape(format!(
                    "column {col} mapped to point {p}, grid has {n} points"
                )));
            }
            by_point[p].push(col);
        }
        Ok(Self {
            geometry,
            points,
            by_point,
        })
    }

    /// `n_vars` fields stored one after another: (a_1..a_n, b_1..b_n, ...).
    pub fn stacked(geometry: GridGeometry, n_vars: usize) -> Self {
        let n = geometry.n_points();
        let points = (0..n_vars).flat_map(|_| 0..n).collect();
        Self::new(geometry, points).expect("stacked layout is always valid")
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn point(&self, col: usize) -> usize {
        self.points[col]
    }

    /// State columns located at grid point `p`.
    pub fn columns_at(&self, p: usize) -> &[usize] {
        &self.by_point[p]
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.geometry.distance(self.points[a], self.points[b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(GridGeometry::new(1, 1.0).is_err());
        assert!(GridGeometry::new(4, 0.0).is_err());
        assert!(GridGeometry::new(4, -2.0).is_err());
    }

    #[test]
    fn circular_distance_wraps() {
        let g = GridGeometry::new(300, 500.0).unwrap();
        assert_eq!(g.distance(0, 299), 500.0);
        assert_eq!(g.distance(10, 10), 0.0);
        assert_eq!(g.distance(0, 150), 75_000.0);
        for (i, j) in [(3, 250), (0, 1), (120, 7)] {
            assert_eq!(g.distance(i, j), g.distance(j, i));
        }
    }

    #[test]
    fn window_of_five_km_has_21_points() {
        let g = GridGeometry::new(300, 500.0).unwrap();
        let w = g.points_within(0, 5000.0);
        assert_eq!(w.len(), 21);
        assert!(w.contains(&290) && w.contains(&10) && !w.contains(&11));
    }

    #[test]
    fn stacked_layout() {
        let g = GridGeometry::new(4, 1.0).unwrap();
        let l = FieldLayout::stacked(g, 3);
        assert_eq!(l.dim(), 12);
        assert_eq!(l.point(5), 1);
        assert_eq!(l.columns_at(2), &[2, 6, 10]);
    }
}
