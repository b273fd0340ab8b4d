//! Ensemble verification: CRPS, relative skill and rank histograms.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CRPS of the empirical distribution of `values` at `truth`:
/// `mean|x_i - t| - mean_{i,j}|x_i - x_j| / 2`.
pub fn crps_empirical(values: &[f64], truth: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("CRPS of an empty ensemble".into()));
    }
    if !truth.is_finite() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("CRPS needs finite values".into()));
    }
    let k = values.len() as f64;
    let abs_err = values.iter().map(|x| (x - truth).abs()).sum::<f64>() / k;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sum_{i,j} |x_i - x_j| = 2 sum_i (2i - k + 1) x_(i)
    let spread: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - k + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    Ok((abs_err - spread / (2.0 * k * k)).max(0.0))
}

/// Mean CRPS over grid points; `ensemble` is `k x n`, one column per point.
pub fn field_crps(ensemble: &DMatrix<f64>, truth: &[f64]) -> Result<f64> {
    if ensemble.ncols() != truth.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "ensemble has {} columns, truth {} values",
            ensemble.ncols(),
            truth.len()
        )));
    }
    let total = ensemble
        .column_iter()
        .zip(truth)
        .map(|(col, &t)| crps_empirical(col.as_slice(), t))
        .sum::<Result<f64>>()?;
    Ok(total / truth.len() as f64)
}

/// Rank of `truth` among `members` (0..=k); ties are placed uniformly at
/// random among the tied positions.
pub fn rank_of<R: Rng + ?Sized>(members: &[f64], truth: f64, rng: &mut R) -> usize {
    let below = members.iter().filter(|&&x| x < truth).count();
    let ties = members.iter().filter(|&&x| x == truth).count();
    if ties == 0 {
        below
    } else {
        below + rng.random_range(0..=ties)
    }
}

/// Which samples enter a rank histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thinning {
    /// Keep every `space`-th grid point, starting at 0.
    pub space: usize,
    /// Keep times that are multiples of this many seconds.
    pub time: f64,
}

impl Default for Thinning {
    fn default() -> Self {
        Self {
            space: 10,
            time: 1800.0,
        }
    }
}

impl Thinning {
    pub fn keeps_time(&self, seconds: f64) -> bool {
        let q = seconds / self.time;
        (q - q.round()).abs() < 1e-9
    }
}

/// Rank counts for a `k`-member ensemble.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankHistogram {
    pub counts: Vec<u64>,
}

impl RankHistogram {
    pub fn new(k: usize) -> Self {
        Self { counts: vec![0; k + 1] }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds the thinned points of one forecast (`k x n`) valid at `seconds`.
    pub fn add_field<R: Rng + ?Sized>(
        &mut self,
        ensemble: &DMatrix<f64>,
        truth: &[f64],
        seconds: f64,
        thin: Thinning,
        rng: &mut R,
    ) -> Result<()> {
        if ensemble.nrows() + 1 != self.counts.len() || ensemble.ncols() != truth.len() {
            return Err(Error::Shape(format!(
                "histogram for {} members, ensemble is {}x{}, truth has {} values",
                self.counts.len() - 1,
                ensemble.nrows(),
                ensemble.ncols(),
                truth.len()
            )));
        }
        if thin.space == 0 {
            return Err(Error::param("space_thin", "must be >= 1"));
        }
        if !thin.keeps_time(seconds) {
            return Ok(());
        }
        for j in (0..truth.len()).step_by(thin.space) {
            let col = ensemble.column(j);
            self.counts[rank_of(col.as_slice(), truth[j], rng)] += 1;
        }
        Ok(())
    }
}

/// Rank histogram over a sequence of `(forecast k x n, truth, valid time)`.
pub fn rank_histogram<R: Rng + ?Sized>(
    samples: &[(DMatrix<f64>, Vec<f64>, f64)],
    thin: Thinning,
    rng: &mut R,
) -> Result<RankHistogram> {
    let k = samples
        .first()
        .map(|s| s.0.nrows())
        .ok_or_else(|| Error::InvalidInput("no forecasts to rank".into()))?;
    let mut hist = RankHistogram::new(k);
    for (ens, truth, t) in samples {
        hist.add_field(ens, truth, *t, thin, rng)?;
    }
    if hist.total() == 0 {
        return Err(Error::InvalidInput("thinning left no samples".into()));
    }
    Ok(hist)
}

/// Physical field of the stacked SWEQ state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Field {
    #[serde(rename = "h")]
    Height,
    #[serde(rename = "u")]
    Wind,
    #[serde(rename = "r")]
    Rain,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::Height, Field::Wind, Field::Rain];

    pub fn name(self) -> &'static str {
        match self {
            Field::Height => "h",
            Field::Wind => "u",
            Field::Rain => "r",
        }
    }

    /// Position of the field's block in the stacked state.
    pub fn offset(self, n_points: usize) -> usize {
        n_points
            * match self {
                Field::Height => 0,
                Field::Wind => 1,
                Field::Rain => 2,
            }
    }
}

/// `100 * crps / crps_free`, undefined for a perfect free forecast.
pub fn relative_pct(crps: f64, crps_free: f64) -> Option<f64> {
    (crps_free > 0.0).then(|| 100.0 * (crps / crps_free))
}

/// One score line. `crps` is `None` when the method failed in that cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub rep: u64,
    pub cycle: usize,
    pub method: String,
    pub field: Field,
    pub crps: Option<f64>,
    pub crps_free: f64,
    pub relative_pct: Option<f64>,
}

impl ScoreRecord {
    pub fn new(rep: u64, cycle: usize, method: &str, field: Field, crps: Option<f64>, crps_free: f64) -> Self {
        Self {
            rep,
            cycle,
            method: method.to_string(),
            field,
            crps,
            crps_free,
            relative_pct: crps.and_then(|c| relative_pct(c, crps_free)),
        }
    }
}

/// CSV writer with header `rep,cycle,method,field,crps,crps_free,relative_pct`.
pub struct ScoreWriter<W: Write> {
    inner: csv::Writer<W>,
    empty: bool,
}

const SCORE_HEADER: [&str; 7] = ["rep", "cycle", "method", "field", "crps", "crps_free", "relative_pct"];

impl<W: Write> ScoreWriter<W> {
    pub fn new(writer: W) -> Self {
        Self {
            inner: csv::WriterBuilder::new().has_headers(true).from_writer(writer),
            empty: true,
        }
    }

    pub fn write(&mut self, record: &ScoreRecord) -> Result<()> {
        self.inner.serialize(record)?;
        self.empty = false;
        Ok(())
    }

    /// Flushes; a file without records still gets its header.
    pub fn finish(mut self) -> Result<W> {
        if self.empty {
            self.inner.write_record(SCORE_HEADER)?;
        }
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(e.error().to_string()))
    }
}

pub fn read_scores<R: std::io::Read>(reader: R) -> Result<Vec<ScoreRecord>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_stream;

    #[test]
    fn crps_examples() {
        assert_eq!(crps_empirical(&[3.0], 1.5).unwrap(), 1.5);
        assert_eq!(crps_empirical(&[2.0, 2.0, 2.0], 2.0).unwrap(), 0.0);
        assert_eq!(crps_empirical(&[0.0, 1.0], 0.0).unwrap(), 0.25);
        assert!(crps_empirical(&[], 0.0).is_err());
    }

    #[test]
    fn crps_matches_pairwise_formula() {
        let mut rng = seed_stream(8, 0, 0, 0, 0);
        for _ in 0..200 {
            let k = rng.random_range(1..15);
            let xs: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = rng.random_range(-2.0..2.0);
            let kf = k as f64;
            let a = xs.iter().map(|x| (x - t).abs()).sum::<f64>() / kf;
            let b = xs
                .iter()
                .flat_map(|x| xs.iter().map(move |y| (x - y).abs()))
                .sum::<f64>()
                / (2.0 * kf * kf);
            assert!((crps_empirical(&xs, t).unwrap() - (a - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn field_crps_averages() {
        let ens = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let c = field_crps(&ens, &[1.0, 0.0]).unwrap();
        assert!((c - 0.25 / 2.0).abs() < 1e-15);
        assert!(field_crps(&ens, &[1.0]).is_err());
    }

    #[test]
    fn ranks_and_ties() {
        let mut rng = seed_stream(0, 0, 0, 0, 0);
        assert_eq!(rank_of(&[1.0, 2.0, 3.0], 0.0, &mut rng), 0);
        assert_eq!(rank_of(&[1.0, 2.0, 3.0], 2.5, &mut rng), 2);
        let n = 10_000;
        let zeros = (0..n).filter(|_| rank_of(&[1.0], 1.0, &mut rng) == 0).count();
        assert!((zeros as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn thinning() {
        let thin = Thinning::default();
        let mut rng = seed_stream(0, 0, 0, 0, 0);
        let ens = DMatrix::from_element(4, 25, 1.0);
        let truth = vec![0.0; 25];
        let mut h = RankHistogram::new(4);
        h.add_field(&ens, &truth, 300.0, thin, &mut rng).unwrap();
        assert_eq!(h.total(), 0);
        h.add_field(&ens, &truth, 3600.0, thin, &mut rng).unwrap();
        assert_eq!(h.counts, vec![3, 0, 0, 0, 0]);
    }

    #[test]
    fn csv_header_and_failed_rows() {
        let mut w = ScoreWriter::new(Vec::new());
        w.write(&ScoreRecord::new(0, 1, "lenkf", Field::Rain, Some(0.5), 1.0)).unwrap();
        w.write(&ScoreRecord::new(0, 1, "pf_global", Field::Height, None, 1.0)).unwrap();
        w.write(&ScoreRecord::new(0, 1, "free", Field::Wind, Some(0.0), 0.0)).unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        assert_eq!(
            text,
            "rep,cycle,method,field,crps,crps_free,relative_pct\n\
             0,1,lenkf,r,0.5,1.0,50.0\n\
             0,1,pf_global,h,,1.0,\n\
             0,1,free,u,0.0,0.0,\n"
        );
        let back = read_scores(text.as_bytes()).unwrap();
        let empty = ScoreWriter::new(Vec::new()).finish().unwrap();
        assert_eq!(empty, b"rep,cycle,method,field,crps,crps_free,relative_pct\n");
        assert!(read_scores(&empty[..]).unwrap().is_empty());
        assert_eq!(back[0].relative_pct, Some(50.0));
        assert_eq!(back[1].crps, None);
    }
}
