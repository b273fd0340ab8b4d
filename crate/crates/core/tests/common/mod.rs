//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use enkpf::{Ensemble, GaussObs};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// `a a' + ridge I` for a random `a`.
pub fn random_spd<R: Rng>(d: usize, ridge: f64, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * ridge
}

/// `k` draws of `N(mean, cov)`, one per row.
pub fn gaussian_rows<R: Rng>(mean: &DVector<f64>, cov: &DMatrix<f64>, k: usize, rng: &mut R) -> DMatrix<f64> {
    let d = mean.len();
    let l = cov.clone().cholesky().expect("covariance is SPD").l();
    let z = DMatrix::from_fn(k, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut x = z * l.transpose();
    for mut row in x.row_iter_mut() {
        row += mean.transpose();
    }
    x
}

pub fn gaussian_ensemble<R: Rng>(mean: &DVector<f64>, cov: &DMatrix<f64>, k: usize, rng: &mut R) -> Ensemble {
    Ensemble::background(gaussian_rows(mean, cov, k, rng)).expect("finite members")
}

pub fn dense_h(obs: &GaussObs, d: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(obs.len(), d);
    for (i, &c) in obs.h_cols().iter().enumerate() {
        h[(i, c)] = 1.0;
    }
    h
}

pub fn dense_r(obs: &GaussObs) -> DMatrix<f64> {
    DMatrix::from_diagonal(obs.r_diag())
}

/// `P H' (H P H' + R)^-1` by explicit inversion.
pub fn gain(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let s = h * p * h.transpose() + r;
    p * h.transpose() * s.try_inverse().expect("innovation covariance invertible")
}

/// Exact Kalman posterior `(mean, cov)`.
pub fn kalman_posterior(mean: &DVector<f64>, p: &DMatrix<f64>, obs: &GaussObs) -> (DVector<f64>, DMatrix<f64>) {
    let d = mean.len();
    let h = dense_h(obs, d);
    let k = gain(p, &h, &dense_r(obs));
    let post_mean = mean + &k * (obs.y() - &h * mean);
    let post_cov = (DMatrix::identity(d, d) - &k * &h) * p;
    (post_mean, post_cov)
}

/// Row mean and unbiased covariance of a sample.
pub fn sample_moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_sum().transpose() / n;
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = c.tr_mul(&c) / (n - 1.0);
    (mean, cov)
}

/// Exact CRPS of the empirical step CDF, by the trapezoid rule on the
/// pieces between breakpoints. The integrand is constant on each piece, so
/// evaluating it at one-sided limits makes every trapezoid exact.
pub fn crps_by_integration(values: &[f64], truth: f64) -> f64 {
    let k = values.len() as f64;
    let mut knots: Vec<f64> = values.iter().copied().chain([truth]).collect();
    knots.sort_by(f64::total_cmp);
    let integrand = |x: f64| {
        let f = values.iter().filter(|&&v| v <= x).count() as f64 / k;
        let step = if x >= truth { 1.0 } else { 0.0 };
        (f - step).powi(2)
    };
    knots
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let eps = (b - a) * 1e-9;
            0.5 * (integrand(a + eps) + integrand(b - eps)) * (b - a)
        })
        .sum()
}
