//! Global analysis steps: stochastic EnKF, particle filter weights with
//! balanced resampling, and the ensemble Kalman particle filter (EnKPF).
//!
//! The EnKPF splits the analysis in two: an EnKF step with the background
//! covariance damped by `gamma`, giving a Gaussian mixture with centres `nu`
//! and common covariance `Q`, followed by a particle-filter step with the
//! remaining `1 - gamma` power of the likelihood. `gamma = 1` is the
//! stochastic EnKF, `gamma = 0` the particle filter.
//!
//! All random inputs come from an [`EnsembleNoise`], drawn in a fixed order:
//! observation perturbations first, then the second-stage draws, then one
//! uniform for resampling. Because the perturbations come first, an EnKPF at
//! `gamma = 1` consumes exactly the draws of [`enkf_update`] and reproduces it
//! bit for bit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::ensemble::{Ensemble, EnsembleKind};
use crate::error::{Error, Result};
use crate::linalg::{gain_from_parts, kalman_gain};
use crate::obs::GaussObs;
use crate::rng::standard_normals;

/// Normalized, non-negative mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if alpha.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::InvalidInput("weights must be finite and >= 0".into()));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(alpha))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// Normalizes log-weights with max subtraction.
    pub fn from_log(log_w: &[f64]) -> Result<Self> {
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        let mut w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        Ok(Self(w))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Effective sample size `1 / sum(alpha^2)`.
pub fn ess(w: &MixtureWeights) -> f64 {
    1.0 / w.0.iter().map(|a| a * a).sum::<f64>()
}

/// Resampled member indices (0-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResampleIndices(Vec<usize>);

impl ResampleIndices {
    pub fn new(idx: Vec<usize>) -> Result<Self> {
        let k = idx.len();
        if let Some(i) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidInput(format!("index {i} out of range for k = {k}")));
        }
        Ok(Self(idx))
    }

    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// `N_j`, the number of times member `j` was selected.
    pub fn counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.0.len()];
        for &i in &self.0 {
            n[i] += 1;
        }
        n
    }

    pub fn fixed_points(&self) -> usize {
        self.0.iter().enumerate().filter(|(i, j)| i == *j).count()
    }

    pub fn is_identity(&self) -> bool {
        self.fixed_points() == self.0.len()
    }
}

/// Systematic resampling: one uniform `u`, pointers `(u + i) / k`.
///
/// Scaled cumulative weights within 1e-10 of an integer are snapped to it so
/// that integer `k * alpha_j` produce exactly that many copies whatever `u` is.
pub fn systematic_resample(w: &MixtureWeights, u: f64) -> ResampleIndices {
    let k = w.len();
    let kf = k as f64;
    let mut idx = Vec::with_capacity(k);
    let mut cum = 0.0;
    for (l, a) in w.0.iter().enumerate() {
        cum += kf * a;
        let mut edge = cum;
        let r = edge.round();
        if (edge - r).abs() < 1e-10 * kf.max(1.0) {
            edge = r;
        }
        if l + 1 == k {
            edge = kf;
        }
        // Pointers u + i that fall below this edge belong to member l.
        while idx.len() < k && (u + idx.len() as f64) < edge {
            idx.push(l);
        }
    }
    ResampleIndices(idx)
}

/// Balanced (systematic) resampling with the uniform drawn from `rng`.
pub fn balanced_resample<R: Rng + ?Sized>(w: &MixtureWeights, rng: &mut R) -> ResampleIndices {
    let u: f64 = rng.random();
    systematic_resample(w, u)
}

/// Every random input of one analysis, as standard normals.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleNoise {
    /// `k x m`, observation perturbations (scaled by `sqrt(r)` at use).
    pub eta: DMatrix<f64>,
    /// `k x m`, second-stage draws for the EnKPF perturbation.
    pub xi: DMatrix<f64>,
    /// Shared offset for balanced resampling.
    pub uniform: f64,
}

impl EnsembleNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, k: usize, m: usize) -> Self {
        let eta = standard_normals(rng, k, m);
        let xi = standard_normals(rng, k, m);
        let uniform = rng.random();
        Self { eta, xi, uniform }
    }

    /// The noise belonging to a subset of observation rows.
    pub fn select_obs(&self, rows: &[usize]) -> Self {
        Self {
            eta: self.eta.select_columns(rows),
            xi: self.xi.select_columns(rows),
            uniform: self.uniform,
        }
    }
}

fn check_inputs(ens: &Ensemble, obs: &GaussObs, p: &DMatrix<f64>) -> Result<()> {
    let d = ens.dim();
    if p.nrows() != d || p.ncols() != d {
        return Err(Error::Shape(format!(
            "covariance is {}x{}, state has dimension {d}",
            p.nrows(),
            p.ncols()
        )));
    }
    obs.check_dim(d)
}

fn check_noise(noise: &DMatrix<f64>, k: usize, m: usize) -> Result<()> {
    if noise.nrows() != k || noise.ncols() != m {
        return Err(Error::Shape(format!(
            "noise is {}x{}, expected {k}x{m}",
            noise.nrows(),
            noise.ncols()
        )));
    }
    Ok(())
}

/// Stochastic EnKF: `x_a = x_b + K(P) (y - H x_b + eps)`, `eps ~ N(0, R)`.
pub fn enkf_update<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &GaussObs,
    p: &DMatrix<f64>,
    rng: &mut R,
) -> Result<Ensemble> {
    let eta = standard_normals(rng, ens.size(), obs.len());
    enkf_with_perturbations(ens, obs, p, &eta)
}

/// EnKF with given standard-normal perturbations `eta` (`k x m`).
pub fn enkf_with_perturbations(
    ens: &Ensemble,
    obs: &GaussObs,
    p: &DMatrix<f64>,
    eta: &DMatrix<f64>,
) -> Result<Ensemble> {
    check_inputs(ens, obs, p)?;
    check_noise(eta, ens.size(), obs.len())?;
    let x = ens.members();
    if obs.is_empty() {
        return Ok(Ensemble::with_members(x.clone(), EnsembleKind::Analysis));
    }
    let gain = kalman_gain(p, obs.h_cols(), obs.r_diag())?;
    let mut innov = obs.innovations(x);
    add_scaled_noise(&mut innov, eta, obs.r_diag(), 1.0);
    let xa = x + innov * gain.transpose();
    Ok(Ensemble::with_members(xa, EnsembleKind::Analysis))
}

/// `target += noise * sqrt(r_j * scale)` column by column.
fn add_scaled_noise(target: &mut DMatrix<f64>, noise: &DMatrix<f64>, r: &DVector<f64>, scale: f64) {
    for (j, (mut col, ncol)) in target.column_iter_mut().zip(noise.column_iter()).enumerate() {
        col.axpy((r[j] * scale).sqrt(), &ncol, 1.0);
    }
}

/// Gaussian log-likelihood up to a constant, with diagonal `R`.
fn diag_loglik(innov: &DMatrix<f64>, r: &DVector<f64>) -> Vec<f64> {
    innov
        .row_iter()
        .map(|row| {
            -0.5 * row
                .iter()
                .zip(r.iter())
                .map(|(d, r)| d * d / r)
                .sum::<f64>()
        })
        .collect()
}

/// Particle filter weights `alpha_i ∝ l(x_i | y)^power`.
pub fn pf_weights(ens: &Ensemble, obs: &GaussObs, likelihood_power: f64) -> Result<MixtureWeights> {
    if !(likelihood_power > 0.0 && likelihood_power <= 1.0) {
        return Err(Error::param(
            "likelihood_power",
            format!("must lie in (0, 1], got {likelihood_power}"),
        ));
    }
    obs.check_dim(ens.dim())?;
    let innov = obs.innovations(ens.members());
    let log_w: Vec<f64> = diag_loglik(&innov, obs.r_diag())
        .into_iter()
        .map(|l| likelihood_power * l)
        .collect();
    MixtureWeights::from_log(&log_w)
}

/// First-stage EnKPF result: mixture centres `nu` and the factor `G` of the
/// common covariance `Q = G R G'`, where `G = gamma^{-1/2} K(gamma P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnkpfIntermediate {
    pub nu: DMatrix<f64>,
    pub q_factor: DMatrix<f64>,
    pub gamma: f64,
    r_diag: DVector<f64>,
}

impl EnkpfIntermediate {
    /// Dense `Q`, for diagnostics and tests.
    pub fn q_matrix(&self) -> DMatrix<f64> {
        let mut gr = self.q_factor.clone();
        for (j, mut col) in gr.column_iter_mut().enumerate() {
            col *= self.r_diag[j];
        }
        gr * self.q_factor.transpose()
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::param("gamma", format!("must lie in [0, 1], got {gamma}")));
    }
    Ok(())
}

pub fn enkpf_stage1(
    ens: &Ensemble,
    obs: &GaussObs,
    p: &DMatrix<f64>,
    gamma: f64,
) -> Result<EnkpfIntermediate> {
    check_gamma(gamma)?;
    check_inputs(ens, obs, p)?;
    let x = ens.members();
    let (d, m) = (ens.dim(), obs.len());
    if gamma == 0.0 || m == 0 {
        return Ok(EnkpfIntermediate {
            nu: x.clone(),
            q_factor: DMatrix::zeros(d, m),
            gamma,
            r_diag: obs.r_diag().clone(),
        });
    }
    let pht = p.select_columns(obs.h_cols()) * gamma;
    let hpht = pht.select_rows(obs.h_cols());
    let gain = gain_from_parts(&pht, &hpht, obs.r_diag())?;
    let nu = x + obs.innovations(x) * gain.transpose();
    Ok(EnkpfIntermediate {
        nu,
        q_factor: gain / gamma.sqrt(),
        gamma,
        r_diag: obs.r_diag().clone(),
    })
}

/// `H Q H'` and `Q H'` from the factor.
fn q_obs_parts(inter: &EnkpfIntermediate, obs: &GaussObs) -> (DMatrix<f64>, DMatrix<f64>) {
    let hg = inter.q_factor.select_rows(obs.h_cols());
    let mut hgr = hg.clone();
    for (j, mut col) in hgr.column_iter_mut().enumerate() {
        col *= inter.r_diag[j];
    }
    let qht = &inter.q_factor * hgr.transpose();
    let hqht = hg * hgr.transpose();
    (hqht, qht)
}

/// Second-stage weights `alpha_i ∝ phi(y; H nu_i, H Q H' + R / (1 - gamma))`.
pub fn enkpf_weights(inter: &EnkpfIntermediate, obs: &GaussObs) -> Result<MixtureWeights> {
    let k = inter.nu.nrows();
    if inter.gamma >= 1.0 || obs.is_empty() {
        return Ok(MixtureWeights::uniform(k));
    }
    obs.check_dim(inter.nu.ncols())?;
    let (mut s, _) = q_obs_parts(inter, obs);
    let inflate = 1.0 / (1.0 - inter.gamma);
    for (i, r) in obs.r_diag().iter().enumerate() {
        s[(i, i)] += r * inflate;
    }
    let innov = obs.innovations(&inter.nu);
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Numerical("second-stage covariance is not positive definite".into()))?;
    // Rows of innov * L^-T hold the whitened innovations.
    let z = chol.l().solve_lower_triangular(&innov.transpose()).ok_or_else(|| {
        Error::Numerical("singular second-stage covariance".into())
    })?;
    let log_w: Vec<f64> = z.column_iter().map(|c| -0.5 * c.norm_squared()).collect();
    MixtureWeights::from_log(&log_w)
}

/// The mixture `sum alpha_i N(mu_i, P^{a,gamma})` together with one draw
/// `eps_i ~ N(0, P^{a,gamma})` per member; resampling picks the centres.
#[derive(Debug, Clone, PartialEq)]
pub struct EnkpfAnalysis {
    pub mu: DMatrix<f64>,
    pub eps: DMatrix<f64>,
    pub weights: MixtureWeights,
    pub gamma: f64,
}

impl EnkpfAnalysis {
    /// `x_i = mu_{I(i)} + eps_i`.
    pub fn compose(&self, indices: &ResampleIndices) -> DMatrix<f64> {
        let mut x = self.eps.clone();
        for (i, &src) in indices.as_slice().iter().enumerate() {
            let mut row = x.row_mut(i);
            row += self.mu.row(src);
        }
        x
    }

    /// Keeps only the given state columns.
    pub fn restrict_columns(&self, cols: &[usize]) -> EnkpfAnalysis {
        EnkpfAnalysis {
            mu: self.mu.select_columns(cols),
            eps: self.eps.select_columns(cols),
            weights: self.weights.clone(),
            gamma: self.gamma,
        }
    }
}

/// Mixture centres, weights and perturbations for `gamma < 1`.
///
/// The perturbation is sampled without forming `P^{a,gamma}`: with
/// `e_Q = G sqrt(R) eta ~ N(0, Q)`, `e_R = sqrt(R / (1 - gamma)) xi` and
/// `K2 = K((1 - gamma) Q)`, `eps = (I - K2 H) e_Q + K2 e_R` has covariance
/// `(I - K2 H) Q`.
pub fn enkpf_analyze(
    ens: &Ensemble,
    obs: &GaussObs,
    p: &DMatrix<f64>,
    gamma: f64,
    noise: &EnsembleNoise,
) -> Result<EnkpfAnalysis> {
    check_gamma(gamma)?;
    if gamma >= 1.0 {
        return Err(Error::param("gamma", "the mixture form needs gamma < 1"));
    }
    let (k, m) = (ens.size(), obs.len());
    check_noise(&noise.eta, k, m)?;
    check_noise(&noise.xi, k, m)?;
    let inter = enkpf_stage1(ens, obs, p, gamma)?;
    let weights = enkpf_weights(&inter, obs)?;
    if m == 0 || gamma == 0.0 {
        // Q = 0: the centres stay at the background and there is nothing to draw.
        return Ok(EnkpfAnalysis {
            mu: inter.nu,
            eps: DMatrix::zeros(k, ens.dim()),
            weights,
            gamma,
        });
    }
    let (hqht, qht) = q_obs_parts(&inter, obs);
    let r_inflated = obs.r_diag() / (1.0 - gamma);
    let k2 = gain_from_parts(&qht, &hqht, &r_inflated)?;

    let mu = &inter.nu + obs.innovations(&inter.nu) * k2.transpose();

    let mut scaled_eta = noise.eta.clone();
    for (j, mut col) in scaled_eta.column_iter_mut().enumerate() {
        col *= obs.r_diag()[j].sqrt();
    }
    let e_q = scaled_eta * inter.q_factor.transpose();
    let mut resid = -obs.apply(&e_q);
    add_scaled_noise(&mut resid, &noise.xi, obs.r_diag(), 1.0 / (1.0 - gamma));
    let eps = e_q + resid * k2.transpose();

    Ok(EnkpfAnalysis {
        mu,
        eps,
        weights,
        gamma,
    })
}

/// Output of one EnKPF analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct EnkpfUpdate {
    pub ensemble: Ensemble,
    pub weights: MixtureWeights,
    pub indices: ResampleIndices,
}

/// Full EnKPF analysis step with randomness from `rng`.
pub fn enkpf_update<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &GaussObs,
    p: &DMatrix<f64>,
    gamma: f64,
    rng: &mut R,
) -> Result<EnkpfUpdate> {
    let noise = EnsembleNoise::draw(rng, ens.size(), obs.len());
    enkpf_update_with(ens, obs, p, gamma, &noise)
}

/// Full EnKPF analysis step with explicit noise.
pub fn enkpf_update_with(
    ens: &Ensemble,
    obs: &GaussObs,
    p: &DMatrix<f64>,
    gamma: f64,
    noise: &EnsembleNoise,
) -> Result<EnkpfUpdate> {
    check_gamma(gamma)?;
    let k = ens.size();
    if gamma == 1.0 {
        // Pure EnKF: uniform weights, no resampling.
        return Ok(EnkpfUpdate {
            ensemble: enkf_with_perturbations(ens, obs, p, &noise.eta)?,
            weights: MixtureWeights::uniform(k),
            indices: ResampleIndices::identity(k),
        });
    }
    let analysis = enkpf_analyze(ens, obs, p, gamma, noise)?;
    let indices = systematic_resample(&analysis.weights, noise.uniform);
    let xa = analysis.compose(&indices);
    Ok(EnkpfUpdate {
        ensemble: Ensemble::with_members(xa, EnsembleKind::Analysis),
        weights: analysis.weights,
        indices,
    })
}

/// Lower and upper ESS fractions aimed at by the adaptive `gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssBand {
    pub lo: f64,
    pub hi: f64,
}

impl EssBand {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::param(
                "ess_band",
                format!("need 0 < lo <= hi <= 1, got ({lo}, {hi})"),
            ));
        }
        Ok(Self { lo, hi })
    }
}

impl Default for EssBand {
    fn default() -> Self {
        Self { lo: 0.5, hi: 0.8 }
    }
}

pub const GAMMA_BISECTION_STEPS: usize = 10;

/// Second-stage weights as a function of `gamma`, precomputed in the
/// eigenbasis of the whitened `R^-1/2 H P H' R^-1/2`. Each evaluation is then
/// `O(k m)`; matches [`enkpf_weights`] up to round-off.
pub struct GammaProfile {
    lambda: Vec<f64>,
    /// Whitened, rotated background innovations, `k x m`.
    rotated: DMatrix<f64>,
}

impl GammaProfile {
    pub fn new(ens: &Ensemble, obs: &GaussObs, p: &DMatrix<f64>) -> Result<Self> {
        check_inputs(ens, obs, p)?;
        let m = obs.len();
        let sr: Vec<f64> = obs.r_diag().iter().map(|r| r.sqrt()).collect();
        let hph = p.select_columns(obs.h_cols()).select_rows(obs.h_cols());
        let whitened = DMatrix::from_fn(m, m, |i, j| hph[(i, j)] / (sr[i] * sr[j]));
        let eig = whitened.symmetric_eigen();
        let mut innov = obs.innovations(ens.members());
        for (j, mut col) in innov.column_iter_mut().enumerate() {
            col /= sr[j];
        }
        Ok(Self {
            lambda: eig.eigenvalues.iter().map(|l| l.max(0.0)).collect(),
            rotated: innov * eig.eigenvectors,
        })
    }

    pub fn weights(&self, gamma: f64) -> Result<MixtureWeights> {
        check_gamma(gamma)?;
        let k = self.rotated.nrows();
        if gamma >= 1.0 || self.lambda.is_empty() {
            return Ok(MixtureWeights::uniform(k));
        }
        // Per eigen-direction: innovation shrink 1/(1 + g l), variance
        // g l^2 / (1 + g l)^2 + 1 / (1 - g).
        let factors: Vec<f64> = self
            .lambda
            .iter()
            .map(|&l| {
                let a = 1.0 + gamma * l;
                let var = gamma * l * l / (a * a) + 1.0 / (1.0 - gamma);
                1.0 / (a * a * var)
            })
            .collect();
        let log_w: Vec<f64> = self
            .rotated
            .row_iter()
            .map(|row| {
                -0.5 * row
                    .iter()
                    .zip(&factors)
                    .map(|(z, f)| z * z * f)
                    .sum::<f64>()
            })
            .collect();
        MixtureWeights::from_log(&log_w)
    }

    pub fn ess(&self, gamma: f64) -> Result<f64> {
        Ok(ess(&self.weights(gamma)?))
    }
}

/// Smallest `gamma` (bisection, fixed number of steps) whose second-stage ESS
/// reaches `band.lo * k`. Returns 0 when the pure particle filter already does.
pub fn choose_gamma(ens: &Ensemble, obs: &GaussObs, p: &DMatrix<f64>, band: EssBand) -> Result<f64> {
    if obs.is_empty() {
        return Ok(0.0);
    }
    let profile = GammaProfile::new(ens, obs, p)?;
    let target = band.lo * ens.size() as f64 * (1.0 - 1e-12);
    if profile.ess(0.0)? >= target {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..GAMMA_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if profile.ess(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// EnKPF with `gamma` chosen by [`choose_gamma`].
pub fn adaptive_gamma<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &GaussObs,
    p: &DMatrix<f64>,
    band: EssBand,
    rng: &mut R,
) -> Result<(f64, EnkpfUpdate)> {
    let gamma = choose_gamma(ens, obs, p, band)?;
    let update = enkpf_update(ens, obs, p, gamma, rng)?;
    Ok((gamma, update))
}

/// `L^gamma = K(gamma P) + K((1 - gamma) Q) (I - H K(gamma P))`, so that
/// `mu_i = x_i + L^gamma (y - H x_i)`.
pub fn mixture_gain(ens: &Ensemble, obs: &GaussObs, p: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    check_gamma(gamma)?;
    if gamma >= 1.0 {
        return Err(Error::param("gamma", "needs gamma < 1"));
    }
    let inter = enkpf_stage1(ens, obs, p, gamma)?;
    let k_gamma = &inter.q_factor * gamma.sqrt();
    let (hqht, qht) = q_obs_parts(&inter, obs);
    let k2 = gain_from_parts(&qht, &hqht, &(obs.r_diag() / (1.0 - gamma)))?;
    let m = obs.len();
    let hk = k_gamma.select_rows(obs.h_cols());
    Ok(&k_gamma + k2 * (DMatrix::identity(m, m) - hk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_stream;

    fn scalar_ens(vals: &[f64]) -> Ensemble {
        Ensemble::background(DMatrix::from_column_slice(vals.len(), 1, vals)).unwrap()
    }

    fn scalar_obs(y: f64, r: f64) -> GaussObs {
        GaussObs::new(vec![y], vec![0], vec![r]).unwrap()
    }

    #[test]
    fn pf_weights_examples() {
        let w = pf_weights(&scalar_ens(&[2.0, 2.0, 2.0]), &scalar_obs(0.0, 1.0), 1.0).unwrap();
        assert!(w.as_slice().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));

        let w = pf_weights(&scalar_ens(&[0.0, 1.0]), &scalar_obs(0.0, 1.0), 1.0).unwrap();
        let e = (-0.5f64).exp();
        assert!((w.as_slice()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((w.as_slice()[0] - 0.6225).abs() < 1e-4);
        assert!((w.as_slice()[1] - 0.3775).abs() < 1e-4);

        let w = pf_weights(&scalar_ens(&[0.0, 50.0, -50.0, 55.0]), &scalar_obs(0.0, 1.0), 1.0).unwrap();
        assert!(w.as_slice()[0] > 1.0 - 1e-9);

        assert!(pf_weights(&scalar_ens(&[0.0, 1.0]), &scalar_obs(0.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn log_weights_degenerate() {
        assert_eq!(
            MixtureWeights::from_log(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            Err(Error::DegenerateWeights)
        );
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&MixtureWeights::uniform(7)) - 7.0).abs() < 1e-12);
        assert_eq!(ess(&MixtureWeights::new(vec![1.0, 0.0, 0.0]).unwrap()), 1.0);
        assert_eq!(ess(&MixtureWeights::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap()), 2.0);
    }

    #[test]
    fn resampling_examples() {
        let one_hot = MixtureWeights::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        for u in [0.0, 0.3, 0.999] {
            assert_eq!(systematic_resample(&one_hot, u).as_slice(), &[0, 0, 0, 0]);
            assert!(systematic_resample(&MixtureWeights::uniform(5), u).is_identity());
        }
        let mut alpha = vec![0.0; 10];
        alpha[..3].copy_from_slice(&[0.5, 0.3, 0.2]);
        let w = MixtureWeights::new(alpha).unwrap();
        for i in 0..1000 {
            let u = i as f64 / 1000.0;
            let n = systematic_resample(&w, u).counts();
            assert_eq!(&n[..3], &[5, 3, 2], "u = {u}");
        }
    }

    #[test]
    fn stage1_limits() {
        let ens = scalar_ens(&[0.0, 1.0, 3.0]);
        let obs = scalar_obs(0.5, 1.0);
        let p = DMatrix::from_element(1, 1, 1.0);
        let s0 = enkpf_stage1(&ens, &obs, &p, 0.0).unwrap();
        assert_eq!(&s0.nu, ens.members());
        assert!(s0.q_matrix().iter().all(|&q| q == 0.0));

        let s1 = enkpf_stage1(&ens, &obs, &p, 1.0).unwrap();
        for i in 0..3 {
            let x = ens.members()[(i, 0)];
            assert!((s1.nu[(i, 0)] - (x + 0.5 * (0.5 - x))).abs() < 1e-15);
        }
        // K(P) R K(P)' = 0.25
        assert!((s1.q_matrix()[(0, 0)] - 0.25).abs() < 1e-15);

        let sh = enkpf_stage1(&ens, &obs, &p, 0.5).unwrap();
        for i in 0..3 {
            let x = ens.members()[(i, 0)];
            assert!((sh.nu[(i, 0)] - (x + (0.5 - x) / 3.0)).abs() < 1e-15);
        }
        assert!((sh.q_matrix()[(0, 0)] - 2.0 / 9.0).abs() < 1e-15);

        assert!(enkpf_stage1(&ens, &obs, &p, 1.5).is_err());
        assert!(enkpf_stage1(&ens, &obs, &p, -0.1).is_err());
    }

    #[test]
    fn weights_scalar_hand_example() {
        // members {0, 1}, y = 0, p = r = 1, gamma = 0.5:
        // nu = {0, 2/3}, Q = 2/9, weights ∝ phi(0; nu_i, 2/9 + 2).
        let ens = scalar_ens(&[0.0, 1.0]);
        let obs = scalar_obs(0.0, 1.0);
        let p = DMatrix::from_element(1, 1, 1.0);
        let inter = enkpf_stage1(&ens, &obs, &p, 0.5).unwrap();
        let w = enkpf_weights(&inter, &obs).unwrap();
        let var = 2.0 / 9.0 + 2.0;
        let f0 = 1.0;
        let f1 = (-(2.0f64 / 3.0).powi(2) / (2.0 * var)).exp();
        assert!((w.as_slice()[0] - f0 / (f0 + f1)).abs() < 1e-14);
        assert_eq!(enkpf_weights(&enkpf_stage1(&ens, &obs, &p, 1.0).unwrap(), &obs).unwrap(), MixtureWeights::uniform(2));
    }

    #[test]
    fn profile_matches_direct_weights() {
        let mut rng = seed_stream(3, 0, 0, 0, 0);
        let x = standard_normals(&mut rng, 12, 5);
        let ens = Ensemble::background(x).unwrap();
        let obs = GaussObs::new(vec![0.3, -1.0, 0.2], vec![0, 2, 4], vec![0.5, 1.0, 0.2]).unwrap();
        let p = crate::ensemble::ensemble_moments(&ens).unwrap().1;
        let profile = GammaProfile::new(&ens, &obs, &p).unwrap();
        for gamma in [0.0, 0.1, 0.37, 0.5, 0.9, 0.999] {
            let direct = enkpf_weights(&enkpf_stage1(&ens, &obs, &p, gamma).unwrap(), &obs).unwrap();
            let fast = profile.weights(gamma).unwrap();
            for (a, b) in direct.as_slice().iter().zip(fast.as_slice()) {
                assert!((a - b).abs() < 1e-12, "gamma {gamma}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_covariance_enkf_is_identity() {
        let ens = scalar_ens(&[0.0, 1.0, 2.0]);
        let out = enkf_update(&ens, &scalar_obs(5.0, 1.0), &DMatrix::zeros(1, 1), &mut seed_stream(0, 0, 0, 0, 0))
            .unwrap();
        assert_eq!(out.members(), ens.members());
    }

    #[test]
    fn huge_r_leaves_background() {
        let ens = scalar_ens(&[0.0, 1.0, 2.0]);
        let p = DMatrix::from_element(1, 1, 1.0);
        let out = enkf_update(&ens, &scalar_obs(5.0, 1e12), &p, &mut seed_stream(0, 0, 0, 0, 0)).unwrap();
        for i in 0..3 {
            let (a, b) = (out.members()[(i, 0)], ens.members()[(i, 0)]);
            assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn adaptive_gamma_examples() {
        let ens = scalar_ens(&[1.0; 6]);
        let obs = scalar_obs(0.0, 1.0);
        let p = DMatrix::from_element(1, 1, 0.0);
        assert_eq!(choose_gamma(&ens, &obs, &p, EssBand::default()).unwrap(), 0.0);

        let ens = scalar_ens(&[-1.0, 0.0, 0.5, 2.0, 3.0, 4.0]);
        let p = crate::ensemble::ensemble_moments(&ens).unwrap().1;
        assert_eq!(choose_gamma(&ens, &obs, &p, EssBand::new(1.0, 1.0).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn shape_errors() {
        let ens = scalar_ens(&[0.0, 1.0]);
        let obs = scalar_obs(0.0, 1.0);
        assert!(matches!(
            enkf_update(&ens, &obs, &DMatrix::zeros(2, 2), &mut seed_stream(0, 0, 0, 0, 0)),
            Err(Error::Shape(_))
        ));
        let bad = GaussObs::new(vec![0.0], vec![3], vec![1.0]).unwrap();
        assert!(enkf_update(&ens, &bad, &DMatrix::zeros(1, 1), &mut seed_stream(0, 0, 0, 0, 0)).is_err());
    }
}
