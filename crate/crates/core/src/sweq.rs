//! Modified shallow-water model of cumulus convection on a periodic 1D grid.
//!
//! Fluid height above `cloud_threshold` switches the geopotential to a lower
//! constant, so convergence reinforces itself and a cloud grows. Above
//! `rain_threshold`, convergence produces rain, whose weight pushes the fluid
//! back out. Random convergent wind plumes trigger the convection.
//!
//! Discretization: centered differences, flux-form continuity, SSP-RK3.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, EnsembleKind};
use crate::error::{Error, Result};
use crate::grid::GridGeometry;
use crate::obs::GaussObs;
use crate::rng::{Stream, StreamFamily};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Physical and numerical parameters. Only the cloud threshold, plume rate
/// and grid come from the reference setup; the rest are tuned defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub n_points: usize,
    /// Grid spacing, meters.
    pub dx: f64,
    /// Time step, seconds.
    pub dt: f64,
    pub rest_height: f64,
    pub gravity: f64,
    pub cloud_threshold: f64,
    pub rain_threshold: f64,
    /// Geopotential inside clouds; below `gravity * cloud_threshold`.
    pub cloud_geopotential: f64,
    /// Weight of rain in the geopotential.
    pub rain_weight: f64,
    /// Rain removal rate, per second.
    pub rain_removal: f64,
    /// Rain produced per unit of convergence.
    pub rain_production: f64,
    pub diff_height: f64,
    pub diff_wind: f64,
    pub diff_rain: f64,
    /// Plume arrivals per meter per minute.
    pub plume_rate: f64,
    /// Peak wind of a plume.
    pub plume_amplitude: f64,
    /// Plume width, meters.
    pub plume_width: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            n_points: 300,
            dx: 500.0,
            dt: 5.0,
            rest_height: 90.0,
            gravity: 10.0,
            cloud_threshold: 90.02,
            rain_threshold: 90.35,
            cloud_geopotential: 899.77,
            rain_weight: 2.5,
            rain_removal: 1.0e-3,
            rain_production: 10.0,
            diff_height: 2000.0,
            diff_wind: 2000.0,
            diff_rain: 2000.0,
            plume_rate: 8.0e-5,
            plume_amplitude: 0.008,
            plume_width: 1500.0,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_points", self.n_points as f64),
            ("dx", self.dx),
            ("dt", self.dt),
            ("rest_height", self.rest_height),
            ("gravity", self.gravity),
            ("cloud_threshold", self.cloud_threshold),
            ("plume_width", self.plume_width),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be > 0, got {v}")));
            }
        }
        let nonneg = [
            ("rain_weight", self.rain_weight),
            ("rain_removal", self.rain_removal),
            ("rain_production", self.rain_production),
            ("diff_height", self.diff_height),
            ("diff_wind", self.diff_wind),
            ("diff_rain", self.diff_rain),
            ("plume_rate", self.plume_rate),
            ("plume_amplitude", self.plume_amplitude),
            ("cloud_geopotential", self.cloud_geopotential),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be >= 0, got {v}")));
            }
        }
        if self.n_points < 3 {
            return Err(Error::param("n_points", "need at least 3 grid points"));
        }
        if self.rain_threshold <= self.cloud_threshold {
            return Err(Error::param(
                "rain_threshold",
                format!(
                    "must exceed cloud_threshold ({} <= {})",
                    self.rain_threshold, self.cloud_threshold
                ),
            ));
        }
        // RK3 is stable for diffusion numbers up to about 0.6; keep a margin.
        let diff = self.diff_height.max(self.diff_wind).max(self.diff_rain);
        if diff * self.dt / (self.dx * self.dx) > 0.5 {
            return Err(Error::param("dt", "diffusion number diff*dt/dx^2 exceeds 0.5"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry::new(self.n_points, self.dx).expect("validated geometry")
    }

    /// Number of whole steps covering `seconds`.
    pub fn steps_for(&self, seconds: f64) -> usize {
        (seconds / self.dt).round().max(0.0) as usize
    }

    /// Expected plumes per time step over the whole domain.
    pub fn plumes_per_step(&self) -> f64 {
        self.plume_rate * self.n_points as f64 * self.dx * self.dt / 60.0
    }
}

/// One model state; `wind` lives on the same points as `height` and `rain`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub height: Vec<f64>,
    pub wind: Vec<f64>,
    pub rain: Vec<f64>,
    /// Model time, seconds.
    pub time: f64,
}

impl ModelState {
    pub fn at_rest(params: &ModelParams) -> Self {
        let n = params.n_points;
        Self {
            height: vec![params.rest_height; n],
            wind: vec![0.0; n],
            rain: vec![0.0; n],
            time: 0.0,
        }
    }

    pub fn n_points(&self) -> usize {
        self.height.len()
    }

    /// `(h_1..h_n, u_1..u_n, r_1..r_n)`.
    pub fn to_stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            3 * self.n_points(),
            self.height.iter().chain(&self.wind).chain(&self.rain).copied(),
        )
    }

    pub fn from_stacked(x: &[f64], time: f64) -> Result<Self> {
        if !x.len().is_multiple_of(3) || x.is_empty() {
            return Err(Error::Shape(format!("stacked state of length {} is not 3n", x.len())));
        }
        let n = x.len() / 3;
        Ok(Self {
            height: x[..n].to_vec(),
            wind: x[n..2 * n].to_vec(),
            rain: x[2 * n..].to_vec(),
            time,
        })
    }

    pub fn mass(&self, dx: f64) -> f64 {
        self.height.iter().sum::<f64>() * dx
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.height.len() != n || self.wind.len() != n || self.rain.len() != n {
            return Err(Error::Shape(format!(
                "state fields have lengths ({}, {}, {}), grid has {n} points",
                self.height.len(),
                self.wind.len(),
                self.rain.len()
            )));
        }
        Ok(())
    }

    /// First grid point with a non-finite or non-positive-height value.
    fn first_bad_point(&self) -> Option<usize> {
        (0..self.n_points()).find(|&i| {
            !(self.height[i].is_finite()
                && self.height[i] > 0.0
                && self.wind[i].is_finite()
                && self.rain[i].is_finite())
        })
    }
}

#[derive(Clone, Copy)]
struct Fields<'a> {
    h: &'a [f64],
    u: &'a [f64],
    r: &'a [f64],
}

/// Tendencies of the three fields.
fn tendencies(p: &ModelParams, s: Fields<'_>, out: &mut [Vec<f64>; 3]) {
    let n = s.h.len();
    let inv2dx = 0.5 / p.dx;
    let invdx2 = 1.0 / (p.dx * p.dx);
    let geopotential = |i: usize| {
        let phi = if s.h[i] > p.cloud_threshold {
            p.cloud_geopotential
        } else {
            p.gravity * s.h[i]
        };
        phi + p.rain_weight * s.r[i]
    };
    for i in 0..n {
        let (l, r) = ((i + n - 1) % n, (i + 1) % n);
        let du = (s.u[r] - s.u[l]) * inv2dx;
        let lap = |f: &[f64]| (f[r] - 2.0 * f[i] + f[l]) * invdx2;

        out[1][i] = -s.u[i] * du - (geopotential(r) - geopotential(l)) * inv2dx + p.diff_wind * lap(s.u);
        out[0][i] = -(s.u[r] * s.h[r] - s.u[l] * s.h[l]) * inv2dx + p.diff_height * lap(s.h);
        let production = if s.h[i] > p.rain_threshold && du < 0.0 {
            -p.rain_production * du
        } else {
            0.0
        };
        out[2][i] = -s.u[i] * (s.r[r] - s.r[l]) * inv2dx + p.diff_rain * lap(s.r) - p.rain_removal * s.r[i]
            + production;
    }
}

/// Adds one convergent plume centred at `center` (meters): the derivative of
/// a Gaussian, scaled to peak wind `amplitude`, positive upstream.
fn add_plume(p: &ModelParams, wind: &mut [f64], center: f64) {
    let n = wind.len();
    let length = n as f64 * p.dx;
    let reach = (4.0 * p.plume_width / p.dx).ceil() as isize;
    let base = (center / p.dx).round() as isize;
    let scale = p.plume_amplitude * (0.5f64).exp();
    for off in -reach..=reach {
        let i = (base + off).rem_euclid(n as isize) as usize;
        let mut d = i as f64 * p.dx - center;
        d -= length * (d / length).round();
        let z = d / p.plume_width;
        wind[i] -= scale * z * (-0.5 * z * z).exp();
    }
}

fn max_signal_speed(p: &ModelParams, s: &ModelState) -> f64 {
    s.height
        .iter()
        .zip(&s.wind)
        .map(|(&h, &u)| u.abs() + (p.gravity * h.max(0.0)).sqrt())
        .fold(0.0, f64::max)
}

/// Advances one time step. Plumes are drawn from `rng` before integrating.
pub fn model_step<R: Rng + ?Sized>(state: &ModelState, params: &ModelParams, rng: &mut R) -> Result<ModelState> {
    let n = params.n_points;
    state.check(n)?;
    let speed = max_signal_speed(params, state);
    let limit = params.dx / speed;
    if params.dt > limit {
        return Err(Error::StepSize {
            dt: params.dt,
            limit,
        });
    }

    let mut s0 = state.clone();
    let lambda = params.plumes_per_step();
    if lambda > 0.0 {
        let count = Poisson::new(lambda).expect("positive rate").sample(rng) as usize;
        let length = n as f64 * params.dx;
        for _ in 0..count {
            let center = rng.random::<f64>() * length;
            add_plume(params, &mut s0.wind, center);
        }
    }

    let dt = params.dt;
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let stage = |base: &ModelState, from: &ModelState, k: &mut [Vec<f64>; 3], a: f64, b: f64| {
        tendencies(
            params,
            Fields {
                h: &from.height,
                u: &from.wind,
                r: &from.rain,
            },
            k,
        );
        let mut next = base.clone();
        for (dst, (bf, (ff, kf))) in [&mut next.height, &mut next.wind, &mut next.rain].into_iter().zip(
            [&base.height, &base.wind, &base.rain]
                .into_iter()
                .zip([&from.height, &from.wind, &from.rain].into_iter().zip(k.iter())),
        ) {
            for i in 0..n {
                dst[i] = a * bf[i] + b * (ff[i] + dt * kf[i]);
            }
        }
        next
    };
    let s1 = stage(&s0, &s0, &mut k, 0.0, 1.0);
    let s2 = stage(&s0, &s1, &mut k, 0.75, 0.25);
    let mut s3 = stage(&s0, &s2, &mut k, 1.0 / 3.0, 2.0 / 3.0);

    if let Some(index) = s3.first_bad_point() {
        return Err(Error::Blowup { index });
    }
    for r in &mut s3.rain {
        *r = r.max(0.0);
    }
    s3.time = state.time + dt;
    Ok(s3)
}

pub fn integrate<R: Rng + ?Sized>(
    state: &ModelState,
    params: &ModelParams,
    n_steps: usize,
    rng: &mut R,
) -> Result<ModelState> {
    let mut s = state.clone();
    for _ in 0..n_steps {
        s = model_step(&s, params, rng)?;
    }
    Ok(s)
}

/// Radar-like observation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadarParams {
    /// Rain below this is reported as 0; wind is reported only where the
    /// observed rain reaches it.
    pub rain_cutoff: f64,
    pub rain_noise_sd: f64,
    pub wind_noise_sd: f64,
}

impl Default for RadarParams {
    fn default() -> Self {
        Self {
            rain_cutoff: 0.005,
            rain_noise_sd: 0.1,
            wind_noise_sd: 0.0025,
        }
    }
}

impl RadarParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rain_cutoff", self.rain_cutoff),
            ("rain_noise_sd", self.rain_noise_sd),
            ("wind_noise_sd", self.wind_noise_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadarObs {
    /// Observed rain at every grid point.
    pub rain: Vec<f64>,
    /// Observed wind where `rain >= rain_cutoff`.
    pub wind: Vec<Option<f64>>,
    pub params: RadarParams,
}

/// Skewed rain observation: noise is added on the square-root scale and
/// negative results are reported as no rain.
pub fn rain_observation(rain: f64, cutoff: f64, noise: f64) -> f64 {
    if rain <= cutoff {
        return 0.0;
    }
    let root = (rain - cutoff).sqrt();
    if 0.5 * noise <= -root {
        0.0
    } else {
        (root + 0.5 * noise).powi(2)
    }
}

/// Draws radar observations of `state`. Rain noise for every point is drawn
/// first, then wind noise for every point, whether used or not.
pub fn gen_observations<R: Rng + ?Sized>(state: &ModelState, params: &RadarParams, rng: &mut R) -> RadarObs {
    let n = state.n_points();
    let rain_noise: Vec<f64> = (0..n)
        .map(|_| params.rain_noise_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let wind_noise: Vec<f64> = (0..n)
        .map(|_| params.wind_noise_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let rain: Vec<f64> = state
        .rain
        .iter()
        .zip(&rain_noise)
        .map(|(&r, &e)| rain_observation(r, params.rain_cutoff, e))
        .collect();
    let wind = (0..n)
        .map(|i| (rain[i] >= params.rain_cutoff).then(|| state.wind[i] + wind_noise[i]))
        .collect();
    RadarObs {
        rain,
        wind,
        params: *params,
    }
}

/// Treats radar observations as linear and Gaussian on the stacked state:
/// one rain row per grid point, then one wind row per reported wind.
pub fn obs_to_gauss(radar: &RadarObs, rain_var: f64, wind_var: f64) -> Result<GaussObs> {
    let n = radar.rain.len();
    if radar.wind.len() != n {
        return Err(Error::Shape("rain and wind observations differ in length".into()));
    }
    let mut y = radar.rain.clone();
    let mut cols: Vec<usize> = (2 * n..3 * n).collect();
    let mut r = vec![rain_var; n];
    for (i, w) in radar.wind.iter().enumerate() {
        if let Some(v) = w {
            y.push(*v);
            cols.push(n + i);
            r.push(wind_var);
        }
    }
    GaussObs::new(y, cols, r)
}

/// Climatological ensemble from one long free run: after a burn-in of one
/// `separation`, a state is taken every `separation` model days.
pub fn spinup_ensemble<R: Rng + ?Sized>(
    params: &ModelParams,
    k: usize,
    separation_days: f64,
    rng: &mut R,
) -> Result<Ensemble> {
    Ok(spinup_states(params, k, separation_days, rng)?.0)
}

/// As [`spinup_ensemble`], also returning the state at the end of the run.
pub fn spinup_states<R: Rng + ?Sized>(
    params: &ModelParams,
    k: usize,
    separation_days: f64,
    rng: &mut R,
) -> Result<(Ensemble, ModelState)> {
    params.validate()?;
    if k < 2 {
        return Err(Error::InsufficientEnsemble(k));
    }
    if !(separation_days >= 0.0 && separation_days.is_finite()) {
        return Err(Error::param("separation", format!("must be >= 0, got {separation_days}")));
    }
    let steps = params.steps_for(separation_days * SECONDS_PER_DAY);
    let mut state = integrate(&ModelState::at_rest(params), params, steps, rng)?;
    let mut members = DMatrix::zeros(k, 3 * params.n_points);
    for i in 0..k {
        members.set_row(i, &state.to_stacked().transpose());
        state = integrate(&state, params, steps, rng)?;
    }
    Ok((Ensemble::new(members, EnsembleKind::Background)?, state))
}

/// Member-wise forecast over `n_steps`; member `i` draws its plumes from
/// `family.child(i)`.
pub fn forecast_ensemble(
    ens: &Ensemble,
    params: &ModelParams,
    n_steps: usize,
    family: &StreamFamily,
) -> Result<Ensemble> {
    let rows: Vec<DVector<f64>> = (0..ens.size())
        .into_par_iter()
        .map(|i| {
            let mut stream: Stream = family.child(i as u64);
            let start = ModelState::from_stacked(ens.members().row(i).transpose().as_slice(), 0.0)?;
            Ok(integrate(&start, params, n_steps, &mut stream)?.to_stacked())
        })
        .collect::<Result<_>>()?;
    let mut members = DMatrix::zeros(ens.size(), ens.dim());
    for (i, row) in rows.iter().enumerate() {
        members.set_row(i, &row.transpose());
    }
    Ensemble::new(members, EnsembleKind::Background)
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRow {
    grid_index: usize,
    h: f64,
    u: f64,
    r: f64,
}

/// Writes `grid_index,h,u,r` rows.
pub fn write_state_csv<W: Write>(state: &ModelState, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for i in 0..state.n_points() {
        w.serialize(StateRow {
            grid_index: i,
            h: state.height[i],
            u: state.wind[i],
            r: state.rain[i],
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_state_csv<R: Read>(reader: R) -> Result<ModelState> {
    let mut rows: Vec<StateRow> = csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    rows.sort_by_key(|r| r.grid_index);
    if rows.iter().enumerate().any(|(i, r)| r.grid_index != i) {
        return Err(Error::InvalidInput("grid_index must run 0..n without gaps".into()));
    }
    Ok(ModelState {
        height: rows.iter().map(|r| r.h).collect(),
        wind: rows.iter().map(|r| r.u).collect(),
        rain: rows.iter().map(|r| r.r).collect(),
        time: 0.0,
    })
}

/// Smooth initial bump, handy for tests and demos.
pub fn gaussian_bump(params: &ModelParams, center: f64, width: f64, height: f64) -> Vec<f64> {
    let length = params.n_points as f64 * params.dx;
    (0..params.n_points)
        .map(|i| {
            let mut d = i as f64 * params.dx - center;
            d -= length * (d / length).round();
            height * (-0.5 * (d / width).powi(2)).exp()
        })
        .collect()
}

/// Wavelength-`length` sinusoid, used for smooth non-trivial test states.
pub fn sinusoid(params: &ModelParams, amplitude: f64, modes: usize) -> Vec<f64> {
    let n = params.n_points as f64;
    (0..params.n_points)
        .map(|i| amplitude * (2.0 * PI * modes as f64 * i as f64 / n).sin())
        .collect()
}
