//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function has a plain Rust twin that returns
//! `enkpf::Result`, so the logic is tested natively; the exports only
//! convert errors to JS exceptions.

use enkpf::rng::{seed_stream, Stream};
use enkpf::sweq::{gaussian_bump, integrate, ModelParams, ModelState};
use enkpf::{enkpf_update, ess, gaspari_cohn, Ensemble, GaussObs};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

fn js_err(e: enkpf::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Taper weights at `samples` evenly spaced distances from 0 to
/// `2.5 * half_length`, so the curve shows where the support ends.
pub fn taper_values(half_length: f64, samples: usize) -> enkpf::Result<Vec<f64>> {
    let last = samples.saturating_sub(1).max(1) as f64;
    (0..samples)
        .map(|i| gaspari_cohn(2.5 * half_length * i as f64 / last, half_length))
        .collect()
}

#[wasm_bindgen]
pub fn taper_curve(half_length: f64, samples: usize) -> Result<Vec<f64>, JsError> {
    taper_values(half_length, samples).map_err(js_err)
}

/// Prior and posterior members of a scalar EnKPF with a bimodal prior.
#[wasm_bindgen]
pub struct ScalarAnalysis {
    background: Vec<f64>,
    analysis: Vec<f64>,
    ess: f64,
}

#[wasm_bindgen]
impl ScalarAnalysis {
    #[wasm_bindgen(getter)]
    pub fn background(&self) -> Vec<f64> {
        self.background.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn analysis(&self) -> Vec<f64> {
        self.analysis.clone()
    }

    /// Effective sample size of the mixture weights, out of `k`.
    #[wasm_bindgen(getter)]
    pub fn ess(&self) -> f64 {
        self.ess
    }
}

/// Prior members sit in two clumps at -2 and +2; the observation of the
/// state has standard deviation `obs_sd`.
pub fn scalar_analysis(gamma: f64, observation: f64, obs_sd: f64, k: usize, seed: u64) -> enkpf::Result<ScalarAnalysis> {
    let mut rng = seed_stream(seed, 0, 0, 0, 0);
    let background: Vec<f64> = (0..k)
        .map(|i| {
            let centre = if i % 2 == 0 { -2.0 } else { 2.0 };
            centre + 0.5 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let ens = Ensemble::background(DMatrix::from_column_slice(k, 1, &background))?;
    let (_, p) = enkpf::ensemble_moments(&ens)?;
    let obs = GaussObs::new(vec![observation], vec![0], vec![obs_sd * obs_sd])?;
    let update = enkpf_update(&ens, &obs, &p, gamma, &mut rng)?;
    Ok(ScalarAnalysis {
        background,
        analysis: update.ensemble.members().column(0).iter().copied().collect(),
        ess: ess(&update.weights),
    })
}

#[wasm_bindgen]
pub fn scalar_enkpf(gamma: f64, observation: f64, obs_sd: f64, k: usize, seed: u64) -> Result<ScalarAnalysis, JsError> {
    scalar_analysis(gamma, observation, obs_sd, k, seed).map_err(js_err)
}

/// A single SWEQ trajectory that the page advances frame by frame.
#[wasm_bindgen]
pub struct SweqRun {
    params: ModelParams,
    state: ModelState,
    rng: Stream,
}

impl SweqRun {
    pub fn create(n_points: usize, seed: u64) -> enkpf::Result<Self> {
        let params = ModelParams {
            n_points,
            ..ModelParams::default()
        };
        params.validate()?;
        let mut state = ModelState::at_rest(&params);
        // Start from one bump tall enough to rain so something happens at once.
        let centre = params.dx * n_points as f64 / 2.0;
        let bump = gaussian_bump(&params, centre, 2000.0, 0.5);
        state.height.iter_mut().zip(bump).for_each(|(h, b)| *h += b);
        Ok(Self {
            params,
            state,
            rng: seed_stream(seed, 0, 0, 0, 0),
        })
    }

    pub fn advance(&mut self, steps: usize) -> enkpf::Result<()> {
        self.state = integrate(&self.state, &self.params, steps, &mut self.rng)?;
        Ok(())
    }
}

#[wasm_bindgen]
impl SweqRun {
    #[wasm_bindgen(constructor)]
    pub fn new(n_points: usize, seed: u64) -> Result<SweqRun, JsError> {
        Self::create(n_points, seed).map_err(js_err)
    }

    pub fn step(&mut self, steps: usize) -> Result<(), JsError> {
        self.advance(steps).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> Vec<f64> {
        self.state.height.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn rain(&self) -> Vec<f64> {
        self.state.rain.clone()
    }

    /// Model time in seconds.
    #[wasm_bindgen(getter)]
    pub fn time(&self) -> f64 {
        self.state.time
    }

    #[wasm_bindgen(getter)]
    pub fn cloud_threshold(&self) -> f64 {
        self.params.cloud_threshold
    }

    #[wasm_bindgen(getter)]
    pub fn rain_threshold(&self) -> f64 {
        self.params.rain_threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taper_curve_ends_at_zero() {
        let v = taper_values(1000.0, 51).unwrap();
        assert_eq!(v[0], 1.0);
        // Distances past 2000 m are outside the support.
        assert!(v[41..].iter().all(|&w| w == 0.0));
        assert!(v.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn scalar_limits() {
        let enkf = scalar_analysis(1.0, 1.5, 0.5, 40, 3).unwrap();
        assert!((enkf.ess - 40.0).abs() < 1e-9);
        assert_eq!(enkf.background.len(), 40);
        let pf_like = scalar_analysis(0.01, 1.5, 0.5, 40, 3).unwrap();
        assert!(pf_like.ess < enkf.ess);
        // Nearly all particles near +2 survive resampling.
        let right = pf_like.analysis.iter().filter(|&&x| x > 0.0).count();
        assert!(right >= 36, "{right}");
    }

    #[test]
    fn sweq_run_rains() {
        let mut run = SweqRun::create(100, 1).unwrap();
        let mass = |r: &SweqRun| r.height().iter().sum::<f64>();
        let before = mass(&run);
        run.advance(120).unwrap();
        assert!(run.rain().iter().any(|&r| r > 0.0));
        assert!(run.time() > 0.0);
        assert!((mass(&run) - before).abs() / before < 1e-3);
    }
}
