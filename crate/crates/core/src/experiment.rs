//! Cycled twin experiments: forecast, observe, score, analyse.
//!
//! Every random draw comes from a stream keyed by
//! `(base_seed, repetition, cycle, role, unit)`, and repetitions are
//! collected in order, so outputs do not depend on the thread count.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::ensemble::{ensemble_moments, Ensemble, EnsembleKind};
use crate::error::{Error, Result};
use crate::global::{adaptive_gamma, balanced_resample, enkf_update, ess, pf_weights};
use crate::grid::FieldLayout;
use crate::local::{block_lenkpf_update, lenkf_update, naive_lenkpf_update, LocalWindowSpec};
use crate::obs::GaussObs;
use crate::rng::{seed_stream, Stream, StreamFamily};
use crate::scoring::{field_crps, Field, RankHistogram, ScoreRecord, ScoreWriter};
use crate::sweq::{forecast_ensemble, gen_observations, integrate, obs_to_gauss, spinup_states, ModelState};
use crate::taper::{GridTaper, TaperSpec};

/// Stream roles.
mod role {
    pub const SPINUP: u32 = 0;
    pub const TRUTH: u32 = 1;
    pub const OBSERVATION: u32 = 2;
    pub const FORECAST: u32 = 3;
    pub const ANALYSIS: u32 = 4;
    pub const RANK: u32 = 5;
}

/// Per-cycle diagnostics of one method and field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleTrace {
    pub cycle: usize,
    pub method: String,
    pub field: Field,
    pub truth_mean: f64,
    pub forecast_mean: Option<f64>,
    pub forecast_spread: Option<f64>,
    pub analysis_mean: Option<f64>,
    pub analysis_spread: Option<f64>,
    pub gamma_min: Option<f64>,
    pub gamma_mean: Option<f64>,
    pub gamma_max: Option<f64>,
    pub ess_mean: Option<f64>,
    pub n_obs: usize,
}

/// What one repetition produced.
#[derive(Debug, Clone, Default)]
pub struct RepetitionOutput {
    pub scores: Vec<ScoreRecord>,
    pub ranks: BTreeMap<(Method, Field), RankHistogram>,
    pub trace: Vec<CycleTrace>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub repetitions: Vec<RepetitionOutput>,
}

impl ExperimentOutput {
    pub fn scores(&self) -> impl Iterator<Item = &ScoreRecord> {
        self.repetitions.iter().flat_map(|r| r.scores.iter())
    }

    /// Rank counts summed over repetitions.
    pub fn ranks(&self) -> BTreeMap<(Method, Field), RankHistogram> {
        let mut total: BTreeMap<(Method, Field), RankHistogram> = BTreeMap::new();
        for rep in &self.repetitions {
            for (key, hist) in &rep.ranks {
                let acc = total
                    .entry(*key)
                    .or_insert_with(|| RankHistogram::new(hist.counts.len() - 1));
                for (a, b) in acc.counts.iter_mut().zip(&hist.counts) {
                    *a += b;
                }
            }
        }
        total
    }
}

/// Filter diagnostics of one analysis.
#[derive(Debug, Clone, Default)]
struct AnalysisDiag {
    gammas: Vec<f64>,
    ess: Vec<f64>,
}

/// Fixed machinery shared by all cycles of an experiment.
struct Assimilator {
    layout: FieldLayout,
    taper: GridTaper,
    window: LocalWindowSpec,
}

impl Assimilator {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let geometry = cfg.model.geometry();
        let layout = FieldLayout::stacked(geometry, 3);
        let taper = GridTaper::new(TaperSpec::new(cfg.localization, geometry)?, layout.clone())?;
        let window = LocalWindowSpec::new(cfg.window_radius, layout.clone())?;
        Ok(Self { layout, taper, window })
    }

    fn analyse(
        &self,
        cfg: &ExperimentConfig,
        method: Method,
        fc: &Ensemble,
        obs: &GaussObs,
        rng: &mut Stream,
    ) -> Result<(Ensemble, AnalysisDiag)> {
        let band = cfg.ess_band;
        Ok(match method {
            Method::Free => (fc.clone(), AnalysisDiag::default()),
            Method::EnkfGlobal => {
                let (_, p) = ensemble_moments(fc)?;
                (enkf_update(fc, obs, &p, rng)?, AnalysisDiag::default())
            }
            Method::PfGlobal => {
                let w = pf_weights(fc, obs, 1.0)?;
                let idx = balanced_resample(&w, rng);
                let members = DMatrix::from_fn(fc.size(), fc.dim(), |i, j| fc.members()[(idx.as_slice()[i], j)]);
                let diag = AnalysisDiag {
                    gammas: vec![],
                    ess: vec![ess(&w)],
                };
                (Ensemble::new(members, EnsembleKind::Analysis)?, diag)
            }
            Method::EnkpfGlobal => {
                let (_, p) = ensemble_moments(fc)?;
                let (gamma, upd) = adaptive_gamma(fc, obs, &p, band, rng)?;
                let diag = AnalysisDiag {
                    gammas: vec![gamma],
                    ess: vec![ess(&upd.weights)],
                };
                (upd.ensemble, diag)
            }
            Method::Lenkf => (
                lenkf_update(fc, obs, &self.window, &self.taper, rng)?,
                AnalysisDiag::default(),
            ),
            Method::NaiveLenkpf => {
                let out = naive_lenkpf_update(fc, obs, &self.window, &self.taper, band, rng)?;
                (out.ensemble, AnalysisDiag { gammas: out.gammas, ess: out.ess })
            }
            Method::BlockLenkpf => {
                let out = block_lenkpf_update(fc, obs, &self.taper, &self.layout, cfg.segment_length, band, rng)?;
                (out.ensemble, AnalysisDiag { gammas: out.gammas, ess: out.ess })
            }
        })
    }
}

fn field_block(ens: &Ensemble, field: Field, n: usize) -> DMatrix<f64> {
    ens.members().columns(field.offset(n), n).into_owned()
}

fn truth_field(truth: &ModelState, field: Field) -> &[f64] {
    match field {
        Field::Height => &truth.height,
        Field::Wind => &truth.wind,
        Field::Rain => &truth.rain,
    }
}

/// Spatial means of the ensemble mean and the ensemble standard deviation.
fn summary(block: &DMatrix<f64>) -> (f64, f64) {
    let k = block.nrows() as f64;
    let n = block.ncols() as f64;
    let mut mean = 0.0;
    let mut spread = 0.0;
    for col in block.column_iter() {
        let m = col.mean();
        mean += m;
        spread += (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    }
    (mean / n, spread / n)
}

fn stats(values: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None, None);
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (Some(min), Some(values.iter().sum::<f64>() / values.len() as f64), Some(max))
}

/// Initial ensemble and truth of repetition `rep`, as used by [`run_repetition`].
pub fn spinup(cfg: &ExperimentConfig, rep: u64) -> Result<(Ensemble, ModelState)> {
    spinup_states(
        &cfg.model,
        cfg.k,
        cfg.spinup_separation_days,
        &mut seed_stream(cfg.base_seed, rep, 0, role::SPINUP, 0),
    )
}

/// Runs one repetition. A method whose forecast or analysis fails is scored
/// as failed from then on; the others continue.
pub fn run_repetition(cfg: &ExperimentConfig, rep: u64) -> Result<RepetitionOutput> {
    cfg.validate()?;
    let seed = cfg.base_seed;
    let n = cfg.model.n_points;
    let assimilator = Assimilator::new(cfg)?;
    let steps = cfg.steps_per_cycle();

    let (initial, mut truth) = spinup(cfg, rep)?;
    // The free forecast is always run: it is the reference for relative skill.
    let mut free = initial.clone();
    let mut states: Vec<Option<Ensemble>> = cfg.methods.iter().map(|_| Some(initial.clone())).collect();

    let mut out = RepetitionOutput::default();
    for &m in &cfg.methods {
        for f in Field::ALL {
            out.ranks.insert((m, f), RankHistogram::new(cfg.k));
        }
    }

    for cycle in 1..=cfg.n_cycles() {
        let c = cycle as u64;
        truth = integrate(&truth, &cfg.model, steps, &mut seed_stream(seed, rep, c, role::TRUTH, 0))?;
        let radar = gen_observations(&truth, &cfg.radar, &mut seed_stream(seed, rep, c, role::OBSERVATION, 0));
        let obs = obs_to_gauss(&radar, cfg.rain_var, cfg.wind_var)?;
        // Members share plume streams across methods: common random numbers.
        let family = StreamFamily::draw(&mut seed_stream(seed, rep, c, role::FORECAST, 0));
        free = forecast_ensemble(&free, &cfg.model, steps, &family)?;
        let free_crps: Vec<f64> = Field::ALL
            .iter()
            .map(|&f| field_crps(&field_block(&free, f, n), truth_field(&truth, f)))
            .collect::<Result<_>>()?;
        let valid_time = cycle as f64 * cfg.interval;

        for (mi, &method) in cfg.methods.iter().enumerate() {
            let forecast = match states[mi].take() {
                Some(_) if method == Method::Free => Ok(free.clone()),
                Some(an) => forecast_ensemble(&an, &cfg.model, steps, &family),
                None => Err(Error::InvalidInput("method failed earlier".into())),
            };
            let mut rank_rng = seed_stream(seed, rep, c, role::RANK, method.id());
            let analysis = forecast.as_ref().map_err(Clone::clone).and_then(|fc| {
                if method == Method::Free {
                    return Ok((fc.clone(), AnalysisDiag::default()));
                }
                let mut rng = seed_stream(seed, rep, c, role::ANALYSIS, method.id());
                assimilator.analyse(cfg, method, fc, &obs, &mut rng)
            });

            for (fi, &field) in Field::ALL.iter().enumerate() {
                let t = truth_field(&truth, field);
                let fc_block = forecast.as_ref().ok().map(|fc| field_block(fc, field, n));
                let crps = match &fc_block {
                    Some(b) => Some(field_crps(b, t)?),
                    None => None,
                };
                out.scores.push(ScoreRecord::new(rep, cycle, method.name(), field, crps, free_crps[fi]));
                if let Some(b) = &fc_block {
                    out.ranks
                        .get_mut(&(method, field))
                        .expect("inserted above")
                        .add_field(b, t, valid_time, cfg.thinning, &mut rank_rng)?;
                }
                if cfg.trace {
                    let fc_sum = fc_block.as_ref().map(summary);
                    let an_sum = analysis.as_ref().ok().map(|(a, _)| summary(&field_block(a, field, n)));
                    let diag = analysis.as_ref().ok().map(|(_, d)| d.clone()).unwrap_or_default();
                    let (gamma_min, gamma_mean, gamma_max) = stats(&diag.gammas);
                    out.trace.push(CycleTrace {
                        cycle,
                        method: method.name().to_string(),
                        field,
                        truth_mean: t.iter().sum::<f64>() / n as f64,
                        forecast_mean: fc_sum.map(|s| s.0),
                        forecast_spread: fc_sum.map(|s| s.1),
                        analysis_mean: an_sum.map(|s| s.0),
                        analysis_spread: an_sum.map(|s| s.1),
                        gamma_min,
                        gamma_mean,
                        gamma_max,
                        ess_mean: stats(&diag.ess).1,
                        n_obs: obs.len(),
                    });
                }
            }
            states[mi] = analysis.ok().map(|(a, _)| a);
        }
    }
    Ok(out)
}

/// Runs all repetitions in parallel on the current rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let repetitions = (0..cfg.repetitions as u64)
        .into_par_iter()
        .map(|rep| run_repetition(cfg, rep))
        .collect::<Result<_>>()?;
    Ok(ExperimentOutput { repetitions })
}

/// As [`run_experiment`], on a dedicated pool of `threads` workers.
pub fn run_experiment_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot build thread pool: {e}")))?;
    pool.install(|| run_experiment(cfg))
}

pub fn write_scores<W: Write>(out: &ExperimentOutput, writer: W) -> Result<W> {
    let mut w = ScoreWriter::new(writer);
    for record in out.scores() {
        w.write(record)?;
    }
    w.finish()
}

#[derive(Serialize)]
struct RankRow<'a> {
    method: &'a str,
    field: Field,
    rank: usize,
    count: u64,
}

pub fn write_ranks<W: Write>(out: &ExperimentOutput, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(["method", "field", "rank", "count"])?;
    for ((method, field), hist) in out.ranks() {
        for (rank, &count) in hist.counts.iter().enumerate() {
            w.serialize(RankRow {
                method: method.name(),
                field,
                rank,
                count,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(trace: &[CycleTrace], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `scores.csv`, `ranks.csv` and, when tracing, `trace_<rep>.csv`.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path, trace: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_scores(out, BufWriter::new(File::create(dir.join("scores.csv"))?))?.flush()?;
    write_ranks(out, BufWriter::new(File::create(dir.join("ranks.csv"))?))?;
    if trace {
        for (rep, r) in out.repetitions.iter().enumerate() {
            write_trace(&r.trace, BufWriter::new(File::create(dir.join(format!("trace_{rep}.csv")))?))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scenario;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(Scenario::Hf);
        cfg.model.n_points = 60;
        cfg.k = 6;
        cfg.repetitions = 2;
        cfg.duration = 900.0;
        cfg.spinup_separation_days = 0.01;
        cfg.trace = true;
        cfg
    }

    #[test]
    fn free_only_is_exactly_one_hundred_percent() {
        let mut cfg = small();
        cfg.methods = vec![Method::Free];
        let out = run_experiment(&cfg).unwrap();
        let scores: Vec<_> = out.scores().collect();
        assert_eq!(scores.len(), 2 * 3 * 3);
        for s in scores {
            if let Some(p) = s.relative_pct {
                assert_eq!(p, 100.0);
            }
        }
    }

    #[test]
    fn zero_duration_has_no_records() {
        let mut cfg = small();
        cfg.duration = 0.0;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.scores().count(), 0);
        let mut buf = Vec::new();
        buf = write_scores(&out, buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "rep,cycle,method,field,crps,crps_free,relative_pct\n");
    }

    #[test]
    fn every_method_runs_and_traces() {
        let mut cfg = small();
        cfg.methods = Method::ALL.to_vec();
        cfg.repetitions = 1;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.scores().count(), 3 * 7 * 3);
        let trace = &out.repetitions[0].trace;
        assert_eq!(trace.len(), 3 * 7 * 3);
        for t in trace {
            for g in [t.gamma_min, t.gamma_max].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&g));
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_scores() {
        let mut cfg = small();
        cfg.methods = vec![Method::Lenkf, Method::BlockLenkpf, Method::NaiveLenkpf, Method::Free];
        let a = write_scores(&run_experiment_with_threads(&cfg, 1).unwrap(), Vec::new()).unwrap();
        let b = write_scores(&run_experiment_with_threads(&cfg, 4).unwrap(), Vec::new()).unwrap();
        assert_eq!(a, b);
    }
}
