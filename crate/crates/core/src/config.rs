//! Experiment configuration, read from TOML.
//!
//! Every key is optional; missing keys take the reference defaults. Sections:
//! `[experiment]`, `[filters]`, `[model]`, `[radar]`, `[scoring]`. Unknown
//! keys are rejected.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::EssBand;
use crate::scoring::Thinning;
use crate::sweq::{ModelParams, RadarParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// 5 min cycles for 1 hour.
    Hf,
    /// 30 min cycles for 3 days.
    Lf,
    Custom,
}

impl Scenario {
    /// `(interval s, duration s, repetitions)`.
    fn defaults(self) -> (f64, f64, usize) {
        match self {
            Scenario::Hf | Scenario::Custom => (300.0, 3600.0, 1000),
            Scenario::Lf => (1800.0, 3.0 * 86_400.0, 100),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hf" => Ok(Scenario::Hf),
            "lf" => Ok(Scenario::Lf),
            "custom" => Ok(Scenario::Custom),
            other => Err(Error::param("scenario", format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    EnkfGlobal,
    Lenkf,
    NaiveLenkpf,
    BlockLenkpf,
    PfGlobal,
    EnkpfGlobal,
    Free,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::EnkfGlobal,
        Method::Lenkf,
        Method::NaiveLenkpf,
        Method::BlockLenkpf,
        Method::PfGlobal,
        Method::EnkpfGlobal,
        Method::Free,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::EnkfGlobal => "enkf_global",
            Method::Lenkf => "lenkf",
            Method::NaiveLenkpf => "naive_lenkpf",
            Method::BlockLenkpf => "block_lenkpf",
            Method::PfGlobal => "pf_global",
            Method::EnkpfGlobal => "enkpf_global",
            Method::Free => "free",
        }
    }

    /// Stable id used to key random streams.
    pub fn id(self) -> u32 {
        Method::ALL.iter().position(|&m| m == self).expect("listed") as u32
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::param("methods", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    scenario: Option<Scenario>,
    methods: Option<Vec<Method>>,
    repetitions: Option<usize>,
    base_seed: Option<u64>,
    output: Option<PathBuf>,
    interval: Option<f64>,
    duration: Option<f64>,
    spinup_separation_days: Option<f64>,
    trace: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFilters {
    k: Option<usize>,
    localization: Option<f64>,
    window_radius: Option<f64>,
    ess_band: Option<(f64, f64)>,
    rain_var: Option<f64>,
    wind_var: Option<f64>,
    segment_length: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScoring {
    space_thin: Option<usize>,
    time_thin: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    experiment: RawExperiment,
    #[serde(default)]
    filters: RawFilters,
    #[serde(default)]
    model: ModelParams,
    #[serde(default)]
    radar: RadarParams,
    #[serde(default)]
    scoring: RawScoring,
}

/// A fully resolved, validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub repetitions: usize,
    pub base_seed: u64,
    pub output: PathBuf,
    /// Assimilation interval, seconds.
    pub interval: f64,
    /// Total assimilation time, seconds.
    pub duration: f64,
    pub spinup_separation_days: f64,
    pub trace: bool,
    /// Ensemble size.
    pub k: usize,
    /// Gaspari–Cohn half-length, meters.
    pub localization: f64,
    /// Observation-gathering radius of LEnKF and NAIVE, meters.
    pub window_radius: f64,
    pub ess_band: EssBand,
    pub rain_var: f64,
    pub wind_var: f64,
    /// BLOCK segment length, meters.
    pub segment_length: f64,
    pub model: ModelParams,
    pub radar: RadarParams,
    pub thinning: Thinning,
}

impl ExperimentConfig {
    /// Reference defaults for a scenario.
    pub fn defaults(scenario: Scenario) -> Self {
        let (interval, duration, repetitions) = scenario.defaults();
        Self {
            scenario,
            methods: vec![Method::Lenkf, Method::NaiveLenkpf, Method::BlockLenkpf, Method::Free],
            repetitions,
            base_seed: 0,
            output: PathBuf::from("out"),
            interval,
            duration,
            spinup_separation_days: 0.25,
            trace: false,
            k: 50,
            localization: 5000.0,
            window_radius: 5000.0,
            ess_band: EssBand::default(),
            rain_var: 0.025 * 0.025,
            wind_var: 0.0025 * 0.0025,
            segment_length: 10_000.0,
            model: ModelParams::default(),
            radar: RadarParams::default(),
            thinning: Thinning::default(),
        }
    }

    pub fn n_cycles(&self) -> usize {
        (self.duration / self.interval + 1e-9).floor() as usize
    }

    pub fn steps_per_cycle(&self) -> usize {
        self.model.steps_for(self.interval)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::param("k", format!("need k >= 2, got {}", self.k)));
        }
        if self.repetitions < 1 {
            return Err(Error::param("repetitions", "need at least one repetition"));
        }
        if self.methods.is_empty() {
            return Err(Error::param("methods", "no methods selected"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::param("methods", format!("`{m}` listed twice")));
            }
        }
        let (lo, hi) = (self.ess_band.lo, self.ess_band.hi);
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return Err(Error::param("ess_band", format!("need 0 < lo < hi <= 1, got ({lo}, {hi})")));
        }
        let positive = [
            ("interval", self.interval),
            ("localization", self.localization),
            ("rain_var", self.rain_var),
            ("wind_var", self.wind_var),
            ("segment_length", self.segment_length),
            ("time_thin", self.thinning.time),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("duration", self.duration),
            ("window_radius", self.window_radius),
            ("spinup_separation_days", self.spinup_separation_days),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be >= 0, got {v}")));
            }
        }
        if self.thinning.space == 0 {
            return Err(Error::param("space_thin", "must be >= 1"));
        }
        self.model.validate()?;
        self.radar.validate()?;
        let steps = self.interval / self.model.dt;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::param(
                "interval",
                format!("{} s is not a whole number of {} s model steps", self.interval, self.model.dt),
            ));
        }
        Ok(())
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a configuration. `scenario` overrides the file's
/// scenario before defaults are filled in.
pub fn parse_config_with(text: &str, scenario: Option<Scenario>) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let scenario = scenario.or(raw.experiment.scenario).unwrap_or(Scenario::Hf);
    let mut cfg = ExperimentConfig::defaults(scenario);
    let e = raw.experiment;
    let f = raw.filters;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(cfg.methods, e.methods);
    set!(cfg.repetitions, e.repetitions);
    set!(cfg.base_seed, e.base_seed);
    set!(cfg.output, e.output);
    set!(cfg.interval, e.interval);
    set!(cfg.duration, e.duration);
    set!(cfg.spinup_separation_days, e.spinup_separation_days);
    set!(cfg.trace, e.trace);
    set!(cfg.k, f.k);
    set!(cfg.localization, f.localization);
    // The window follows the localization length unless set on its own.
    cfg.window_radius = f.window_radius.unwrap_or(cfg.localization);
    if let Some((lo, hi)) = f.ess_band {
        cfg.ess_band = EssBand { lo, hi };
    }
    set!(cfg.rain_var, f.rain_var);
    set!(cfg.wind_var, f.wind_var);
    set!(cfg.segment_length, f.segment_length);
    set!(cfg.thinning.space, raw.scoring.space_thin);
    set!(cfg.thinning.time, raw.scoring.time_thin);
    cfg.model = raw.model;
    cfg.radar = raw.radar;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with(text, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let cfg = parse_config_with("", Some(Scenario::Hf)).unwrap();
        assert_eq!(cfg, ExperimentConfig::defaults(Scenario::Hf));
        assert_eq!(cfg.k, 50);
        assert_eq!(cfg.localization, 5000.0);
        assert_eq!(cfg.ess_band, EssBand { lo: 0.5, hi: 0.8 });
        assert_eq!(cfg.rain_var, 0.025 * 0.025);
        assert_eq!(cfg.wind_var, 0.0025 * 0.0025);
        assert_eq!((cfg.interval, cfg.duration, cfg.n_cycles()), (300.0, 3600.0, 12));
        let lf = parse_config("[experiment]\nscenario = \"lf\"\n").unwrap();
        assert_eq!((lf.interval, lf.n_cycles()), (1800.0, 144));
    }

    #[test]
    fn constraint_violations_name_the_key() {
        let err = parse_config("[filters]\nk = 1\n").unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { name: "k", .. }));
        let err = parse_config("[filters]\ness_band = [0.8, 0.5]\n").unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { name: "ess_band", .. }));
    }

    #[test]
    fn unknown_keys_and_syntax_errors_carry_lines() {
        let err = parse_config("[filters]\nk = 10\nbogus = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(3), .. }), "{err}");
        let err = parse_config("[experiment]\n\nrepetitions = = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(3), .. }), "{err}");
    }

    #[test]
    fn overrides() {
        let text = "[experiment]\nmethods = [\"free\", \"lenkf\"]\nrepetitions = 3\n\
                    [model]\nplume_rate = 0.0\n[filters]\nlocalization = 2500.0\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.methods, vec![Method::Free, Method::Lenkf]);
        assert_eq!(cfg.repetitions, 3);
        assert_eq!(cfg.model.plume_rate, 0.0);
        assert_eq!(cfg.window_radius, 2500.0);
        assert_eq!("naive_lenkpf".parse::<Method>().unwrap(), Method::NaiveLenkpf);
    }
}
