//! Ensemble Kalman particle filters (EnKPF) and their localized variants,
//! together with a one-dimensional convective-scale test model and the
//! scoring tools used to compare them.

pub mod config;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod global;
pub mod grid;
pub mod linalg;
pub mod local;
pub mod obs;
pub mod rng;
pub mod scoring;
pub mod sweq;
pub mod taper;

pub use ensemble::{ensemble_moments, Ensemble, EnsembleKind};
pub use error::{Error, Result};
pub use global::{
    adaptive_gamma, balanced_resample, choose_gamma, enkf_update, enkpf_update, ess, pf_weights,
    systematic_resample, EnsembleNoise, EssBand, MixtureWeights, ResampleIndices,
};
pub use grid::{FieldLayout, GridGeometry};
pub use local::{
    block_lenkpf_update, lenkf_update, naive_lenkpf_update, LocalOutcome, LocalWindowSpec,
};
pub use obs::GaussObs;
pub use taper::{gaspari_cohn, DenseTaper, GridTaper, Taper, TaperSpec};
pub use config::{parse_config, parse_config_with, ExperimentConfig, Method, Scenario};
pub use experiment::{run_experiment, run_experiment_with_threads, write_outputs, ExperimentOutput};
