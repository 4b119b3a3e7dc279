//! Nonparametric estimation of covariate-dependent transition rates in
//! continuous-time Markov chains.
//!
//! Each transition arm `i -> j` has a log-rate `ln q_ij(z)` living in a
//! reproducing kernel Hilbert space. Fitting works from fully observed,
//! possibly right-censored trajectories, either by ridge-penalized maximum
//! likelihood ([`fit_freq`]) or by EM variable selection under a
//! spike-and-slab prior on the representer weights ([`fit_emvs`]).

// `!(x > 0.0)` style checks reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod dataset;
pub mod error;
pub mod fit_emvs;
pub mod fit_freq;
pub mod kernel;
pub mod likelihood;
pub mod metrics;
pub mod mixture;
pub mod optim;
pub mod rng;
pub mod study;

pub use chain::{
    gillespie_simulate, simulate_trajectories, Arm, ArmKind, ArmSpec, CensoringModel,
    ChainTopology, CovariateLaw, GeneratorMatrix, Jump, Polynomial, SimulationSettings, Trajectory,
};
pub use dataset::{Dataset, DatasetMetadata};
pub use error::{Error, Result};
pub use fit_emvs::{fit_emvs, EmvsConfig, EmvsFit, EmvsInit};
pub use fit_freq::{fit_frequentist, Design, FitResult, FreqConfig, InitStrategy};
pub use kernel::{gram, GramSet, KernelSpec, RateFunction, ScalarKernel, WeightVector};
pub use likelihood::{grad_neg_log_lik, neg_log_lik, penalized_loss, Objective, Penalty};
pub use metrics::{absorption_distance, curve_export, mse_lngen, AbsorptionReport, MseReport};
pub use study::{run_scenario, Case, Method, Preset, ScenarioSpec, StudyReport};
