pub mod config;
pub mod dual;
pub mod error;
pub mod forward;
pub mod kernel;
pub mod measure;
pub mod stablecdf;
pub mod stationary;
pub mod suite;

pub use error::{Error, Result};
pub use forward::{jump_integral, Dynamics, EvolutionState, StepControl, Trajectory};
pub use kernel::{eval_regularized, CutoffParams, KernelFamily, KernelSpec, Smoothness};
pub use measure::{
    dyadic_bound, dyadic_tail_integral, envelope_check_lower, envelope_check_upper, power_law_init, xrho_dist,
    xrho_norm, EnvelopeReport, Grid, GridMeasure, Params,
};
pub use stablecdf::StableProfile;
pub use stationary::{
    flux_balance_residual, find_stationary, lambda_continuation, tail_fit, ContinuationReport, FluxBalanceResidual,
    StationaryOptions, StationaryReport, StationaryResult, TailFit,
};
