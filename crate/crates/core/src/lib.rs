//! Dynamic multivariate Bayesian predictive synthesis.
//!
//! Agent forecast densities are combined through a latent-factor dynamic
//! linear model: the outcome is regressed on latent agent states drawn from
//! the agents' own forecasts, with random-walk coefficients and discount
//! inverse-Wishart volatility. Posterior inference is a three-block Gibbs
//! sampler; forecasts are synthetic futures from the fitted model.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod calendar;
pub mod config;
pub mod density;
pub mod dlm;
pub mod error;
pub mod evaluation;
pub mod gibbs;
pub mod linalg;
pub mod panel;
pub mod par;
pub mod pipeline;
pub mod states;
pub mod synth;
pub mod synthesis;
pub mod volatility;

pub use agents::{ForecastArchive, LagSpec, TargetRole, TvpVarSpec, TvpVarState};
pub use calendar::YearMonth;
pub use config::RunConfig;
pub use density::AgentForecastDensity;
pub use dlm::{DesignMatrix, DiscountConfig, ThetaFilterStats, ThetaPosterior};
pub use error::{BpsError, Result};
pub use gibbs::{BpsPrior, ForecastDistribution, McmcConfig, PosteriorDraws, SynthesisData};
pub use panel::{load_panel, SeriesTransform, TimeSeriesPanel};
pub use par::Execution;
pub use pipeline::{cmd_run, PipelineError, RunOverrides};
pub use states::{ForecastSet, LatentAgentStates, TScaleFactors};
pub use synth::{synth_generate, SynthSpec};
pub use synthesis::{sequential_run, HorizonRun, OriginResult, RunSettings, Schedule};
pub use volatility::VolFilterStats;
