//! Agent forecast generators and the forecast archive.

pub mod archive;
pub mod lags;
pub mod target;
pub mod tvp_var;

use log::debug;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use archive::ForecastArchive;
pub use lags::{parse_lag_spec, LagSpec};
pub use target::{build_forecast_target, realized_target, TargetRole};
pub use tvp_var::{
    agent_forecast, fit_tvpvar_filter, DensityMode, ForecastOptions, TvpVarPrior, TvpVarSpec, TvpVarState,
};

use crate::calendar::YearMonth;
use crate::error::{BpsError, Result};
use crate::panel::TimeSeriesPanel;
use crate::par::{try_map_range, Execution};

/// The five standard agents: VAR(1), VAR(12), VAR(3), VAR(1:3:9), VAR(1:6:12).
pub fn default_agents() -> Vec<TvpVarSpec> {
    ["1", "12", "3", "1:3:9", "1:6:12"]
        .iter()
        .map(|s| TvpVarSpec::new(format!("VAR({s})"), parse_lag_spec(s).expect("valid built-in lag spec")))
        .collect()
}

/// An agent plus an optional constant shift added to all its forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub model: TvpVarSpec,
    pub shift: Option<DVector<f64>>,
}

impl From<TvpVarSpec> for AgentSpec {
    fn from(model: TvpVarSpec) -> Self {
        Self { model, shift: None }
    }
}

/// Random stream for one agent forecast job.
pub(crate) fn job_rng(seed: u64, agent: usize, horizon: usize, origin: YearMonth) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let month = origin.ordinal() as u64 & 0xFF_FFFF;
    rng.set_stream(((agent as u64) << 40) | ((horizon as u64) << 24) | month);
    rng
}

/// Filter every agent over the panel and archive its forecasts for each
/// origin and horizon.
///
/// Filtering is on-line, so the forecast at an origin only uses data up to
/// that origin. Origins before an agent's first full lag window are skipped
/// and show up as gaps downstream. Agents and jobs run in parallel; each
/// job draws from its own stream, so results do not depend on scheduling.
pub fn build_archive(
    panel: &TimeSeriesPanel,
    agents: &[AgentSpec],
    origins: &[YearMonth],
    horizons: &[usize],
    opts: &ForecastOptions,
    seed: u64,
    exec: Execution,
) -> Result<ForecastArchive> {
    let roles: Vec<TargetRole> = panel.transforms.iter().map(|&t| t.into()).collect();
    let names = agents.iter().map(|a| a.model.name.clone()).collect();
    let mut archive = ForecastArchive::new(panel.names.clone(), roles.clone(), names)?;
    let q = panel.num_series();
    for a in agents {
        if a.shift.as_ref().is_some_and(|s| s.len() != q) {
            return Err(BpsError::Config(format!("shift for agent '{}' has the wrong length", a.model.name)));
        }
    }
    let filtered = try_map_range(exec, agents.len(), |j| fit_tvpvar_filter(&panel.values, &agents[j].model))?;

    let mut jobs = Vec::new();
    for (oi, &origin) in origins.iter().enumerate() {
        let row = panel
            .index_of(origin)
            .ok_or_else(|| BpsError::Data(format!("forecast origin {origin} is outside the panel")))?;
        for &k in horizons {
            for j in 0..agents.len() {
                let max_lag = agents[j].model.lags.max_lag();
                if row >= max_lag {
                    jobs.push((oi, row, k, j, row - max_lag));
                } else {
                    debug!("agent {} has no forecast at {origin}: lag window incomplete", agents[j].model.name);
                }
            }
        }
    }
    let results = try_map_range(exec, jobs.len(), |i| {
        let (oi, _row, k, j, state_index) = jobs[i];
        let mut rng = job_rng(seed, j, k, origins[oi]);
        let density = agent_forecast(&filtered[j][state_index], &panel.values, k, &roles, opts, &mut rng)?;
        Ok(match &agents[j].shift {
            Some(s) => density.shifted(s),
            None => density,
        })
    })?;
    for (&(oi, _, k, j, _), density) in jobs.iter().zip(results) {
        archive.insert(origins[oi], k, j, density)?;
    }
    Ok(archive)
}
