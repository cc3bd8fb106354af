//! Run configuration: flat `section.key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. Every key is optional; the defaults reproduce the standard
//! macroeconomic study (five VAR agents, horizons 1, 12 and 24, synthesis
//! training from 1993-07 and test targets 2001-01 through 2015-12).
//!
//! ```text
//! data.path = panel.csv
//! data.transform.i = monthly_change
//! bps.delta = 0.99
//! bps.intercept_variance.12 = 0.01
//! bps.series.i.coef_variance = 0.1
//! agents.lags = 1; 12; 3; 1:3:9; 1:6:12
//! schedule.horizons = 1, 12, 24
//! mcmc.burn_in = 3000
//! seed = 1
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::agents::{parse_lag_spec, AgentSpec, DensityMode, ForecastOptions, LagSpec, TvpVarPrior, TvpVarSpec};
use crate::calendar::YearMonth;
use crate::dlm::DiscountConfig;
use crate::error::{BpsError, Result};
use crate::gibbs::{BpsPrior, InitMode, McmcConfig};
use crate::panel::SeriesTransform;
use crate::synth::SynthSpec;
use crate::synthesis::{Alignment, Schedule};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "BPS_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct BpsSettings {
    pub discounts: DiscountConfig,
    pub n0: f64,
    pub d0: f64,
    pub coef_variance: f64,
    /// Intercept prior variance keyed by horizon.
    pub intercept_variance: BTreeMap<usize, f64>,
    pub series_coef_variance: BTreeMap<String, f64>,
    pub series_intercept_variance: BTreeMap<String, f64>,
}

impl Default for BpsSettings {
    fn default() -> Self {
        Self {
            discounts: DiscountConfig::default(),
            n0: 7.0,
            d0: 0.07,
            coef_variance: 1.0,
            intercept_variance: BTreeMap::from([(1, 0.001), (12, 0.01), (24, 0.1)]),
            series_coef_variance: BTreeMap::from([("i".to_string(), 0.1)]),
            series_intercept_variance: BTreeMap::new(),
        }
    }
}

impl BpsSettings {
    /// Intercept variance for horizon `k`: the entry for the largest configured horizon not above `k`.
    pub fn intercept_variance_for(&self, k: usize) -> f64 {
        self.intercept_variance
            .range(..=k)
            .next_back()
            .or_else(|| self.intercept_variance.iter().next())
            .map_or(0.001, |(_, v)| *v)
    }

    /// Synthesis prior for horizon `k`; series overrides that name no series are ignored.
    pub fn prior_for(&self, k: usize, num_agents: usize, series: &[String]) -> BpsPrior {
        let q = series.len();
        let mut prior = BpsPrior::default_for(num_agents, q);
        prior.discounts = self.discounts;
        prior.n0 = self.n0;
        prior.d0 = DMatrix::identity(q, q) * self.d0;
        for i in 0..prior.c0.nrows() {
            prior.c0[(i, i)] = self.coef_variance;
        }
        prior = prior.with_intercept_variance(self.intercept_variance_for(k));
        for (r, name) in series.iter().enumerate() {
            if let Some(v) = self.series_coef_variance.get(name) {
                prior = prior.with_series_coefficient_variance(r, *v);
            }
            if let Some(v) = self.series_intercept_variance.get(name) {
                prior = prior.with_series_intercept_variance(r, *v);
            }
        }
        prior
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSettings {
    pub lags: Vec<LagSpec>,
    pub discounts: DiscountConfig,
    pub prior: TvpVarPrior,
    pub forecast: ForecastOptions,
    /// Constant forecast shifts keyed by 1-based agent number.
    pub shifts: BTreeMap<usize, Vec<f64>>,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            lags: ["1", "12", "3", "1:3:9", "1:6:12"]
                .iter()
                .map(|s| parse_lag_spec(s).expect("valid built-in lag spec"))
                .collect(),
            discounts: DiscountConfig::default(),
            prior: TvpVarPrior::default(),
            forecast: ForecastOptions::default(),
            shifts: BTreeMap::new(),
        }
    }
}

impl AgentSettings {
    pub fn specs(&self, q: usize) -> Result<Vec<AgentSpec>> {
        for (&j, s) in &self.shifts {
            if j == 0 || j > self.lags.len() || s.len() != q {
                return Err(BpsError::Config(format!(
                    "agents.shift.{j} must name one of {} agents and give {q} values",
                    self.lags.len()
                )));
            }
        }
        Ok(self
            .lags
            .iter()
            .enumerate()
            .map(|(j, lags)| {
                let mut model = TvpVarSpec::new(format!("VAR({})", lag_label(lags)), lags.clone());
                model.discounts = self.discounts;
                model.prior = self.prior;
                let shift = self.shifts.get(&(j + 1)).map(|s| nalgebra::DVector::from_vec(s.clone()));
                AgentSpec { model, shift }
            })
            .collect())
    }
}

fn lag_label(lags: &LagSpec) -> String {
    let l = lags.lags();
    if l.iter().enumerate().all(|(i, v)| *v == i + 1) {
        return l.len().to_string();
    }
    if l.len() >= 2 {
        let step = l[1];
        let tail: Vec<usize> = (1..=l[l.len() - 1] / step).map(|i| i * step).collect();
        if l[1..] == tail[..] || (l[0] == step && l == &tail[..]) {
            return format!("{}:{}:{}", l[0], step, l[l.len() - 1]);
        }
    }
    l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSettings {
    pub dir: PathBuf,
    /// Path stride for the KL series at the final origin; 0 disables it.
    pub kl_stride: usize,
    pub write_archive: bool,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { dir: PathBuf::from("bps_out"), kl_stride: 1, write_archive: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub length: usize,
    pub start: YearMonth,
    pub drift_sd: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let base = SynthSpec::macro_panel();
        Self { length: base.len, start: base.start, drift_sd: base.drift_sd }
    }
}

impl SynthSettings {
    pub fn spec(&self) -> SynthSpec {
        let mut spec = SynthSpec::macro_panel();
        spec.len = self.length;
        spec.start = self.start;
        spec.drift_sd = self.drift_sd;
        spec
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    pub transforms: BTreeMap<String, SeriesTransform>,
    pub synth: SynthSettings,
    pub bps: BpsSettings,
    pub agents: AgentSettings,
    pub schedule: Schedule,
    pub mcmc: McmcConfig,
    pub alignment: Alignment,
    pub seed: u64,
    pub output: OutputSettings,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let macro_panel = SynthSpec::macro_panel();
        Self {
            data_path: None,
            transforms: macro_panel.names.into_iter().zip(macro_panel.transforms).collect(),
            synth: SynthSettings::default(),
            bps: BpsSettings::default(),
            agents: AgentSettings::default(),
            schedule: Schedule::macro_default(),
            mcmc: McmcConfig::default(),
            alignment: Alignment::Standard,
            seed: 0,
            output: OutputSettings::default(),
            threads: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| BpsError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str, sep: char) -> Result<Vec<T>> {
    value.split(sep).map(|v| parse(key, v)).collect()
}

fn parse_month(key: &str, value: &str) -> Result<YearMonth> {
    value.parse().map_err(|_| BpsError::Config(format!("{key}: expected YYYY-MM, got '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(BpsError::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

impl RunConfig {
    /// Parse config text; relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let (mut delta, mut beta) = (cfg.bps.discounts.delta, cfg.bps.discounts.beta);
        let (mut a_delta, mut a_beta) = (cfg.agents.discounts.delta, cfg.agents.discounts.beta);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| BpsError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let parts: Vec<&str> = key.split('.').collect();
            match parts.as_slice() {
                ["data", "path"] => cfg.data_path = Some(base_dir.join(value)),
                ["data", "transform", name] => {
                    cfg.transforms.insert(name.to_string(), value.parse()?);
                }
                ["synth", "length"] => cfg.synth.length = parse(key, value)?,
                ["synth", "start"] => cfg.synth.start = parse_month(key, value)?,
                ["synth", "drift_sd"] => cfg.synth.drift_sd = parse(key, value)?,
                ["bps", "delta"] => delta = parse(key, value)?,
                ["bps", "beta"] => beta = parse(key, value)?,
                ["bps", "n0"] => cfg.bps.n0 = parse(key, value)?,
                ["bps", "d0"] => cfg.bps.d0 = parse(key, value)?,
                ["bps", "coef_variance"] => cfg.bps.coef_variance = parse(key, value)?,
                ["bps", "intercept_variance", k] => {
                    cfg.bps.intercept_variance.insert(parse(key, k)?, parse(key, value)?);
                }
                ["bps", "series", name, "coef_variance"] => {
                    cfg.bps.series_coef_variance.insert(name.to_string(), parse(key, value)?);
                }
                ["bps", "series", name, "intercept_variance"] => {
                    cfg.bps.series_intercept_variance.insert(name.to_string(), parse(key, value)?);
                }
                ["agents", "lags"] => {
                    cfg.agents.lags = value.split(';').map(parse_lag_spec).collect::<Result<_>>()?
                }
                ["agents", "delta"] => a_delta = parse(key, value)?,
                ["agents", "beta"] => a_beta = parse(key, value)?,
                ["agents", "n0"] => cfg.agents.prior.n0 = parse(key, value)?,
                ["agents", "d0"] => cfg.agents.prior.d0 = parse(key, value)?,
                ["agents", "coef_variance"] => cfg.agents.prior.coef_variance = parse(key, value)?,
                ["agents", "n_draws"] => cfg.agents.forecast.n_draws = parse(key, value)?,
                ["agents", "max_horizon"] => cfg.agents.forecast.max_horizon = parse(key, value)?,
                ["agents", "density"] => {
                    cfg.agents.forecast.mode = match value {
                        "empirical" => DensityMode::Empirical,
                        "student_t" => DensityMode::StudentTFit,
                        _ => return Err(BpsError::Config(format!("{key}: expected empirical or student_t"))),
                    }
                }
                ["agents", "shift", j] => {
                    cfg.agents.shifts.insert(parse(key, j)?, parse_list(key, value, ',')?);
                }
                ["schedule", "train_start"] => cfg.schedule.train_start = parse_month(key, value)?,
                ["schedule", "test_start"] => cfg.schedule.test_start = parse_month(key, value)?,
                ["schedule", "test_end"] => cfg.schedule.test_end = parse_month(key, value)?,
                ["schedule", "horizons"] => cfg.schedule.horizons = parse_list(key, value, ',')?,
                ["schedule", "alignment"] => {
                    cfg.alignment = match value {
                        "standard" => Alignment::Standard,
                        "horizon" => Alignment::HorizonK,
                        _ => return Err(BpsError::Config(format!("{key}: expected standard or horizon"))),
                    }
                }
                ["mcmc", "burn_in"] => cfg.mcmc.burn_in = parse(key, value)?,
                ["mcmc", "n_saved"] => cfg.mcmc.n_saved = parse(key, value)?,
                ["mcmc", "thin"] => cfg.mcmc.thin = parse(key, value)?,
                ["mcmc", "init"] => {
                    cfg.mcmc.init = match value {
                        "prior" => InitMode::Prior,
                        "observed" => InitMode::Observed,
                        _ => return Err(BpsError::Config(format!("{key}: expected prior or observed"))),
                    }
                }
                ["seed"] => cfg.seed = parse(key, value)?,
                ["output", "dir"] => cfg.output.dir = base_dir.join(value),
                ["output", "kl_stride"] => cfg.output.kl_stride = parse(key, value)?,
                ["output", "write_archive"] => cfg.output.write_archive = parse_bool(key, value)?,
                _ => return Err(BpsError::Config(format!("line {}: unknown key '{key}'", n + 1))),
            }
        }
        cfg.bps.discounts = DiscountConfig { delta, beta };
        cfg.agents.discounts = DiscountConfig { delta: a_delta, beta: a_beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| BpsError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.bps.discounts.validate().map_err(|e| BpsError::Config(format!("bps discounts: {e}")))?;
        self.agents.discounts.validate().map_err(|e| BpsError::Config(format!("agent discounts: {e}")))?;
        self.schedule.validate()?;
        if self.schedule.train_start > self.schedule.test_start {
            return Err(BpsError::Config("schedule.train_start is after schedule.test_start".into()));
        }
        if self.mcmc.n_saved == 0 || self.mcmc.thin == 0 {
            return Err(BpsError::Config("mcmc.n_saved and mcmc.thin must be positive".into()));
        }
        if self.agents.lags.is_empty() {
            return Err(BpsError::Config("agents.lags names no agents".into()));
        }
        if self.agents.forecast.n_draws == 0 {
            return Err(BpsError::Config("agents.n_draws must be positive".into()));
        }
        let positive = [
            ("bps.n0", self.bps.n0),
            ("bps.d0", self.bps.d0),
            ("bps.coef_variance", self.bps.coef_variance),
            ("agents.n0", self.agents.prior.n0),
            ("agents.d0", self.agents.prior.d0),
            ("agents.coef_variance", self.agents.prior.coef_variance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BpsError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let variances = self
            .bps
            .intercept_variance
            .values()
            .chain(self.bps.series_coef_variance.values())
            .chain(self.bps.series_intercept_variance.values());
        if variances.into_iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(BpsError::Config("prior variances must be positive".into()));
        }
        Ok(())
    }

    /// Worker cap from `BPS_THREADS`, if set to a positive integer.
    pub fn threads_from_env() -> Result<Option<usize>> {
        match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => {
                let n: usize = parse(THREADS_ENV, &v)?;
                Ok((n > 0).then_some(n))
            }
            _ => Ok(None),
        }
    }
}
