//! Dataset alignment and the expanding-window synthesis run.
//!
//! For horizon `k` the synthesizer is trained on outcomes `y_s` paired with
//! the agent forecasts issued at `s - k` for horizon `k`, and then forecasts
//! the target `k` months after the current origin.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agents::{realized_target, ForecastArchive};
use crate::calendar::YearMonth;
use crate::error::{BpsError, Result};
use crate::density::AgentForecastDensity;
use crate::evaluation::{kl_discrete, kl_mc, predictive_logpdf};
use crate::gibbs::{forecast_one_step, run_mcmc_with_rng, BpsPrior, McmcConfig, PosteriorDraws, SynthesisData};
use crate::panel::TimeSeriesPanel;
use crate::par::{map_range, Execution};
use crate::states::ForecastSet;

/// A time point or origin left out, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Gap {
    pub date: YearMonth,
    pub horizon: usize,
    pub stage: String,
    /// Process exit code for this failure category.
    pub code: i32,
    pub reason: String,
}

/// Outcomes paired with the agent forecasts that target them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignedDataset {
    pub targets: Vec<YearMonth>,
    pub y: Vec<DVector<f64>>,
    pub forecasts: Vec<ForecastSet>,
    pub gaps: Vec<Gap>,
}

impl AlignedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// The leading entries with target date at most `last`.
    pub fn prefix_through(&self, last: YearMonth) -> Result<SynthesisData> {
        let n = self.targets.partition_point(|d| *d <= last);
        if n == 0 {
            return Err(BpsError::Data(format!("no training data through {last}")));
        }
        SynthesisData::new(self.y[..n].to_vec(), self.forecasts[..n].to_vec())
    }
}

fn month_range(first: YearMonth, last: YearMonth) -> impl Iterator<Item = YearMonth> {
    let n = last.months_since(first) + 1;
    (0..n.max(0)).map(move |i| first.add_months(i))
}

/// One-step alignment: `y_s` with the forecasts issued one month earlier.
pub fn build_standard_dataset(
    archive: &ForecastArchive,
    panel: &TimeSeriesPanel,
    first: YearMonth,
    last: YearMonth,
) -> AlignedDataset {
    let mut out = AlignedDataset::default();
    for s in month_range(first, last) {
        let origin = s.add_months(-1);
        let gap = |reason: &str| Gap { date: s, horizon: 1, stage: "align".into(), code: 3, reason: reason.into() };
        let Some(row) = panel.index_of(s) else {
            out.gaps.push(gap("outcome outside the panel"));
            continue;
        };
        let Some(set) = archive.agent_set(origin, 1) else {
            out.gaps.push(gap("missing agent forecast"));
            continue;
        };
        out.targets.push(s);
        out.y.push(panel.row(row));
        out.forecasts.push(ForecastSet::new(set));
    }
    out
}

/// Horizon-`k` alignment: the target at `s` (built from the path after
/// `s - k`) with the `k`-step forecasts issued at `s - k`.
pub fn build_bps_k_dataset(
    k: usize,
    archive: &ForecastArchive,
    panel: &TimeSeriesPanel,
    first: YearMonth,
    last: YearMonth,
) -> Result<AlignedDataset> {
    if k == 0 {
        return Err(BpsError::InvalidInput("horizon must be at least 1".into()));
    }
    let mut out = AlignedDataset::default();
    for s in month_range(first, last) {
        let origin = s.add_months(-(k as i64));
        let gap = |reason: &str| Gap { date: s, horizon: k, stage: "align".into(), code: 3, reason: reason.into() };
        let realized = match panel.index_of(origin) {
            Some(row) => realized_target(&panel.values, row, k, &archive.roles)?,
            None => None,
        };
        let Some(y) = realized else {
            out.gaps.push(gap("outcome outside the panel"));
            continue;
        };
        let Some(set) = archive.agent_set(origin, k) else {
            out.gaps.push(gap("missing agent forecast"));
            continue;
        };
        out.targets.push(s);
        out.y.push(y);
        out.forecasts.push(ForecastSet::new(set));
    }
    Ok(out)
}

/// Training start, test window (target dates) and horizons.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub train_start: YearMonth,
    pub test_start: YearMonth,
    pub test_end: YearMonth,
    pub horizons: Vec<usize>,
}

impl Schedule {
    /// Synthesis training from 1993-07, targets 2001-01 through 2015-12, horizons 1, 12, 24.
    pub fn macro_default() -> Self {
        Self {
            train_start: YearMonth::new(1993, 7).expect("valid month"),
            test_start: YearMonth::new(2001, 1).expect("valid month"),
            test_end: YearMonth::new(2015, 12).expect("valid month"),
            horizons: vec![1, 12, 24],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(BpsError::Config("horizons must be a nonempty list of positive integers".into()));
        }
        if self.test_end < self.test_start {
            return Err(BpsError::Config("test window ends before it starts".into()));
        }
        Ok(())
    }

    pub fn test_targets(&self) -> Vec<YearMonth> {
        month_range(self.test_start, self.test_end).collect()
    }

    /// Every origin at which agent forecasts are needed, across horizons.
    pub fn agent_origins(&self) -> Vec<YearMonth> {
        let max_k = *self.horizons.iter().max().unwrap_or(&1) as i64;
        let min_k = *self.horizons.iter().min().unwrap_or(&1) as i64;
        month_range(self.train_start.add_months(-max_k), self.test_end.add_months(-min_k)).collect()
    }
}

/// Which alignment code path to use at `k = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alignment {
    /// Standard one-step pairing at `k = 1`, horizon alignment otherwise.
    #[default]
    Standard,
    /// Horizon alignment for every `k`.
    HorizonK,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub mcmc: McmcConfig,
    /// Keep every `kl_stride`-th path draw at the final origin for the KL series; `None` skips KL.
    pub kl_stride: Option<usize>,
    pub alignment: Alignment,
    pub execution: Execution,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self { mcmc: McmcConfig::default(), kl_stride: Some(1), alignment: Alignment::Standard, execution: Execution::default() }
    }
}

/// Summary of the synthesized forecast distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSummary {
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
    pub q05: DVector<f64>,
    pub q50: DVector<f64>,
    pub q95: DVector<f64>,
}

impl ForecastSummary {
    pub fn from_samples(samples: &DMatrix<f64>) -> Result<Self> {
        let (n, q) = samples.shape();
        if n == 0 {
            return Err(BpsError::InvalidInput("no forecast samples".into()));
        }
        let mut s = Self {
            mean: DVector::zeros(q),
            sd: DVector::zeros(q),
            q05: DVector::zeros(q),
            q50: DVector::zeros(q),
            q95: DVector::zeros(q),
        };
        for r in 0..q {
            let mut col: Vec<f64> = samples.column(r).iter().copied().collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            col.sort_by(f64::total_cmp);
            s.mean[r] = mean;
            s.sd[r] = var.sqrt();
            s.q05[r] = quantile(&col, 0.05);
            s.q50[r] = quantile(&col, 0.5);
            s.q95[r] = quantile(&col, 0.95);
        }
        Ok(s)
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Results for one origin and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct OriginResult {
    pub horizon: usize,
    pub origin: YearMonth,
    pub target: YearMonth,
    pub n_train: usize,
    pub forecast: ForecastSummary,
    pub realized: Option<DVector<f64>>,
    pub bps_logpdf: Option<f64>,
    /// Posterior mean of `θ` at the origin.
    pub theta_mean: DVector<f64>,
    /// Posterior correlation of `vec(X)` at the origin.
    pub state_correlation: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlPoint {
    pub date: YearMonth,
    pub value: std::result::Result<f64, String>,
}

/// Everything produced for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonRun {
    pub horizon: usize,
    pub results: Vec<OriginResult>,
    pub gaps: Vec<Gap>,
    /// Retrospective KL of posterior agent states from their priors at the final origin.
    pub kl: Vec<KlPoint>,
}

/// Stream for the job forecasting `target` at horizon `k`.
fn job_rng(seed: u64, k: usize, target: YearMonth) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 32) | (target.ordinal() as u64 & 0xFFFF_FFFF));
    rng
}

struct JobOutput {
    result: OriginResult,
    kl: Vec<KlPoint>,
}

/// Expanding-window synthesis: for each horizon `k` and each test target
/// `s`, fit the synthesizer on data through origin `s - k` and forecast `s`.
///
/// Origins run in parallel, each with its own random stream derived from
/// `settings.mcmc.seed`. A failing origin is recorded as a gap and skipped.
pub fn sequential_run<P>(
    panel: &TimeSeriesPanel,
    archive: &ForecastArchive,
    schedule: &Schedule,
    prior_for: P,
    settings: &RunSettings,
) -> Result<Vec<HorizonRun>>
where
    P: Fn(usize) -> BpsPrior + Sync,
{
    schedule.validate()?;
    settings.mcmc.validate()?;
    if archive.series != panel.names {
        return Err(BpsError::Data("archive series do not match the panel".into()));
    }
    let targets = schedule.test_targets();
    let mut runs = Vec::with_capacity(schedule.horizons.len());
    for &k in &schedule.horizons {
        let last_origin = schedule.test_end.add_months(-(k as i64));
        let dataset = if k == 1 && settings.alignment == Alignment::Standard {
            build_standard_dataset(archive, panel, schedule.train_start, last_origin)
        } else {
            build_bps_k_dataset(k, archive, panel, schedule.train_start, last_origin)?
        };
        for g in &dataset.gaps {
            debug!("horizon {k}: {} dropped ({})", g.date, g.reason);
        }
        let prior = prior_for(k);
        let jobs: Vec<std::result::Result<JobOutput, Gap>> = map_range(settings.execution, targets.len(), |i| {
            let is_final = i + 1 == targets.len();
            run_origin(panel, archive, &dataset, k, targets[i], &prior, settings, is_final)
        });
        let mut run = HorizonRun { horizon: k, results: Vec::new(), gaps: dataset.gaps.clone(), kl: Vec::new() };
        for job in jobs {
            match job {
                Ok(out) => {
                    if !out.kl.is_empty() {
                        run.kl = out.kl;
                    }
                    run.results.push(out.result);
                }
                Err(gap) => {
                    warn!("horizon {k}, origin {}: {} failed: {}", gap.date, gap.stage, gap.reason);
                    run.gaps.push(gap);
                }
            }
        }
        runs.push(run);
    }
    Ok(runs)
}

fn run_origin(
    panel: &TimeSeriesPanel,
    archive: &ForecastArchive,
    dataset: &AlignedDataset,
    k: usize,
    target: YearMonth,
    prior: &BpsPrior,
    settings: &RunSettings,
    is_final: bool,
) -> std::result::Result<JobOutput, Gap> {
    let origin = target.add_months(-(k as i64));
    let fail = |stage: &str, e: BpsError| Gap { date: origin, horizon: k, stage: stage.into(), code: e.exit_code(), reason: e.to_string() };
    let data = dataset.prefix_through(origin).map_err(|e| fail("align", e))?;
    let next = archive
        .agent_set(origin, k)
        .map(ForecastSet::new)
        .ok_or_else(|| fail("align", BpsError::Data("missing agent forecast for the forecast origin".into())))?;
    let mut cfg = settings.mcmc.clone();
    cfg.execution = settings.execution;
    cfg.path_stride = if is_final { settings.kl_stride } else { None };
    let mut rng = job_rng(settings.mcmc.seed, k, target);
    let draws = run_mcmc_with_rng(&data, prior, &cfg, &mut rng).map_err(|e| fail("mcmc", e))?;
    let forecast = forecast_one_step(&draws, &next, prior, &mut rng).map_err(|e| fail("forecast", e))?;
    let summary = ForecastSummary::from_samples(&forecast.samples).map_err(|e| fail("forecast", e))?;
    let realized = match panel.index_of(origin) {
        Some(row) => realized_target(&panel.values, row, k, &archive.roles).map_err(|e| fail("evaluate", e))?,
        None => None,
    };
    let bps_logpdf = match &realized {
        Some(y) => Some(predictive_logpdf(&forecast, y).map_err(|e| fail("evaluate", e))?),
        None => None,
    };
    let kl = if is_final && !draws.paths.is_empty() {
        let dates = &dataset.targets[..data.len()];
        kl_series(&draws, &data, dates)
    } else {
        Vec::new()
    };
    Ok(JobOutput {
        result: OriginResult {
            horizon: k,
            origin,
            target,
            n_train: data.len(),
            forecast: summary,
            realized,
            bps_logpdf,
            theta_mean: draws.terminal_theta_mean(),
            state_correlation: draws.terminal_state_correlation(),
        },
        kl,
    })
}

/// KL of the posterior of `vec(X_t)` from the agents' product prior at every training time.
pub fn kl_series(draws: &PosteriorDraws, data: &SynthesisData, dates: &[YearMonth]) -> Vec<KlPoint> {
    (0..data.len())
        .map(|t| {
            let samples: Vec<DVector<f64>> = draws
                .paths
                .iter()
                .map(|p| DVector::from_iterator(p.x[t].len(), p.x[t].transpose().iter().copied()))
                .collect();
            let set = &data.forecasts[t];
            let q = data.num_series();
            let empirical = set.densities.iter().filter(|d| d.is_empirical()).count();
            let value = if empirical == set.densities.len() {
                // Sample-based agents give a discrete posterior over their draws.
                kl_discrete(&samples, |x| {
                    let mut acc = 0.0;
                    for (j, d) in set.densities.iter().enumerate() {
                        let AgentForecastDensity::Empirical { draws, .. } = d else { unreachable!() };
                        let xj = x.rows(j * q, q);
                        let hits = draws.row_iter().filter(|r| r.iter().zip(xj.iter()).all(|(a, b)| a == b)).count();
                        acc += (hits as f64 / draws.nrows() as f64).ln();
                    }
                    Ok(acc)
                })
            } else if empirical > 0 {
                Err(BpsError::InvalidInput("mixed sample-based and parametric agent densities".into()))
            } else {
                kl_mc(&samples, |x| {
                    let mut acc = 0.0;
                    for (j, d) in set.densities.iter().enumerate() {
                        acc += d.log_density_or_gaussian(&x.rows(j * q, q).into_owned())?;
                    }
                    Ok(acc)
                })
            };
            KlPoint { date: dates[t], value: value.map_err(|e| e.to_string()) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::TargetRole;
    use crate::density::AgentForecastDensity;
    use crate::panel::SeriesTransform;

    fn ym(s: &str) -> YearMonth {
        s.parse().unwrap()
    }

    fn setup() -> (TimeSeriesPanel, ForecastArchive) {
        let start = ym("2000-01");
        let n = 30;
        let dates = (0..n).map(|i| start.add_months(i)).collect();
        let values = DMatrix::from_fn(n as usize, 1, |t, _| t as f64);
        let panel = TimeSeriesPanel::new(dates, values, vec!["y".into()], vec![SeriesTransform::MonthlyChange]).unwrap();
        let mut archive =
            ForecastArchive::new(vec!["y".into()], vec![TargetRole::Cumulative], vec!["a".into(), "b".into()]).unwrap();
        for i in 0..n {
            for k in [1, 3] {
                for j in 0..2 {
                    let d = AgentForecastDensity::normal(DVector::from_element(1, i as f64 + j as f64), DMatrix::identity(1, 1));
                    archive.insert(start.add_months(i), k, j, d).unwrap();
                }
            }
        }
        (panel, archive)
    }

    #[test]
    fn k_alignment_pairs_outcome_with_lagged_origin() {
        let (panel, archive) = setup();
        let d = build_bps_k_dataset(3, &archive, &panel, ym("2000-06"), ym("2000-08")).unwrap();
        assert_eq!(d.targets, vec![ym("2000-06"), ym("2000-07"), ym("2000-08")]);
        assert_eq!(d.y[0][0], 3.0 + 4.0 + 5.0);
        assert_eq!(d.forecasts[0].densities[0], archive.get(ym("2000-03"), 3, 0).unwrap().clone());
    }

    #[test]
    fn one_step_alignments_agree() {
        let (panel, archive) = setup();
        let a = build_standard_dataset(&archive, &panel, ym("2000-02"), ym("2001-06"));
        let b = build_bps_k_dataset(1, &archive, &panel, ym("2000-02"), ym("2001-06")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_agent_drops_time_point() {
        let (panel, archive) = setup();
        let full = build_bps_k_dataset(1, &archive, &panel, ym("2000-02"), ym("2000-12")).unwrap();
        let mut holed = ForecastArchive::new(archive.series.clone(), archive.roles.clone(), archive.agents.clone()).unwrap();
        for (&(o, k, j), d) in archive.iter() {
            if !(o == ym("2000-05") && j == 1) {
                holed.insert(o, k, j, d.clone()).unwrap();
            }
        }
        let gapped = build_bps_k_dataset(1, &holed, &panel, ym("2000-02"), ym("2000-12")).unwrap();
        assert_eq!(gapped.len(), full.len() - 1);
        assert_eq!(gapped.gaps.len(), 1);
        assert_eq!(gapped.gaps[0].date, ym("2000-06"));
    }

    #[test]
    fn macro_schedule_has_180_targets() {
        let s = Schedule::macro_default();
        assert_eq!(s.test_targets().len(), 180);
        assert_eq!(s.agent_origins()[0], ym("1991-07"));
    }

    #[test]
    fn quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&xs, 0.5), 3.0);
        assert_eq!(quantile(&xs, 0.05), 1.2);
        assert_eq!(quantile(&[7.0], 0.95), 7.0);
    }
}
