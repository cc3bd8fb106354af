//! End-to-end orchestration: agents, archive, synthesis, evaluation, reports.
//!
//! Output files (all CSV with a header row):
//!
//! | file | columns |
//! |---|---|
//! | `forecasts_k<k>.csv` | `origin_date,target_date,series,mean,sd,q05,q50,q95` |
//! | `coefficients_k<k>.csv` | `origin_date,series,coef_name,posterior_mean` |
//! | `xcorr_k<k>/xcorr_<origin>.csv` | `state,<state labels>` |
//! | `bps_logpdf_k<k>.csv` | `origin_date,target_date,logpdf` |
//! | `kl.csv` | `horizon,date,kl` |
//! | `msfe.csv` | `horizon,model,series,msfe` |
//! | `msfe_cumulative.csv` | `horizon,model,series,target_date,msfe` |
//! | `lpdr.csv` | `horizon,model,target_date,lpdr` |
//! | `bma_weights.csv` | `horizon,origin_date,agent,weight` |
//! | `gaps.csv` | `horizon,date,stage,code,reason` |

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DVector;

use crate::agents::{build_archive, ForecastArchive};
use crate::calendar::YearMonth;
use crate::config::RunConfig;
use crate::error::{BpsError, Result};
use crate::evaluation::{bma_point_forecast, bma_with_delay, cumulative_msfe, lpdr};
use crate::panel::{load_panel, TimeSeriesPanel};
use crate::par::{with_thread_cap, Execution};
use crate::synth::synth_generate;
use crate::synthesis::{sequential_run, Gap, HorizonRun, RunSettings};

pub const ARCHIVE_DIR: &str = "archive";
pub const BPS_MODEL: &str = "BPS";
pub const BMA_MODEL: &str = "BMA";

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.horizon {
            cfg.schedule.horizons = vec![k];
        }
        if let Some(d) = &self.out_dir {
            cfg.output.dir = d.clone();
        }
    }
}

/// A failed pipeline stage, with the exit code for the process.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineError {
    pub stage: String,
    pub origin: Option<YearMonth>,
    pub code: i32,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: &str, err: BpsError) -> Self {
        Self { stage: stage.into(), origin: None, code: err.exit_code(), message: err.to_string() }
    }

    /// Machine-readable `key=value` log.
    pub fn log_text(&self) -> String {
        let origin = self.origin.map(|o| o.to_string()).unwrap_or_default();
        format!(
            "stage={}\norigin={}\nexit_code={}\nmessage={}\n",
            self.stage,
            origin,
            self.code,
            self.message.replace('\n', " ")
        )
    }

    pub fn write_log(&self, dir: &Path) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("error.log");
        fs::write(&path, self.log_text())?;
        Ok(path)
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed", self.stage)?;
        if let Some(o) = self.origin {
            write!(f, " at {o}")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for PipelineError {}

pub type StageResult<T> = std::result::Result<T, PipelineError>;

fn stage<T>(name: &str, r: Result<T>) -> StageResult<T> {
    r.map_err(|e| PipelineError::new(name, e))
}

fn execution() -> Execution {
    Execution::Parallel
}

/// Panel named by `data.path`, with the configured transform tags.
pub fn load_config_panel(cfg: &RunConfig) -> Result<TimeSeriesPanel> {
    let path = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| BpsError::Config("data.path is not set (generate a panel with synth-data)".into()))?;
    let panel = load_panel(path)?;
    let mut tags = std::collections::HashMap::new();
    for (name, t) in &cfg.transforms {
        if panel.names.contains(name) {
            tags.insert(name.clone(), *t);
        } else {
            log::warn!("transform for '{name}' ignored: no such series in {}", path.display());
        }
    }
    panel.with_transforms(&tags)
}

/// Agent forecasts for every origin the schedule needs that lies inside the panel.
pub fn fit_agents(cfg: &RunConfig, panel: &TimeSeriesPanel) -> Result<ForecastArchive> {
    let agents = cfg.agents.specs(panel.num_series())?;
    let origins: Vec<YearMonth> =
        cfg.schedule.agent_origins().into_iter().filter(|o| panel.index_of(*o).is_some()).collect();
    info!("fitting {} agents for {} origins", agents.len(), origins.len());
    build_archive(panel, &agents, &origins, &cfg.schedule.horizons, &cfg.agents.forecast, cfg.seed, execution())
}

pub fn synthesize(cfg: &RunConfig, panel: &TimeSeriesPanel, archive: &ForecastArchive) -> Result<Vec<HorizonRun>> {
    let mut mcmc = cfg.mcmc.clone();
    mcmc.seed = cfg.seed;
    let settings = RunSettings {
        mcmc,
        kl_stride: (cfg.output.kl_stride > 0).then_some(cfg.output.kl_stride),
        alignment: cfg.alignment,
        execution: execution(),
    };
    let names = panel.names.clone();
    let j = archive.num_agents();
    sequential_run(panel, archive, &cfg.schedule, |k| cfg.bps.prior_for(k, j, &names), &settings)
}

/// The synthesized point forecast and log score for one origin.
#[derive(Debug, Clone, PartialEq)]
pub struct BpsScore {
    pub origin: YearMonth,
    pub target: YearMonth,
    pub mean: DVector<f64>,
    pub logpdf: Option<f64>,
}

pub fn scores_from_run(run: &HorizonRun) -> Vec<BpsScore> {
    run.results
        .iter()
        .map(|r| BpsScore { origin: r.origin, target: r.target, mean: r.forecast.mean.clone(), logpdf: r.bps_logpdf })
        .collect()
}

/// Scores of every model on the common set of scored origins of one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonEvaluation {
    pub horizon: usize,
    pub origins: Vec<YearMonth>,
    pub targets: Vec<YearMonth>,
    /// `BPS`, the agents in archive order, then `BMA`.
    pub models: Vec<String>,
    pub errors: Vec<Vec<DVector<f64>>>,
    pub logpdfs: Vec<Vec<f64>>,
    pub bma_weights: Vec<Vec<f64>>,
}

impl HorizonEvaluation {
    pub fn lpdr(&self, model: usize) -> Result<Vec<f64>> {
        lpdr(&self.logpdfs[model], &self.logpdfs[0])
    }

    pub fn cumulative_msfe(&self, model: usize) -> Result<Vec<DVector<f64>>> {
        cumulative_msfe(&self.errors[model])
    }
}

/// Score BPS, each agent and the BMA baseline at origins where all are available.
pub fn evaluate(
    panel: &TimeSeriesPanel,
    archive: &ForecastArchive,
    horizon: usize,
    bps: &[BpsScore],
) -> Result<(HorizonEvaluation, Vec<Gap>)> {
    let j = archive.num_agents();
    let mut gaps = Vec::new();
    let mut origins = Vec::new();
    let mut targets = Vec::new();
    let mut errors = vec![Vec::new(); j + 2];
    let mut logpdfs = vec![Vec::new(); j + 2];
    let mut agent_means = Vec::new();
    for s in bps {
        let gap = |reason: String| Gap { date: s.origin, horizon, stage: "evaluate".into(), code: 3, reason };
        let Some(bps_lp) = s.logpdf else { continue };
        let Some(row) = panel.index_of(s.origin) else { continue };
        let Some(y) = crate::agents::realized_target(&panel.values, row, horizon, &archive.roles)? else {
            continue;
        };
        let Some(set) = archive.agent_set(s.origin, horizon) else {
            gaps.push(gap("missing agent forecast".into()));
            continue;
        };
        let mut scored = Vec::with_capacity(j);
        for d in &set {
            let (mean, _) = d.moments()?;
            let lp = d.log_density_or_gaussian(&y)?;
            scored.push((mean, lp));
        }
        if scored.iter().any(|(m, lp)| !lp.is_finite() || m.iter().any(|v| !v.is_finite())) {
            gaps.push(gap("non-finite agent score".into()));
            continue;
        }
        origins.push(s.origin);
        targets.push(s.target);
        errors[0].push(&y - &s.mean);
        logpdfs[0].push(bps_lp);
        for (i, (mean, lp)) in scored.iter().enumerate() {
            errors[i + 1].push(&y - mean);
            logpdfs[i + 1].push(*lp);
        }
        agent_means.push((y, scored.into_iter().map(|(m, _)| m).collect::<Vec<_>>()));
    }
    if origins.is_empty() {
        return Err(BpsError::Data(format!("no scored origins at horizon {horizon}")));
    }
    let agent_lp: Vec<Vec<f64>> = (0..origins.len()).map(|t| (1..=j).map(|i| logpdfs[i][t]).collect()).collect();
    let bma = bma_with_delay(&agent_lp, horizon)?;
    for (t, (y, means)) in agent_means.iter().enumerate() {
        errors[j + 1].push(y - bma_point_forecast(&bma.prior_weights[t], means)?);
    }
    logpdfs[j + 1] = bma.logpdf;
    let mut models = vec![BPS_MODEL.to_string()];
    models.extend(archive.agents.iter().cloned());
    models.push(BMA_MODEL.to_string());
    Ok((
        HorizonEvaluation { horizon, origins, targets, models, errors, logpdfs, bma_weights: bma.prior_weights },
        gaps,
    ))
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn clean(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

fn write_file(dir: &Path, name: &str, body: String, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, body)?;
    files.push(path);
    Ok(())
}

fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

/// Per-horizon synthesis files plus `kl.csv`. Results with non-finite values
/// are turned into gap records instead of being written.
pub fn write_synthesis_outputs(
    dir: &Path,
    panel: &TimeSeriesPanel,
    num_agents: usize,
    runs: &mut [HorizonRun],
    files: &mut Vec<PathBuf>,
) -> Result<()> {
    let series = &panel.names;
    let mut kl = String::from("horizon,date,kl\n");
    for run in runs.iter_mut() {
        let k = run.horizon;
        let mut keep = Vec::with_capacity(run.results.len());
        for r in run.results.drain(..) {
            let f = &r.forecast;
            let finite = all_finite(f.mean.iter().chain(&f.sd).chain(&f.q05).chain(&f.q50).chain(&f.q95))
                && all_finite(r.theta_mean.iter())
                && all_finite(r.state_correlation.iter())
                && r.bps_logpdf.is_none_or(f64::is_finite);
            if finite {
                keep.push(r);
            } else {
                run.gaps.push(Gap {
                    date: r.origin,
                    horizon: k,
                    stage: "report".into(),
                    code: 4,
                    reason: "non-finite synthesis output".into(),
                });
            }
        }
        run.results = keep;

        let mut fc = String::from("origin_date,target_date,series,mean,sd,q05,q50,q95\n");
        let mut coef = String::from("origin_date,series,coef_name,posterior_mean\n");
        let mut lp = String::from("origin_date,target_date,logpdf\n");
        let labels: Vec<String> = (0..num_agents)
            .flat_map(|j| series.iter().map(move |s| format!("agent_{}:{s}", j + 1)))
            .collect();
        for r in &run.results {
            let f = &r.forecast;
            for (i, name) in series.iter().enumerate() {
                let _ = writeln!(
                    fc,
                    "{},{},{name},{},{},{},{},{}",
                    r.origin,
                    r.target,
                    num(f.mean[i]),
                    num(f.sd[i]),
                    num(f.q05[i]),
                    num(f.q50[i]),
                    num(f.q95[i])
                );
                let block = num_agents + 1;
                for c in 0..block {
                    let cname = if c == 0 { "intercept".to_string() } else { format!("agent_{c}") };
                    let _ = writeln!(coef, "{},{name},{cname},{}", r.origin, num(r.theta_mean[i * block + c]));
                }
            }
            if let Some(v) = r.bps_logpdf {
                let _ = writeln!(lp, "{},{},{}", r.origin, r.target, num(v));
            }
            let mut xc = format!("state,{}\n", labels.join(","));
            for (a, label) in labels.iter().enumerate() {
                let row: Vec<String> = (0..labels.len()).map(|b| num(r.state_correlation[(a, b)])).collect();
                let _ = writeln!(xc, "{label},{}", row.join(","));
            }
            write_file(dir, &format!("xcorr_k{k}/xcorr_{}.csv", r.origin), xc, files)?;
        }
        write_file(dir, &format!("forecasts_k{k}.csv"), fc, files)?;
        write_file(dir, &format!("coefficients_k{k}.csv"), coef, files)?;
        write_file(dir, &format!("bps_logpdf_k{k}.csv"), lp, files)?;
        for point in &run.kl {
            match &point.value {
                Ok(v) if v.is_finite() => {
                    let _ = writeln!(kl, "{k},{},{}", point.date, num(*v));
                }
                Ok(_) => run.gaps.push(Gap {
                    date: point.date,
                    horizon: k,
                    stage: "kl".into(),
                    code: 4,
                    reason: "non-finite divergence".into(),
                }),
                Err(e) => run.gaps.push(Gap { date: point.date, horizon: k, stage: "kl".into(), code: 4, reason: e.clone() }),
            }
        }
    }
    write_file(dir, "kl.csv", kl, files)
}

pub fn write_evaluation_outputs(dir: &Path, panel: &TimeSeriesPanel, evals: &[HorizonEvaluation], files: &mut Vec<PathBuf>) -> Result<()> {
    let mut msfe = String::from("horizon,model,series,msfe\n");
    let mut cum = String::from("horizon,model,series,target_date,msfe\n");
    let mut lpdr_out = String::from("horizon,model,target_date,lpdr\n");
    let mut bma = String::from("horizon,origin_date,agent,weight\n");
    for ev in evals {
        let k = ev.horizon;
        for (m, model) in ev.models.iter().enumerate() {
            let path = ev.cumulative_msfe(m)?;
            let last = path.last().expect("nonempty evaluation");
            for (i, s) in panel.names.iter().enumerate() {
                let _ = writeln!(msfe, "{k},{model},{s},{}", num(last[i]));
                for (t, v) in path.iter().enumerate() {
                    let _ = writeln!(cum, "{k},{model},{s},{},{}", ev.targets[t], num(v[i]));
                }
            }
            for (t, v) in ev.lpdr(m)?.iter().enumerate() {
                let _ = writeln!(lpdr_out, "{k},{model},{},{}", ev.targets[t], num(*v));
            }
        }
        for (t, w) in ev.bma_weights.iter().enumerate() {
            for (j, v) in w.iter().enumerate() {
                let _ = writeln!(bma, "{k},{},{},{}", ev.origins[t], ev.models[j + 1], num(*v));
            }
        }
    }
    for (name, body) in [("msfe.csv", msfe), ("msfe_cumulative.csv", cum), ("lpdr.csv", lpdr_out), ("bma_weights.csv", bma)] {
        if body.contains("NaN") || body.contains("inf") {
            return Err(BpsError::SingularPredictive(format!("non-finite value in {name}")));
        }
        write_file(dir, name, body, files)?;
    }
    Ok(())
}

pub fn write_gaps(dir: &Path, gaps: &[Gap], files: &mut Vec<PathBuf>) -> Result<()> {
    let mut out = String::from("horizon,date,stage,code,reason\n");
    for g in gaps {
        let _ = writeln!(out, "{},{},{},{},{}", g.horizon, g.date, g.stage, g.code, clean(&g.reason));
    }
    write_file(dir, "gaps.csv", out, files)
}

/// Parse `forecasts_k<k>.csv` and `bps_logpdf_k<k>.csv` back into scores.
pub fn read_bps_scores(dir: &Path, k: usize, series: &[String]) -> Result<Vec<BpsScore>> {
    let read = |name: String| -> Result<String> {
        fs::read_to_string(dir.join(&name)).map_err(|e| BpsError::Data(format!("cannot read {name}: {e}")))
    };
    let bad = |what: &str| BpsError::Data(format!("malformed {what} for horizon {k}"));
    let mut scores: BTreeMap<YearMonth, BpsScore> = BTreeMap::new();
    for line in read(format!("forecasts_k{k}.csv"))?.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad("forecast file"));
        }
        let origin: YearMonth = f[0].parse()?;
        let target: YearMonth = f[1].parse()?;
        let r = series.iter().position(|s| s == f[2]).ok_or_else(|| bad("series name"))?;
        let mean: f64 = f[3].parse().map_err(|_| bad("mean"))?;
        let e = scores.entry(origin).or_insert_with(|| BpsScore {
            origin,
            target,
            mean: DVector::zeros(series.len()),
            logpdf: None,
        });
        e.mean[r] = mean;
    }
    for line in read(format!("bps_logpdf_k{k}.csv"))?.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad("log density file"));
        }
        let origin: YearMonth = f[0].parse()?;
        let v: f64 = f[2].parse().map_err(|_| bad("log density"))?;
        scores.get_mut(&origin).ok_or_else(|| bad("log density origin"))?.logpdf = Some(v);
    }
    Ok(scores.into_values().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub gaps: usize,
}

fn prepare(config: &Path, overrides: &RunOverrides) -> StageResult<RunConfig> {
    let mut cfg = stage("config", RunConfig::from_file(config))?;
    overrides.apply(&mut cfg);
    stage("config", cfg.validate())?;
    cfg.threads = stage("config", RunConfig::threads_from_env())?;
    Ok(cfg)
}

fn fail_if_nothing_ran(runs: &[HorizonRun]) -> StageResult<()> {
    for run in runs {
        if run.results.is_empty() {
            let first = run.gaps.iter().find(|g| g.stage != "align");
            return Err(PipelineError {
                stage: first.map_or("synthesize".into(), |g| g.stage.clone()),
                origin: first.map(|g| g.date),
                code: first.map_or(3, |g| g.code),
                message: format!(
                    "no origin succeeded at horizon {}{}",
                    run.horizon,
                    first.map(|g| format!(": {}", g.reason)).unwrap_or_default()
                ),
            });
        }
    }
    Ok(())
}

/// `fit-agents`: write the forecast archive to `<out>/archive`.
pub fn cmd_fit_agents(config: &Path, overrides: &RunOverrides) -> StageResult<RunReport> {
    let cfg = prepare(config, overrides)?;
    with_thread_cap(cfg.threads, || {
        let panel = stage("load", load_config_panel(&cfg))?;
        let archive = stage("fit-agents", fit_agents(&cfg, &panel))?;
        let dir = cfg.output.dir.join(ARCHIVE_DIR);
        stage("archive", archive.write_dir(&dir))?;
        Ok(RunReport { out_dir: cfg.output.dir.clone(), files: vec![dir], gaps: 0 })
    })
}

/// `synthesize`: read the archive and write the synthesis outputs.
pub fn cmd_synthesize(config: &Path, overrides: &RunOverrides) -> StageResult<RunReport> {
    let cfg = prepare(config, overrides)?;
    with_thread_cap(cfg.threads, || {
        let panel = stage("load", load_config_panel(&cfg))?;
        let archive = stage("archive", ForecastArchive::read_dir(&cfg.output.dir.join(ARCHIVE_DIR)))?;
        let mut runs = stage("synthesize", synthesize(&cfg, &panel, &archive))?;
        let mut files = Vec::new();
        let dir = &cfg.output.dir;
        stage("report", write_synthesis_outputs(dir, &panel, archive.num_agents(), &mut runs, &mut files))?;
        let gaps: Vec<Gap> = runs.iter().flat_map(|r| r.gaps.clone()).collect();
        stage("report", write_gaps(dir, &gaps, &mut files))?;
        fail_if_nothing_ran(&runs)?;
        Ok(RunReport { out_dir: dir.clone(), files, gaps: gaps.len() })
    })
}

/// `evaluate`: score the synthesis outputs against the agents.
pub fn cmd_evaluate(config: &Path, overrides: &RunOverrides) -> StageResult<RunReport> {
    let cfg = prepare(config, overrides)?;
    let panel = stage("load", load_config_panel(&cfg))?;
    let dir = &cfg.output.dir;
    let archive = stage("archive", ForecastArchive::read_dir(&dir.join(ARCHIVE_DIR)))?;
    let mut evals = Vec::new();
    let mut gaps = Vec::new();
    for &k in &cfg.schedule.horizons {
        let scores = stage("evaluate", read_bps_scores(dir, k, &panel.names))?;
        let (ev, g) = stage("evaluate", evaluate(&panel, &archive, k, &scores))?;
        evals.push(ev);
        gaps.extend(g);
    }
    let mut files = Vec::new();
    stage("report", write_evaluation_outputs(dir, &panel, &evals, &mut files))?;
    Ok(RunReport { out_dir: dir.clone(), files, gaps: gaps.len() })
}

/// `run`: agents, synthesis, evaluation and every report in one pass.
pub fn cmd_run(config: &Path, overrides: &RunOverrides) -> StageResult<RunReport> {
    let cfg = prepare(config, overrides)?;
    with_thread_cap(cfg.threads, || run_with_config(&cfg))
}

pub fn run_with_config(cfg: &RunConfig) -> StageResult<RunReport> {
    let dir = &cfg.output.dir;
    stage("report", fs::create_dir_all(dir).map_err(BpsError::from))?;
    let panel = stage("load", load_config_panel(cfg))?;
    let archive = stage("fit-agents", fit_agents(cfg, &panel))?;
    let mut files = Vec::new();
    if cfg.output.write_archive {
        let adir = dir.join(ARCHIVE_DIR);
        stage("archive", archive.write_dir(&adir))?;
        files.push(adir);
    }
    let mut runs = stage("synthesize", synthesize(cfg, &panel, &archive))?;
    stage("report", write_synthesis_outputs(dir, &panel, archive.num_agents(), &mut runs, &mut files))?;
    let mut gaps: Vec<Gap> = runs.iter().flat_map(|r| r.gaps.clone()).collect();
    let outcome = fail_if_nothing_ran(&runs).and_then(|_| {
        let mut evals = Vec::new();
        for run in &runs {
            let (ev, g) = stage("evaluate", evaluate(&panel, &archive, run.horizon, &scores_from_run(run)))?;
            evals.push(ev);
            gaps.extend(g);
        }
        stage("report", write_evaluation_outputs(dir, &panel, &evals, &mut files))
    });
    stage("report", write_gaps(dir, &gaps, &mut files))?;
    outcome?;
    Ok(RunReport { out_dir: dir.clone(), files, gaps: gaps.len() })
}

/// `synth-data`: write the synthetic panel named by `data.path`.
pub fn cmd_synth_data(config: &Path, overrides: &RunOverrides) -> StageResult<PathBuf> {
    let cfg = prepare(config, overrides)?;
    let path = cfg
        .data_path
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join("panel.csv"));
    let panel = stage("synth-data", synth_generate(&cfg.synth.spec(), cfg.seed))?;
    if let Some(parent) = path.parent() {
        stage("synth-data", fs::create_dir_all(parent).map_err(BpsError::from))?;
    }
    stage("synth-data", panel.save(&path))?;
    Ok(path)
}
