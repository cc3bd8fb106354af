//! `bps`: fit agents, synthesize their forecasts and evaluate the result.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
//! On failure a `key=value` `error.log` is written to the output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use bps::config::RunConfig;
use bps::pipeline::{
    cmd_evaluate, cmd_fit_agents, cmd_run, cmd_synth_data, cmd_synthesize, PipelineError, RunOverrides, RunReport,
};
use clap::{Args, Parser, Subcommand};
use log::{error, info};

#[derive(Parser)]
#[command(name = "bps", version, about = "Dynamic multivariate Bayesian predictive synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter the agent models and archive their forecast densities.
    FitAgents(Common),
    /// Run the synthesis over the archived agent forecasts.
    Synthesize(Common),
    /// Score synthesized forecasts against the agents and model averaging.
    Evaluate(Common),
    /// Agents, synthesis and evaluation in one pass.
    Run(Common),
    /// Write a synthetic panel to `data.path`.
    SynthData(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict the run to a single forecast horizon.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> RunOverrides {
        RunOverrides { seed: self.seed, horizon: self.horizon, out_dir: self.out_dir.clone() }
    }

    /// Where error.log goes: the override, else the configured directory.
    fn log_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| RunConfig::from_file(&self.config).ok().map(|c| c.output.dir))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

fn report(r: RunReport) {
    info!("wrote {} outputs to {} ({} gaps)", r.files.len(), r.out_dir.display(), r.gaps);
    println!("{}", r.out_dir.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, result): (&Common, Result<(), PipelineError>) = match &cli.command {
        Command::FitAgents(c) => (c, cmd_fit_agents(&c.config, &c.overrides()).map(report)),
        Command::Synthesize(c) => (c, cmd_synthesize(&c.config, &c.overrides()).map(report)),
        Command::Evaluate(c) => (c, cmd_evaluate(&c.config, &c.overrides()).map(report)),
        Command::Run(c) => (c, cmd_run(&c.config, &c.overrides()).map(report)),
        Command::SynthData(c) => (c, cmd_synth_data(&c.config, &c.overrides()).map(|p| println!("{}", p.display()))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            match e.write_log(&common.log_dir()) {
                Ok(path) => eprintln!("error log: {}", path.display()),
                Err(io) => eprintln!("could not write error log: {io}"),
            }
            ExitCode::from(e.code.clamp(1, 255) as u8)
        }
    }
}
