use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use homcorr::experiments::{run, Experiment, RunConfig};

#[derive(Parser)]
#[command(name = "homcorr", version, about = "Corrector correlation experiments on periodic random conductance lattices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the acceptance criteria suite.
    Verify(Common),
    /// Estimate the homogenized matrix and corrector moments.
    EstimateAh(Common),
    /// Estimate Q for xi and 2 xi.
    EstimateQ(Common),
    /// Empirical corrector correlations compared with K.
    CorrelationMap(Common),
    /// Tabulate K by both evaluation routes.
    KernelK(Common),
    /// Residual and representation identities for the two-scale defect.
    TwoScaleBattery(Common),
    /// Discrete convolution bounds.
    ConvBounds(Common),
    /// Annealed decay of Green function gradients.
    GreenDecay(Common),
    /// Distance of Q from a Gaussian free field structure across contrasts.
    GffDefect(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn split(self) -> (Experiment, Common) {
        match self {
            Command::Verify(c) => (Experiment::Verify, c),
            Command::EstimateAh(c) => (Experiment::EstimateAh, c),
            Command::EstimateQ(c) => (Experiment::EstimateQ, c),
            Command::CorrelationMap(c) => (Experiment::CorrelationMap, c),
            Command::KernelK(c) => (Experiment::KernelK, c),
            Command::TwoScaleBattery(c) => (Experiment::TwoScaleBattery, c),
            Command::ConvBounds(c) => (Experiment::ConvBounds, c),
            Command::GreenDecay(c) => (Experiment::GreenDecay, c),
            Command::GffDefect(c) => (Experiment::GffDefect, c),
        }
    }
}

fn load(experiment: Experiment, common: Common) -> homcorr::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    config.experiment = Some(experiment);
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(samples) = common.samples {
        config.samples = samples;
    }
    if common.out.is_some() {
        config.output = common.out;
    }
    if common.threads.is_some() {
        config.threads = common.threads;
    }
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    let (experiment, common) = Cli::parse().command.split();
    let config = match load(experiment, common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("invalid configuration: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(threads) = config.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&config) {
        Ok(outcome) => {
            for c in &outcome.summary.criteria {
                let tag = if c.hard { "" } else { " (soft)" };
                println!("{:?}{tag} {}: {}", c.status, c.name, c.detail);
            }
            println!("outputs in {}", outcome.out_dir.display());
            if outcome.summary.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("failing tables: {}", outcome.summary.failing_tables.join(", "));
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("{} failed: {e}", experiment.name());
            ExitCode::FAILURE
        }
    }
}
