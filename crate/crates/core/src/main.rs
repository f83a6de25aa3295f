use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ideal::runner::{self, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "ideal", version, about = "Device-cloud recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone and parameter generator.
    Train(Overrides),
    /// Build the mis-recommendation dataset.
    BuildMrd(Overrides),
    /// Train the detector and distribution mappers.
    TrainDetector(Overrides),
    /// Sweep request budgets for every policy.
    Sweep(Overrides),
    /// Print averaged curves, running the sweep when needed.
    Report(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// Experiment configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated request budgets in [0, 1].
    #[arg(long)]
    budget: Option<String>,
    /// Comma-separated policy names.
    #[arg(long)]
    policy: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(|e| format!("config: {e}"))?,
            None => ExperimentConfig::default(),
        };
        let mut apply = |k: &str, v: &str| cfg.set(k, v).map_err(|e| format!("config: {e}"));
        if let Some(b) = &self.budget {
            apply("budget.list", b)?;
        }
        if let Some(p) = &self.policy {
            apply("policy.list", p)?;
        }
        if let Some(s) = &self.seed {
            apply("seeds", s)?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("config: expected KEY=VALUE, got `{kv}`"))?;
            apply(k.trim(), v)?;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        let problems = cfg.validate();
        if !problems.is_empty() {
            return Err(format!("invalid configuration:\n  {}", problems.join("\n  ")));
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (overrides, stage) = match &cli.command {
        Command::Train(o) => (o, Stage::Train),
        Command::BuildMrd(o) => (o, Stage::BuildMrd),
        Command::TrainDetector(o) => (o, Stage::TrainDetector),
        Command::Sweep(o) => (o, Stage::Sweep),
        Command::Report(o) => (o, Stage::Report),
    };
    let cfg = match overrides.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = if stage == Stage::Report {
        runner::report(&cfg).map(|rows| print!("{}", runner::summarize_curves(&rows)))
    } else {
        runner::run(&cfg, stage).map(|s| {
            println!("stage `{}` complete; artifacts in {}", stage.name(), s.out.display());
            if !s.curves.is_empty() {
                print!("{}", runner::summarize_curves(&s.curves));
            }
        })
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
