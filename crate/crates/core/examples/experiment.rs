//! Runs the declarative pipeline end to end on a small drift configuration
//! and prints averaged curves. Artifacts go to a temporary directory.

use ideal::runner::{run, summarize_curves, ExperimentConfig, Stage};

const CONFIG: &str = "
# small drift experiment
data.users = 80
data.items = 120
data.history = 30
data.realtime = 15
data.calib_users = 200
train.epochs = 8
mrd.epochs = 5
mrd.max_samples = 5000
dm.latent_dim = 16
dm.epochs = 2
policy.list = always, never, random, ideal, ideal-mrd, lof
budget.list = 0, 0.2, 0.5, 1
report.group_size = 10
seeds = 0, 1
";

fn main() -> ideal::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = ExperimentConfig::parse(CONFIG)?;
    cfg.out = dir.path().to_path_buf();
    println!("config hash {}", cfg.hash());
    let summary = run(&cfg, Stage::Sweep)?;
    print!("{}", summarize_curves(&summary.curves));
    for run in &summary.manifest.runs {
        println!("seed {}: {} artifacts, stages {:?}", run.seed, run.artifacts.len(), run.stages);
    }
    Ok(())
}
