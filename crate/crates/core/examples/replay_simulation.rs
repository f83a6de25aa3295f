//! Device-cloud replay: trains the full stack at small scale, then compares
//! request policies on a held-out stream at several budgets.

use ideal::data::{synth_drift_stream, DriftConfig};
use ideal::hypernet::{train_joint, ModelBundle, TrainConfig};
use ideal::kernel::OptimizerKind;
use ideal::mrd::{build_mrd_dataset, train_mrd, MrdDatasetConfig, MrdTrainConfig};
use ideal::seqrec::{BackboneConfig, EncoderKind};
use ideal::sim::{frequency_sweep, revenue, ReplayWorld, SweepKind, Uncertainty, WorldOptions};

fn main() -> ideal::Result<()> {
    let drift = |users, seed| DriftConfig {
        users,
        items: 120,
        domains: 4,
        switch_prob: 0.05,
        length: 50,
        seed,
    };
    let stream = synth_drift_stream(&drift(100, 5))?;
    let calib_stream = synth_drift_stream(&drift(400, 6))?;
    let history = stream.sessions(1..30, 4, 10, 0);
    let realtime = stream.sessions(29..50, 19, 10, 1);
    let calibration = calib_stream.sessions(29..50, 19, 10, 2);

    let config = BackboneConfig {
        encoder: EncoderKind::MeanPoolAttention,
        max_len: 10,
        ..BackboneConfig::new(120)
    };
    let train_cfg = TrainConfig {
        epochs: 8,
        learning_rate: 0.003,
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let interactions: Vec<_> = history.iter().flat_map(|s| s.interactions()).collect();
    let (bundle, _) = train_joint(ModelBundle::new(config, 0)?, &interactions, &train_cfg)?;
    let samples = build_mrd_dataset(&history, &bundle, &MrdDatasetConfig::default())?;
    let (detector, _) = train_mrd(&bundle, &samples, false, &MrdTrainConfig { epochs: 10, ..MrdTrainConfig::default() })?;

    let options = WorldOptions::default();
    let mut eval = ReplayWorld::new(&bundle, &realtime, &options)?;
    let mut calib = ReplayWorld::new(&bundle, &calibration, &options)?;
    let source = eval.add_mrs_source(&detector, Uncertainty::None)?;
    calib.add_mrs_source(&detector, Uncertainty::None)?;
    println!("{} devices, {} decisions", eval.num_devices(), eval.num_decisions());

    let policies = [
        ("random".to_string(), SweepKind::Random),
        ("ideal".to_string(), SweepKind::Mrs(source)),
        ("lof".to_string(), SweepKind::Lof),
    ];
    let rows = frequency_sweep(&eval, &calib, &policies, &[0.1, 0.3, 0.5, 1.0], "mean-pool-attention", options.lof_k, 0)?;
    println!("policy  budget  realized  auc     ndcg@10");
    for r in &rows {
        println!("{:<7} {:>6.1}  {:>8.3}  {:.4}  {:.4}", r.policy, r.budget, r.realized_freq, r.auc, r.ndcg10);
    }

    let policy = ideal::sim::calibrated_policy(SweepKind::Mrs(source), 0.3, &calib, options.lof_k, 0)?;
    let (_, records) = eval.replay(&policy, Some(source), 0)?;
    let rev = revenue(&records, 10)?;
    for row in &rev.rows {
        println!("group {}: mean MRS {:.3}, revenue {:+.4}", row.group, row.mean_mrs, row.revenue);
    }
    Ok(())
}
