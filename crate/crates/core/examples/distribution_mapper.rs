//! Trains the latent distribution mapper and compares next-item and
//! mis-recommendation uncertainty on a few sequences.

use ideal::data::{synth_drift_stream, DriftConfig};
use ideal::hypernet::{train_joint, ModelBundle, TrainConfig};
use ideal::kernel::{OptimizerKind, Rng};
use ideal::mapper::{dm_examples, GaussianLatent, kl_diag_gaussian, sequence_uncertainty, train_dm, DmConfig, DmTrainConfig, UncertaintyKind};
use ideal::mrd::{build_mrd_dataset, train_mrd, MrdDatasetConfig, MrdTrainConfig};
use ideal::seqrec::{BackboneConfig, EncoderKind};

fn main() -> ideal::Result<()> {
    let q = GaussianLatent::new(vec![0.0], vec![1.0])?;
    let p = GaussianLatent::new(vec![1.0], vec![2.0])?;
    println!("KL(N(0,1) || N(1,4)) = {:.4}", kl_diag_gaussian(&q, &p)?);

    let stream = synth_drift_stream(&DriftConfig {
        users: 50,
        items: 80,
        domains: 4,
        switch_prob: 0.1,
        length: 25,
        seed: 4,
    })?;
    let sessions = stream.sessions(1..25, 4, 15, 0);
    let history: Vec<_> = sessions.iter().flat_map(|s| s.interactions()).collect();
    let config = BackboneConfig {
        encoder: EncoderKind::Recurrent,
        max_len: 15,
        ..BackboneConfig::new(80)
    };
    let train_cfg = TrainConfig {
        epochs: 3,
        learning_rate: 0.003,
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let (bundle, _) = train_joint(ModelBundle::new(config, 0)?, &history, &train_cfg)?;

    let examples = dm_examples(&bundle, &sessions)?;
    let dm_cfg = DmConfig {
        latent_dim: 16,
        ..DmConfig::default()
    };
    let (dm, report) = train_dm(&examples, bundle.config().dim, &dm_cfg, &DmTrainConfig { epochs: 3, ..DmTrainConfig::default() })?;
    for (i, (rec, dist)) in report.epoch_rec.iter().zip(&report.epoch_dist).enumerate() {
        println!("epoch {i}: reconstruction {rec:.4}, KL {dist:.4}");
    }

    let samples = build_mrd_dataset(&sessions, &bundle, &MrdDatasetConfig::default())?;
    let (detector, _) = train_mrd(&bundle, &samples, false, &MrdTrainConfig { epochs: 5, ..MrdTrainConfig::default() })?;
    let mu_cfg = DmConfig {
        uncertainty: UncertaintyKind::MisRecommendation,
        ..dm_cfg.clone()
    };
    let mut rng = Rng::new(0);
    for step in sessions[0].steps.iter().step_by(6) {
        let nu = sequence_uncertainty(&bundle, &dm, &step.sequence, None, &dm_cfg, &mut rng)?;
        let mu = sequence_uncertainty(&bundle, &dm, &step.sequence, Some(&detector), &mu_cfg, &mut rng)?;
        println!("t={:>2}: NU {nu:.5}  MU {mu:.5}", step.t);
    }
    Ok(())
}
