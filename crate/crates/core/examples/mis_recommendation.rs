//! Builds the self-labeled detector dataset from a trained model, trains
//! the mis-recommendation detector, and scores fresh and stale pairs.

use ideal::data::{synth_drift_stream, DriftConfig};
use ideal::hypernet::{train_joint, ModelBundle, TrainConfig};
use ideal::kernel::OptimizerKind;
use ideal::mrd::{build_mrd_dataset, mrs, train_mrd, MrdDatasetConfig, MrdTrainConfig};
use ideal::seqrec::{BackboneConfig, EncoderKind};

fn main() -> ideal::Result<()> {
    let stream = synth_drift_stream(&DriftConfig {
        users: 60,
        items: 80,
        domains: 4,
        switch_prob: 0.1,
        length: 30,
        seed: 2,
    })?;
    let sessions = stream.sessions(1..30, 4, 15, 0);
    let history: Vec<_> = sessions.iter().flat_map(|s| s.interactions()).collect();
    let config = BackboneConfig {
        encoder: EncoderKind::Recurrent,
        max_len: 15,
        ..BackboneConfig::new(80)
    };
    let train_cfg = TrainConfig {
        epochs: 4,
        learning_rate: 0.003,
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let (bundle, _) = train_joint(ModelBundle::new(config, 0)?, &history, &train_cfg)?;

    let samples = build_mrd_dataset(&sessions, &bundle, &MrdDatasetConfig::default())?;
    let positives = samples.iter().filter(|s| s.label == 1).count();
    println!("{} detector samples, {positives} labeled as mis-recommendations", samples.len());

    let (detector, report) = train_mrd(&bundle, &samples, false, &MrdTrainConfig { epochs: 10, ..MrdTrainConfig::default() })?;
    println!("detector training accuracy {:.3}", report.train_accuracy);

    // Same sequence versus a sequence from a user whose domain switched.
    let switch = &stream.switches[0];
    let user = &stream.users[switch.user];
    let seq = |end: usize| ideal::seqrec::ClickSequence::new(user.items[end.saturating_sub(15)..end].to_vec(), 15);
    let before = seq(switch.step)?;
    let after = seq((switch.step + 8).min(user.items.len()))?;
    println!("MRS without drift {:.3}", mrs(&bundle, &before, &before, None, &detector)?);
    println!("MRS across a domain switch {:.3}", mrs(&bundle, &after, &before, None, &detector)?);
    Ok(())
}
