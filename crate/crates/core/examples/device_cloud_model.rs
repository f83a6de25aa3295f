//! Trains the backbone and parameter generator jointly on a drift stream,
//! then shows how generated classifier weights change with the sequence.

use ideal::data::{synth_drift_stream, DriftConfig};
use ideal::hypernet::{evaluate, train_joint, ModelBundle, TrainConfig};
use ideal::kernel::OptimizerKind;
use ideal::seqrec::{BackboneConfig, EncoderKind};

fn main() -> ideal::Result<()> {
    let stream = synth_drift_stream(&DriftConfig {
        users: 60,
        items: 80,
        domains: 4,
        switch_prob: 0.05,
        length: 30,
        seed: 1,
    })?;
    let train: Vec<_> = stream.sessions(1..25, 4, 15, 0).iter().flat_map(|s| s.interactions()).collect();
    let test: Vec<_> = stream.sessions(25..30, 4, 15, 1).iter().flat_map(|s| s.interactions()).collect();

    let config = BackboneConfig {
        encoder: EncoderKind::Recurrent,
        max_len: 15,
        ..BackboneConfig::new(80)
    };
    let bundle = ModelBundle::new(config, 0)?;
    let (before_loss, _) = evaluate(&bundle, &test)?;
    let train_cfg = TrainConfig {
        epochs: 4,
        learning_rate: 0.003,
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let (bundle, report) = train_joint(bundle, &train, &train_cfg)?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {i}: train loss {l:.4}");
    }
    let (loss, accuracy) = evaluate(&bundle, &test)?;
    println!("held-out loss {before_loss:.4} -> {loss:.4}, accuracy {accuracy:.3}");

    let it = &test[0];
    let fresh = bundle.generate_params(&it.sequence)?;
    let stale = bundle.generate_params(&train[0].sequence)?;
    println!(
        "click probability with fresh parameters {:.4}, with stale parameters {:.4}",
        bundle.predict(it, &fresh)?,
        bundle.predict(it, &stale)?
    );
    Ok(())
}
