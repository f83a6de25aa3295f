//! Data pipeline: a synthetic multi-domain drift stream written as an
//! interaction log, reloaded, k-core filtered, and split leave-one-out.

use ideal::data::{k_core_filter, leave_one_out, load_interactions, synth_drift_stream, DriftConfig};

fn main() -> ideal::Result<()> {
    let cfg = DriftConfig {
        users: 50,
        items: 120,
        domains: 3,
        switch_prob: 0.1,
        length: 30,
        seed: 11,
    };
    let stream = synth_drift_stream(&cfg)?;
    println!("{} users, {} domain switches", stream.users.len(), stream.switches.len());
    if let Some(s) = stream.switches.first() {
        println!("first switch: user {} at step {} ({} -> {})", s.user, s.step, s.from, s.to);
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("drift.tsv");
    let markers = stream.write_tsv(&path)?;
    println!("wrote {} and {}", path.display(), markers.display());

    let events = k_core_filter(&load_interactions(&path)?, 5);
    println!("{} interactions after 5-core filtering", events.len());

    let split = leave_one_out(&events, 20, 4, 9, 5)?;
    println!(
        "leave-one-out: {} training and {} test interactions over {} items",
        split.train.len(),
        split.test.len(),
        split.num_items
    );
    let sessions = stream.sessions(1..10, 4, 20, 0);
    let step = &sessions[0].steps[0];
    println!("step {}: sequence {:?}, candidates {:?}, labels {:?}", step.t, step.sequence.items(), step.candidates, step.labels);
    Ok(())
}
