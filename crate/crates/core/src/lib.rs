//! Device-cloud collaborative recommendation with learned parameter-request
//! policies.
//!
//! A cloud-side hypernetwork turns a user's real-time click sequence into the
//! weights of a small on-device classifier. Requesting fresh weights costs a
//! round trip, so the device runs a mis-recommendation detector, optionally
//! fed with the uncertainty of a latent distribution mapper, and only asks
//! for new parameters when the current ones are likely to fail. The
//! [`sim`] module replays click streams against this loop and measures
//! accuracy as a function of the communication budget.
//!
//! Module map:
//!
//! - [`kernel`]: tensors, reverse-mode gradients, seeded RNG, checkpoints.
//! - [`seqrec`]: sequence encoders and the dynamic classifier.
//! - [`hypernet`]: parameter generator and joint training.
//! - [`mrd`]: self-labeled detector dataset, detector training, scoring.
//! - [`mapper`]: prior/posterior latent Gaussians and multi-sample uncertainty.
//! - [`policy`]: request policies, LOF and hypersphere baselines, threshold
//!   calibration.
//! - [`sim`]: replay, counterfactual logging, revenue, budget sweeps.
//! - [`data`]: interaction logs, sequences, negative sampling, drift streams.
//! - [`metrics`]: AUC, UAUC, NDCG@K, HitRate@K and CSV emitters.
//! - [`runner`]: declarative experiment configuration and the staged pipeline.

pub mod data;
pub mod error;
pub mod hypernet;
pub mod kernel;
pub mod mapper;
pub mod metrics;
pub mod mrd;
pub mod policy;
pub mod runner;
pub mod seqrec;
pub mod sim;

pub use error::{Error, Result};
