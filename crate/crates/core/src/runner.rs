//! Declarative experiments: a flat `key = value` configuration drives the
//! staged pipeline (train, build-mrd, train-detector, sweep, report) and
//! every artifact lands in one output directory with a manifest.
//!
//! Layout of the output directory:
//!
//! ```text
//! <out>/manifest.json          config hash, seeds, checksums, stage status
//! <out>/config.txt             canonical configuration
//! <out>/curves.csv             curve rows of every seed
//! <out>/seed-<s>/bundle.ckpt   backbone and generator
//! <out>/seed-<s>/mrd.tsv       detector dataset (no uncertainty)
//! <out>/seed-<s>/mrd-<strategy>.tsv, detector-<strategy>.ckpt, dm-<loss>.ckpt
//! <out>/seed-<s>/detector-base.ckpt
//! <out>/seed-<s>/curves.csv, revenue.csv, steps.tsv
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, DriftConfig, Session};
use crate::error::{Error, Result};
use crate::hypernet::{train_joint, ModelBundle, TrainConfig};
use crate::kernel::{OptimizerKind, Rng};
use crate::mapper::{dm_examples, sequence_uncertainty, train_dm, DistributionMapper, DmConfig, DmTrainConfig, RecLoss, UncertaintyKind};
use crate::metrics::{emit_curves, emit_revenue, parse_curves, CurveRow, RevenueRow};
use crate::mrd::{build_mrd_dataset, read_mrd_tsv, train_mrd, write_mrd_tsv, LagPolicy, MrdDatasetConfig, MrdDetector, MrdSample, MrdTrainConfig};
use crate::policy::{Policy, PolicySpec};
use crate::seqrec::{BackboneConfig, ClickSequence, EncoderKind};
use crate::sim::{calibrated_policy, frequency_sweep, revenue, step_log_tsv, ReplayWorld, SweepKind, Uncertainty, WorldOptions};

/// Where interactions come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    /// Synthetic multi-domain drift streams.
    Drift,
    /// A `user<TAB>item<TAB>timestamp` log.
    File(PathBuf),
}

/// A strategy label: `mrd` (no uncertainty) or `<loss>-<kind>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub loss: Option<RecLossKey>,
    pub kind: Option<UncertaintyKey>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RecLossKey {
    Cl,
    Rl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UncertaintyKey {
    Nu,
    Mu,
}

impl Strategy {
    pub const BASE: Strategy = Strategy { loss: None, kind: None };

    pub fn parse(label: &str) -> std::result::Result<Self, String> {
        let l = label.trim().to_ascii_lowercase().replace('+', "-");
        if l == "mrd" {
            return Ok(Self::BASE);
        }
        let (a, b) = l.split_once('-').ok_or_else(|| format!("unknown strategy `{label}`"))?;
        let loss = match a {
            "cl" => RecLossKey::Cl,
            "rl" => RecLossKey::Rl,
            _ => return Err(format!("unknown strategy `{label}` (loss must be cl or rl)")),
        };
        let kind = match b {
            "nu" => UncertaintyKey::Nu,
            "mu" => UncertaintyKey::Mu,
            _ => return Err(format!("unknown strategy `{label}` (uncertainty must be nu or mu)")),
        };
        Ok(Strategy {
            loss: Some(loss),
            kind: Some(kind),
        })
    }

    pub fn label(&self) -> String {
        match (self.loss, self.kind) {
            (Some(l), Some(k)) => format!(
                "{}-{}",
                if l == RecLossKey::Cl { "cl" } else { "rl" },
                if k == UncertaintyKey::Nu { "nu" } else { "mu" }
            ),
            _ => "mrd".to_string(),
        }
    }

    pub fn rec_loss(&self) -> Option<RecLoss> {
        self.loss.map(|l| match l {
            RecLossKey::Cl => RecLoss::Classification,
            RecLossKey::Rl => RecLoss::Regression,
        })
    }

    pub fn uncertainty(&self) -> Option<UncertaintyKind> {
        self.kind.map(|k| match k {
            UncertaintyKey::Nu => UncertaintyKind::NextItem,
            UncertaintyKey::Mu => UncertaintyKind::MisRecommendation,
        })
    }
}

/// Every setting of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub users: usize,
    pub items: usize,
    pub domains: usize,
    pub switch_prob: f64,
    /// Clicks per user used for training (drift source).
    pub history: usize,
    /// Decision steps per device in the replay.
    pub realtime: usize,
    pub calib_users: usize,
    pub train_negatives: usize,
    pub eval_negatives: usize,
    pub max_len: usize,
    /// Minimum interactions per user and item for file sources; 0 disables.
    pub k_core: usize,

    pub encoder: EncoderKind,
    pub dim: usize,
    pub train: TrainConfig,

    pub lag_policy: LagPolicy,
    pub mrd_balance: Option<f64>,
    pub mrd_max_samples: Option<usize>,
    pub mrd_train: MrdTrainConfig,

    pub dm: DmConfig,
    pub dm_train: DmTrainConfig,
    /// Strategy used by the plain `ideal` policy.
    pub strategy: String,

    pub policies: Vec<String>,
    pub budgets: Vec<f64>,
    pub lof_k: usize,
    pub window: usize,
    pub svdd_quantile: f64,

    pub group_size: usize,
    pub revenue_budget: f64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: DataSource::Drift,
            users: 200,
            items: 400,
            domains: 4,
            switch_prob: 0.05,
            history: 45,
            realtime: 25,
            calib_users: 1000,
            train_negatives: 4,
            eval_negatives: 19,
            max_len: 10,
            k_core: 0,
            encoder: EncoderKind::MeanPoolAttention,
            dim: 32,
            train: TrainConfig {
                epochs: 8,
                batch_size: 256,
                learning_rate: 0.003,
                optimizer: OptimizerKind::Adam,
                seed: 0,
            },
            lag_policy: LagPolicy::default(),
            mrd_balance: Some(3.0),
            mrd_max_samples: Some(30_000),
            mrd_train: MrdTrainConfig::default(),
            dm: DmConfig::default(),
            dm_train: DmTrainConfig::default(),
            strategy: "cl-nu".to_string(),
            policies: ["always", "never", "random", "ideal", "lof", "svdd"].map(String::from).to_vec(),
            budgets: (0..=10).map(|i| i as f64 / 10.0).collect(),
            lof_k: 3,
            window: 10,
            svdd_quantile: 0.9,
            group_size: 20,
            revenue_budget: 0.3,
            seeds: vec![0],
            out: PathBuf::from("out"),
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map(ToString::to_string).unwrap_or_else(|| "none".into())
}

impl ExperimentConfig {
    /// Canonical `key = value` listing; the configuration hash is taken
    /// over this text.
    pub fn to_text(&self) -> String {
        let source = match &self.source {
            DataSource::Drift => "drift".to_string(),
            DataSource::File(p) => format!("file:{}", p.display()),
        };
        let lags = match &self.lag_policy {
            LagPolicy::AllPairs => "all".to_string(),
            LagPolicy::Lags(l) => join(l),
        };
        let opt_name = |o: OptimizerKind| if o == OptimizerKind::Adam { "adam" } else { "sgd" };
        let entries: Vec<(&str, String)> = vec![
            ("data.source", source),
            ("data.users", self.users.to_string()),
            ("data.items", self.items.to_string()),
            ("data.domains", self.domains.to_string()),
            ("data.switch_prob", self.switch_prob.to_string()),
            ("data.history", self.history.to_string()),
            ("data.realtime", self.realtime.to_string()),
            ("data.calib_users", self.calib_users.to_string()),
            ("data.train_negatives", self.train_negatives.to_string()),
            ("data.eval_negatives", self.eval_negatives.to_string()),
            ("data.max_len", self.max_len.to_string()),
            ("data.k_core", self.k_core.to_string()),
            ("backbone.encoder", self.encoder.name().to_string()),
            ("backbone.dim", self.dim.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.learning_rate", self.train.learning_rate.to_string()),
            ("train.optimizer", opt_name(self.train.optimizer).to_string()),
            ("mrd.lags", lags),
            ("mrd.balance", opt(&self.mrd_balance)),
            ("mrd.max_samples", opt(&self.mrd_max_samples)),
            ("mrd.epochs", self.mrd_train.epochs.to_string()),
            ("mrd.batch_size", self.mrd_train.batch_size.to_string()),
            ("mrd.learning_rate", self.mrd_train.learning_rate.to_string()),
            ("mrd.optimizer", opt_name(self.mrd_train.optimizer).to_string()),
            ("mrd.hidden", self.mrd_train.hidden.to_string()),
            ("dm.latent_dim", self.dm.latent_dim.to_string()),
            ("dm.beta", self.dm.beta.to_string()),
            ("dm.n", self.dm.samples.to_string()),
            ("dm.strategy", self.strategy.clone()),
            ("dm.epochs", self.dm_train.epochs.to_string()),
            ("dm.batch_size", self.dm_train.batch_size.to_string()),
            ("dm.learning_rate", self.dm_train.learning_rate.to_string()),
            ("dm.optimizer", opt_name(self.dm_train.optimizer).to_string()),
            ("policy.list", self.policies.join(",")),
            ("policy.lof_k", self.lof_k.to_string()),
            ("policy.window", self.window.to_string()),
            ("policy.svdd_quantile", self.svdd_quantile.to_string()),
            ("budget.list", join(&self.budgets)),
            ("report.group_size", self.group_size.to_string()),
            ("report.revenue_budget", self.revenue_budget.to_string()),
            ("seeds", join(&self.seeds)),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            writeln!(out, "{k} = {v}").expect("writing to a String cannot fail");
        }
        out
    }

    /// sha256 of [`ExperimentConfig::to_text`]. The output directory is not
    /// part of the hash.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Applies one setting. Unknown keys and unparsable values yield a
    /// message naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
            v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s.trim())).collect()
        }
        fn maybe<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<Option<T>, String> {
            if v == "none" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }
        let optimizer = |v: &str| v.parse::<OptimizerKind>().map_err(|e| format!("{key}: {e}"));
        match key {
            "data.source" => {
                self.source = match v {
                    "drift" => DataSource::Drift,
                    _ => match v.strip_prefix("file:") {
                        Some(p) => DataSource::File(PathBuf::from(p)),
                        None => return Err(format!("{key}: expected `drift` or `file:<path>`, got `{v}`")),
                    },
                }
            }
            "data.users" => self.users = num(key, v)?,
            "data.items" => self.items = num(key, v)?,
            "data.domains" => self.domains = num(key, v)?,
            "data.switch_prob" => self.switch_prob = num(key, v)?,
            "data.history" => self.history = num(key, v)?,
            "data.realtime" => self.realtime = num(key, v)?,
            "data.calib_users" => self.calib_users = num(key, v)?,
            "data.train_negatives" => self.train_negatives = num(key, v)?,
            "data.eval_negatives" => self.eval_negatives = num(key, v)?,
            "data.max_len" => self.max_len = num(key, v)?,
            "data.k_core" => self.k_core = num(key, v)?,
            "backbone.encoder" => self.encoder = v.parse().map_err(|e| format!("{key}: {e}"))?,
            "backbone.dim" => self.dim = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = num(key, v)?,
            "train.optimizer" => self.train.optimizer = optimizer(v)?,
            "mrd.lags" => {
                self.lag_policy = if v == "all" {
                    LagPolicy::AllPairs
                } else {
                    LagPolicy::Lags(list(key, v)?)
                }
            }
            "mrd.balance" => self.mrd_balance = maybe(key, v)?,
            "mrd.max_samples" => self.mrd_max_samples = maybe(key, v)?,
            "mrd.epochs" => self.mrd_train.epochs = num(key, v)?,
            "mrd.batch_size" => self.mrd_train.batch_size = num(key, v)?,
            "mrd.learning_rate" => self.mrd_train.learning_rate = num(key, v)?,
            "mrd.optimizer" => self.mrd_train.optimizer = optimizer(v)?,
            "mrd.hidden" => self.mrd_train.hidden = num(key, v)?,
            "dm.latent_dim" => self.dm.latent_dim = num(key, v)?,
            "dm.beta" => self.dm.beta = num(key, v)?,
            "dm.n" => self.dm.samples = num(key, v)?,
            "dm.strategy" => self.strategy = v.to_ascii_lowercase().replace('+', "-"),
            "dm.epochs" => self.dm_train.epochs = num(key, v)?,
            "dm.batch_size" => self.dm_train.batch_size = num(key, v)?,
            "dm.learning_rate" => self.dm_train.learning_rate = num(key, v)?,
            "dm.optimizer" => self.dm_train.optimizer = optimizer(v)?,
            "policy.list" => {
                self.policies = v
                    .split(',')
                    .map(|s| s.trim().to_ascii_lowercase())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "policy.lof_k" => self.lof_k = num(key, v)?,
            "policy.window" => self.window = num(key, v)?,
            "policy.svdd_quantile" => self.svdd_quantile = num(key, v)?,
            "budget.list" => self.budgets = list(key, v)?,
            "report.group_size" => self.group_size = num(key, v)?,
            "report.revenue_budget" => self.revenue_budget = num(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut problems = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v) {
                        problems.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => problems.push(format!("line {}: expected `key = value`", i + 1)),
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every cross-field problem; empty when the configuration is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut d = Vec::new();
        for b in &self.budgets {
            if !(0.0..=1.0).contains(b) {
                d.push(format!("budget.list: budget out of [0,1]: {b}"));
            }
        }
        if self.budgets.windows(2).any(|w| w[0] > w[1]) {
            d.push("budget.list: budgets must be sorted ascending".into());
        }
        if !(0.0..=1.0).contains(&self.revenue_budget) {
            d.push(format!("report.revenue_budget: budget out of [0,1]: {}", self.revenue_budget));
        }
        if self.seeds.is_empty() {
            d.push("seeds: at least one seed is required".into());
        }
        if self.policies.is_empty() {
            d.push("policy.list: at least one policy is required".into());
        }
        for p in &self.policies {
            if let Err(e) = p.parse::<PolicySpec>() {
                d.push(format!("policy.list: {e}"));
            }
        }
        match Strategy::parse(&self.strategy) {
            Ok(s) if s == Strategy::BASE => {}
            Ok(_) => {}
            Err(e) => d.push(format!("dm.strategy: {e}")),
        }
        d.extend(self.dm.diagnostics());
        if self.dm_train.epochs == 0 && self.strategies().iter().any(|s| s.loss.is_some()) {
            d.push("dm.epochs: the distribution mapper must be trained for uncertainty strategies".into());
        }
        if self.mrd_train.epochs == 0 {
            d.push("mrd.epochs: the detector stage must train at least one epoch".into());
        }
        if self.strategies().iter().any(|s| s.kind == Some(UncertaintyKey::Mu)) && self.mrd_train.epochs == 0 {
            d.push("dm.strategy: MU uncertainty requires a trained detector stage".into());
        }
        if self.group_size == 0 {
            d.push("report.group_size: must be at least 1".into());
        }
        if self.dim == 0 || self.max_len == 0 {
            d.push("backbone.dim and data.max_len must be at least 1".into());
        }
        if self.train.batch_size == 0 || self.mrd_train.batch_size == 0 || self.dm_train.batch_size == 0 {
            d.push("batch sizes must be at least 1".into());
        }
        if self.lof_k == 0 || self.window <= self.lof_k {
            d.push("policy.window must exceed policy.lof_k >= 1".into());
        }
        if !(self.svdd_quantile > 0.0 && self.svdd_quantile <= 1.0) {
            d.push("policy.svdd_quantile out of (0,1]".into());
        }
        if self.source == DataSource::Drift {
            let drift = self.drift_config(0, self.users);
            if let Err(Error::Config(p)) = drift.validate() {
                d.extend(p.into_iter().map(|m| format!("data: {m}")));
            }
            if self.history < 2 || self.realtime == 0 {
                d.push("data.history must be >= 2 and data.realtime >= 1".into());
            }
            if self.calib_users == 0 {
                d.push("data.calib_users must be at least 1".into());
            }
        }
        d
    }

    fn drift_config(&self, seed: u64, users: usize) -> DriftConfig {
        DriftConfig {
            users,
            items: self.items,
            domains: self.domains,
            switch_prob: self.switch_prob,
            length: self.history + self.realtime,
            seed,
        }
    }

    /// Score strategies needed by the policy list, in a fixed order.
    pub fn strategies(&self) -> Vec<Strategy> {
        let mut out = BTreeSet::new();
        for p in &self.policies {
            match p.parse::<PolicySpec>() {
                Ok(PolicySpec::Ideal(None)) => {
                    if let Ok(s) = Strategy::parse(&self.strategy) {
                        out.insert(s);
                    }
                }
                Ok(PolicySpec::Ideal(Some(label))) => {
                    if let Ok(s) = Strategy::parse(&label) {
                        out.insert(s);
                    }
                }
                _ => {}
            }
        }
        out.into_iter().collect()
    }

    fn backbone_config(&self, vocab: usize) -> BackboneConfig {
        BackboneConfig {
            vocab,
            dim: self.dim,
            encoder: self.encoder,
            max_len: self.max_len,
        }
    }
}

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Train,
    BuildMrd,
    TrainDetector,
    Sweep,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::BuildMrd => "build-mrd",
            Stage::TrainDetector => "train-detector",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

/// Per-seed record in the manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub seed: u64,
    /// Stage name -> "complete" or "incomplete".
    pub stages: BTreeMap<String, String>,
    /// Artifact file name -> sha256.
    pub artifacts: BTreeMap<String, String>,
    /// Component name -> parameter checksum.
    pub components: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedManifest>,
    /// Top-level artifacts -> sha256.
    pub artifacts: BTreeMap<String, String>,
    pub error: Option<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::InvalidArgument(format!("manifest {}: {e}", path.display())))
    }

    fn run(&self, seed: u64) -> Option<&SeedManifest> {
        self.runs.iter().find(|r| r.seed == seed)
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Streams of one seed.
pub struct Datasets {
    pub history: Vec<Session>,
    pub realtime: Vec<Session>,
    pub calibration: Vec<Session>,
    pub vocab: usize,
}

/// Builds the history, replay, and calibration streams for one seed.
pub fn datasets(cfg: &ExperimentConfig, seed: u64) -> Result<Datasets> {
    match &cfg.source {
        DataSource::Drift => {
            let root = Rng::new(seed);
            let stream = data::synth_drift_stream(&cfg.drift_config(root.derive(&[0xda]).seed(), cfg.users))?;
            let calib = data::synth_drift_stream(&cfg.drift_config(root.derive(&[0xca]).seed(), cfg.calib_users))?;
            let (h, l) = (cfg.history, cfg.realtime);
            Ok(Datasets {
                history: stream.sessions(1..h, cfg.train_negatives, cfg.max_len, 1),
                realtime: stream.sessions(h - 1..h + l, cfg.eval_negatives, cfg.max_len, 2),
                calibration: calib.sessions(h - 1..h + l, cfg.eval_negatives, cfg.max_len, 3),
                vocab: cfg.items,
            })
        }
        DataSource::File(path) => file_datasets(cfg, path, seed),
    }
}

/// Per user: the last `realtime + 1` sequence pairs form the replay stream,
/// the `realtime + 1` before them the calibration stream, and the rest the
/// training history.
fn file_datasets(cfg: &ExperimentConfig, path: &Path, seed: u64) -> Result<Datasets> {
    let mut events = data::load_interactions(path)?;
    if cfg.k_core > 0 {
        events = data::k_core_filter(&events, cfg.k_core);
    }
    if events.is_empty() {
        return Err(Error::Empty("interaction log"));
    }
    let vocab = events.iter().map(|e| e.item + 1).max().unwrap_or(0);
    let mut seen: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for e in &events {
        seen.entry(e.user).or_default().insert(e.item);
    }
    let rng = Rng::new(seed).derive(&[0xf1]);
    let (mut history, mut realtime, mut calibration) = (Vec::new(), Vec::new(), Vec::new());
    let block = cfg.realtime + 1;
    for (user, pairs) in data::build_sequences(&events, cfg.max_len) {
        let hist = &seen[&user];
        let mut r = rng.derive(&[user as u64]);
        let mut sample = |pairs: &[data::SequencePair], ratio: usize| -> Result<Vec<Session>> {
            let inter = data::negative_sample(user, pairs, hist, ratio, vocab, &mut r)?;
            Ok(data::sessions_from_interactions(&inter))
        };
        if pairs.len() > 2 * block {
            let n = pairs.len();
            realtime.extend(sample(&pairs[n - block..], cfg.eval_negatives)?);
            calibration.extend(sample(&pairs[n - 2 * block..n - block], cfg.eval_negatives)?);
            history.extend(sample(&pairs[..n - 2 * block], cfg.train_negatives)?);
        } else {
            history.extend(sample(&pairs, cfg.train_negatives)?);
        }
    }
    if realtime.is_empty() {
        return Err(Error::Empty("no user has enough interactions for the replay stream"));
    }
    Ok(Datasets {
        history,
        realtime,
        calibration,
        vocab,
    })
}

fn stage<T>(name: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.name(),
        source: Box::new(e),
    })
}

/// Trained components of one seed.
pub struct SeedModels {
    pub bundle: ModelBundle,
    pub samples: Vec<MrdSample>,
    pub base: MrdDetector,
    pub mappers: BTreeMap<RecLossKey, DistributionMapper>,
    pub detectors: BTreeMap<Strategy, MrdDetector>,
}

/// Outputs of one seed's sweep.
pub struct SeedResults {
    pub curves: Vec<CurveRow>,
    pub revenue: Vec<RevenueRow>,
}

/// Result of [`run`].
pub struct RunSummary {
    pub out: PathBuf,
    pub manifest: Manifest,
    pub curves: Vec<CurveRow>,
    pub revenue: BTreeMap<u64, Vec<RevenueRow>>,
}

struct SeedRun<'c> {
    cfg: &'c ExperimentConfig,
    seed: u64,
    dir: PathBuf,
    reuse: bool,
    manifest: SeedManifest,
}

type TrainedDetectors = (MrdDetector, BTreeMap<RecLossKey, DistributionMapper>, BTreeMap<Strategy, MrdDetector>);

impl SeedRun<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn can_reuse(&self, name: &str) -> bool {
        self.reuse && self.path(name).exists()
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let sum = sha256_file(&self.path(name))?;
        self.manifest.artifacts.insert(name.to_string(), sum);
        Ok(())
    }

    fn mark(&mut self, s: Stage, done: bool) {
        self.manifest
            .stages
            .insert(s.name().to_string(), if done { "complete" } else { "incomplete" }.to_string());
    }

    fn seed_for(&self, key: u64) -> u64 {
        Rng::new(self.seed).derive(&[key]).seed()
    }

    fn train(&mut self, data: &Datasets) -> Result<ModelBundle> {
        let bc = self.cfg.backbone_config(data.vocab);
        let name = "bundle.ckpt";
        let bundle = if self.can_reuse(name) {
            ModelBundle::load(bc, &self.path(name))?
        } else {
            let history: Vec<_> = data.history.iter().flat_map(|s| s.interactions()).collect();
            let init = ModelBundle::new(bc, self.seed_for(1))?;
            let tc = TrainConfig {
                seed: self.seed_for(2),
                ..self.cfg.train.clone()
            };
            let (bundle, _) = train_joint(init, &history, &tc)?;
            bundle.save(&self.path(name))?;
            bundle
        };
        self.record(name)?;
        self.manifest.components.insert("bundle".into(), bundle.checksum());
        Ok(bundle)
    }

    fn build_mrd(&mut self, data: &Datasets, bundle: &ModelBundle) -> Result<Vec<MrdSample>> {
        let name = "mrd.tsv";
        let samples = if self.can_reuse(name) {
            read_mrd_tsv(&self.path(name), self.cfg.max_len)?
        } else {
            let dc = MrdDatasetConfig {
                lag_policy: self.cfg.lag_policy.clone(),
                balance_ratio: self.cfg.mrd_balance,
                max_samples: self.cfg.mrd_max_samples,
                seed: self.seed_for(3),
            };
            let samples = build_mrd_dataset(&data.history, bundle, &dc)?;
            write_mrd_tsv(&self.path(name), &samples)?;
            samples
        };
        self.record(name)?;
        Ok(samples)
    }

    fn detector(&mut self, name: &str, fit: impl FnOnce() -> Result<MrdDetector>) -> Result<MrdDetector> {
        let det = if self.can_reuse(name) {
            MrdDetector::load(&self.path(name))?
        } else {
            let det = fit()?;
            det.save(&self.path(name))?;
            det
        };
        self.record(name)?;
        self.manifest
            .components
            .insert(name.trim_end_matches(".ckpt").to_string(), det.store.checksum());
        Ok(det)
    }

    fn train_detectors(&mut self, data: &Datasets, bundle: &ModelBundle, samples: &[MrdSample]) -> Result<TrainedDetectors> {
        let mc = MrdTrainConfig {
            seed: self.seed_for(4),
            ..self.cfg.mrd_train.clone()
        };
        let base = self.detector("detector-base.ckpt", || Ok(train_mrd(bundle, samples, false, &mc)?.0))?;

        let strategies = self.cfg.strategies();
        let mut mappers = BTreeMap::new();
        let losses: BTreeSet<RecLossKey> = strategies.iter().filter_map(|s| s.loss).collect();
        let mut examples = None;
        for loss in losses {
            let name = format!("dm-{}.ckpt", if loss == RecLossKey::Cl { "cl" } else { "rl" });
            let dm = if self.can_reuse(&name) {
                DistributionMapper::load(&self.path(&name))?
            } else {
                if examples.is_none() {
                    examples = Some(dm_examples(bundle, &data.history)?);
                }
                let dmc = DmConfig {
                    loss: Strategy { loss: Some(loss), kind: Some(UncertaintyKey::Nu) }.rec_loss().expect("loss set"),
                    ..self.cfg.dm.clone()
                };
                let tc = DmTrainConfig {
                    seed: self.seed_for(5),
                    ..self.cfg.dm_train.clone()
                };
                let (dm, _) = train_dm(examples.as_ref().expect("built above"), self.cfg.dim, &dmc, &tc)?;
                dm.save(&self.path(&name))?;
                dm
            };
            self.record(&name)?;
            self.manifest
                .components
                .insert(name.trim_end_matches(".ckpt").to_string(), dm.store.checksum());
            mappers.insert(loss, dm);
        }

        let mut detectors = BTreeMap::new();
        for s in strategies {
            let Some(loss) = s.loss else {
                detectors.insert(s, base.clone());
                continue;
            };
            let dm = &mappers[&loss];
            let dmc = self.dm_config(s);
            let label = s.label();
            let tsv = format!("mrd-{label}.tsv");
            let with_u: Vec<MrdSample> = if self.can_reuse(&tsv) {
                read_mrd_tsv(&self.path(&tsv), self.cfg.max_len)?
            } else {
                let mut cache: HashMap<ClickSequence, f64> = HashMap::new();
                let root = Rng::new(self.seed_for(6));
                let mut out = samples.to_vec();
                for smp in &mut out {
                    let u = match cache.get(&smp.current) {
                        Some(u) => *u,
                        None => {
                            let mut rng = root.derive(&[smp.user as u64, smp.t as u64]);
                            let u = sequence_uncertainty(bundle, dm, &smp.current, Some(&base), &dmc, &mut rng)?;
                            cache.insert(smp.current.clone(), u);
                            u
                        }
                    };
                    smp.uncertainty = Some(u);
                }
                write_mrd_tsv(&self.path(&tsv), &out)?;
                out
            };
            self.record(&tsv)?;
            let det = self.detector(&format!("detector-{label}.ckpt"), || Ok(train_mrd(bundle, &with_u, true, &mc)?.0))?;
            detectors.insert(s, det);
        }
        Ok((base, mappers, detectors))
    }

    fn dm_config(&self, s: Strategy) -> DmConfig {
        DmConfig {
            loss: s.rec_loss().unwrap_or(self.cfg.dm.loss),
            uncertainty: s.uncertainty().unwrap_or(self.cfg.dm.uncertainty),
            ..self.cfg.dm.clone()
        }
    }

    fn sweep(&mut self, data: &Datasets, models: &SeedModels) -> Result<SeedResults> {
        let options = WorldOptions {
            window: self.cfg.window,
            lof_k: self.cfg.lof_k,
            svdd_quantile: self.cfg.svdd_quantile,
        };
        let mut eval = ReplayWorld::new(&models.bundle, &data.realtime, &options)?;
        let mut calib = ReplayWorld::new(&models.bundle, &data.calibration, &options)?;
        let u_seed = self.seed_for(7);
        let mut sources: BTreeMap<Strategy, usize> = BTreeMap::new();
        for (s, det) in &models.detectors {
            let dmc = self.dm_config(*s);
            let unc = match s.loss {
                None => Uncertainty::None,
                Some(loss) => Uncertainty::Mapper {
                    dm: &models.mappers[&loss],
                    config: &dmc,
                    base: Some(&models.base),
                    seed: u_seed,
                },
            };
            let a = eval.add_mrs_source(det, unc)?;
            let b = calib.add_mrs_source(det, unc)?;
            debug_assert_eq!(a, b);
            sources.insert(*s, a);
        }
        let default_strategy = Strategy::parse(&self.cfg.strategy).map_err(Error::InvalidArgument)?;
        let mut entries = Vec::new();
        for p in &self.cfg.policies {
            let spec: PolicySpec = p.parse().map_err(Error::InvalidArgument)?;
            let kind = match &spec {
                PolicySpec::Always => SweepKind::Always,
                PolicySpec::Never => SweepKind::Never,
                PolicySpec::Random => SweepKind::Random,
                PolicySpec::Lof => SweepKind::Lof,
                PolicySpec::Svdd => SweepKind::Svdd,
                PolicySpec::Ideal(label) => {
                    let s = match label {
                        None => default_strategy,
                        Some(l) => Strategy::parse(l).map_err(Error::InvalidArgument)?,
                    };
                    SweepKind::Mrs(sources[&s])
                }
            };
            entries.push((spec.to_string(), kind));
        }
        let backbone = self.cfg.encoder.name();
        let sweep_seed = self.seed_for(8);
        let curves = frequency_sweep(&eval, &calib, &entries, &self.cfg.budgets, backbone, self.cfg.lof_k, sweep_seed)?;
        let curves: Vec<CurveRow> = curves.into_iter().map(|r| CurveRow { seed: self.seed, ..r }).collect();

        // Revenue and step log under the main score policy (or the first
        // score source when the plain policy is absent).
        let source = sources
            .get(&default_strategy)
            .or_else(|| sources.values().next())
            .copied();
        let (policy, src) = match source {
            Some(s) => (
                calibrated_policy(SweepKind::Mrs(s), self.cfg.revenue_budget, &calib, self.cfg.lof_k, sweep_seed)?,
                Some(s),
            ),
            None => (Policy::Random(self.cfg.revenue_budget), None),
        };
        let (_, records) = eval.replay(&policy, src, sweep_seed)?;
        let rev = revenue(&records, self.cfg.group_size)?;

        fs::write(self.path("curves.csv"), emit_curves(&curves))?;
        fs::write(self.path("revenue.csv"), emit_revenue(&rev.rows))?;
        fs::write(self.path("steps.tsv"), step_log_tsv(&records))?;
        for n in ["curves.csv", "revenue.csv", "steps.tsv"] {
            self.record(n)?;
        }
        Ok(SeedResults {
            curves,
            revenue: rev.rows,
        })
    }
}

fn write_manifest(out: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(out.join("manifest.json"), text + "\n")?;
    Ok(())
}

/// Runs every stage up to and including `until` for every seed.
///
/// Artifacts from an earlier run with the same configuration hash are
/// reused when their stage completed. On failure the manifest records the
/// stage that failed and marks it incomplete.
pub fn run(cfg: &ExperimentConfig, until: Stage) -> Result<RunSummary> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    fs::create_dir_all(&cfg.out)?;
    let hash = cfg.hash();
    let previous = Manifest::load(&cfg.out.join("manifest.json")).ok();
    let same_config = previous.as_ref().is_some_and(|m| m.config_hash == hash);
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;

    let mut manifest = Manifest {
        config_hash: hash,
        seeds: cfg.seeds.clone(),
        ..Manifest::default()
    };
    let mut all_curves = Vec::new();
    let mut all_revenue = BTreeMap::new();
    for &seed in &cfg.seeds {
        let dir = cfg.out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let prev = previous.as_ref().and_then(|m| m.run(seed)).cloned().unwrap_or_default();
        let completed = |s: Stage| same_config && prev.stages.get(s.name()).is_some_and(|v| v == "complete");
        let mut run = SeedRun {
            cfg,
            seed,
            dir,
            reuse: false,
            manifest: SeedManifest {
                seed,
                ..SeedManifest::default()
            },
        };
        let outcome = (|| -> Result<Option<SeedResults>> {
            let data = stage(Stage::Train, datasets(cfg, seed))?;
            run.reuse = completed(Stage::Train);
            run.mark(Stage::Train, false);
            let bundle = stage(Stage::Train, run.train(&data))?;
            run.mark(Stage::Train, true);
            if until == Stage::Train {
                return Ok(None);
            }
            run.reuse = completed(Stage::BuildMrd);
            run.mark(Stage::BuildMrd, false);
            let samples = stage(Stage::BuildMrd, run.build_mrd(&data, &bundle))?;
            run.mark(Stage::BuildMrd, true);
            if until == Stage::BuildMrd {
                return Ok(None);
            }
            run.reuse = completed(Stage::TrainDetector);
            run.mark(Stage::TrainDetector, false);
            let (base, mappers, detectors) = stage(Stage::TrainDetector, run.train_detectors(&data, &bundle, &samples))?;
            run.mark(Stage::TrainDetector, true);
            if until == Stage::TrainDetector {
                return Ok(None);
            }
            let models = SeedModels {
                bundle,
                samples,
                base,
                mappers,
                detectors,
            };
            run.mark(Stage::Sweep, false);
            let results = stage(Stage::Sweep, run.sweep(&data, &models))?;
            run.mark(Stage::Sweep, true);
            Ok(Some(results))
        })();
        match outcome {
            Ok(Some(results)) => {
                all_curves.extend(results.curves);
                all_revenue.insert(seed, results.revenue);
                manifest.runs.push(run.manifest);
            }
            Ok(None) => manifest.runs.push(run.manifest),
            Err(e) => {
                manifest.error = Some(e.to_string());
                manifest.runs.push(run.manifest);
                write_manifest(&cfg.out, &manifest)?;
                return Err(e);
            }
        }
    }
    if until >= Stage::Sweep {
        let curves = emit_curves(&all_curves);
        fs::write(cfg.out.join("curves.csv"), &curves)?;
        manifest
            .artifacts
            .insert("curves.csv".into(), hex::encode(Sha256::digest(curves.as_bytes())));
    }
    write_manifest(&cfg.out, &manifest)?;
    Ok(RunSummary {
        out: cfg.out.clone(),
        manifest,
        curves: all_curves,
        revenue: all_revenue,
    })
}

/// Reads the curves of a finished run, running the sweep first when the
/// output directory lacks them.
pub fn report(cfg: &ExperimentConfig) -> Result<Vec<CurveRow>> {
    let path = cfg.out.join("curves.csv");
    let fresh = Manifest::load(&cfg.out.join("manifest.json"))
        .map(|m| m.config_hash == cfg.hash() && m.error.is_none())
        .unwrap_or(false);
    if !(fresh && path.exists()) {
        run(cfg, Stage::Sweep)?;
    }
    parse_curves(&fs::read_to_string(path)?)
}

/// Text summary of curve rows: mean AUC and realized frequency per policy
/// and budget across seeds.
pub fn summarize_curves(rows: &[CurveRow]) -> String {
    let mut groups: BTreeMap<(String, i64), Vec<&CurveRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.policy.clone(), (r.budget * 1e6).round() as i64))
            .or_default()
            .push(r);
    }
    let mut out = String::from("policy        budget  freq     auc      uauc     ndcg@10  hr@10\n");
    for ((policy, _), rs) in groups {
        let n = rs.len() as f64;
        let mean = |f: fn(&CurveRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        writeln!(
            out,
            "{policy:<13} {:>6.2}  {:.4}   {:.4}   {:.4}   {:.4}   {:.4}",
            rs[0].budget,
            mean(|r| r.realized_freq),
            mean(|r| r.auc),
            mean(|r| r.uauc),
            mean(|r| r.ndcg10),
            mean(|r| r.hr10)
        )
        .expect("writing to a String cannot fail");
    }
    out
}
