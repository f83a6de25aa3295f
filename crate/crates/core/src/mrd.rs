//! Mis-recommendation detector: a self-labeled dataset built from history,
//! a small classifier over pairs of sequence embeddings, and the resulting
//! mis-recommendation score (MRS).
//!
//! A sample pairs the current sequence `s_t` with an older sequence `s_t'`.
//! Its label is 1 when the classifier generated from `s_t'` still gets the
//! interaction at `t` right. The detector learns to predict that label, so a
//! low score means the device's parameters have gone stale.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Session;
use crate::error::{Error, Result};
use crate::hypernet::ModelBundle;
use crate::kernel::{
    init_matrix, load_checkpoint, logistic, restore_into, save_checkpoint, Graph, Optimizer, OptimizerKind, ParamId,
    ParamStore, Rng, Tensor, Var,
};
use crate::seqrec::{hard_decision, ClickSequence, DynamicParams};

/// One detector training example.
#[derive(Clone, Debug, PartialEq)]
pub struct MrdSample {
    pub current: ClickSequence,
    pub stale: ClickSequence,
    /// `t - t'`.
    pub lag: usize,
    /// 1 iff the stale classifier's hard decision matches the target.
    pub label: u8,
    pub uncertainty: Option<f64>,
    pub user: usize,
    pub t: usize,
    pub candidate: usize,
    /// Click label of the interaction at `t`.
    pub target: u8,
}

/// Which older steps are paired with each anchor step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LagPolicy {
    /// Fixed lags, each capped at the anchor's position; duplicates dropped.
    Lags(Vec<usize>),
    /// Every earlier step (quadratic in session length).
    AllPairs,
}

impl Default for LagPolicy {
    fn default() -> Self {
        LagPolicy::Lags(vec![0, 1, 2, 4, 8, 16])
    }
}

impl LagPolicy {
    /// Lags used for the anchor at position `pos` within its session.
    pub fn lags(&self, pos: usize) -> Vec<usize> {
        match self {
            LagPolicy::AllPairs => (0..=pos).collect(),
            LagPolicy::Lags(lags) => {
                let mut out: Vec<usize> = lags.iter().map(|&l| l.min(pos)).collect();
                out.sort_unstable();
                out.dedup();
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrdDatasetConfig {
    pub lag_policy: LagPolicy,
    /// Keep at most `ratio` majority-class samples per minority sample.
    pub balance_ratio: Option<f64>,
    pub max_samples: Option<usize>,
    pub seed: u64,
}

impl Default for MrdDatasetConfig {
    fn default() -> Self {
        MrdDatasetConfig {
            lag_policy: LagPolicy::default(),
            balance_ratio: Some(3.0),
            max_samples: None,
            seed: 0,
        }
    }
}

/// Labels `(t, t')` pairs by running the classifier generated from `s_t'`
/// on the interactions at `t`. The bundle is only read.
pub fn build_mrd_dataset(sessions: &[Session], bundle: &ModelBundle, config: &MrdDatasetConfig) -> Result<Vec<MrdSample>> {
    if !bundle.is_trained() {
        return Err(Error::Untrained("model bundle"));
    }
    let mut samples = Vec::new();
    for session in sessions {
        let fresh: Vec<DynamicParams> = session
            .steps
            .iter()
            .map(|s| bundle.generate_params(&s.sequence))
            .collect::<Result<_>>()?;
        for (i, step) in session.steps.iter().enumerate() {
            let feats = bundle.features(&step.sequence, &step.candidates)?;
            for lag in config.lag_policy.lags(i) {
                let j = i - lag;
                let stale = &session.steps[j];
                for (k, (&candidate, &target)) in step.candidates.iter().zip(&step.labels).enumerate() {
                    let p = fresh[j].probability(feats.row_slice(k));
                    samples.push(MrdSample {
                        current: step.sequence.clone(),
                        stale: stale.sequence.clone(),
                        lag: step.t - stale.t,
                        label: u8::from(hard_decision(p) == target),
                        uncertainty: None,
                        user: session.user,
                        t: step.t,
                        candidate,
                        target,
                    });
                }
            }
        }
    }
    let rng = Rng::new(config.seed).derive(&[0x3d]);
    if let Some(ratio) = config.balance_ratio {
        samples = downsample_majority(samples, ratio, &mut rng.derive(&[1]));
    }
    if let Some(cap) = config.max_samples {
        samples = subsample(samples, cap, &mut rng.derive(&[2]));
    }
    Ok(samples)
}

fn subsample(samples: Vec<MrdSample>, keep: usize, rng: &mut Rng) -> Vec<MrdSample> {
    if samples.len() <= keep {
        return samples;
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut idx);
    let mut chosen = vec![false; samples.len()];
    idx[..keep].iter().for_each(|&i| chosen[i] = true);
    samples
        .into_iter()
        .zip(chosen)
        .filter_map(|(s, c)| c.then_some(s))
        .collect()
}

fn downsample_majority(samples: Vec<MrdSample>, ratio: f64, rng: &mut Rng) -> Vec<MrdSample> {
    let pos = samples.iter().filter(|s| s.label == 1).count();
    let neg = samples.len() - pos;
    let (minority, majority_label) = if pos >= neg { (neg, 1) } else { (pos, 0) };
    let limit = (ratio * minority as f64).floor() as usize;
    if minority == 0 || samples.len() - minority <= limit {
        return samples;
    }
    let (major, minor): (Vec<_>, Vec<_>) = samples.into_iter().enumerate().partition(|(_, s)| s.label == majority_label);
    let mut order: Vec<usize> = (0..major.len()).collect();
    rng.shuffle(&mut order);
    let mut keep = vec![false; major.len()];
    order[..limit].iter().for_each(|&i| keep[i] = true);
    let mut merged: Vec<(usize, MrdSample)> = minor;
    merged.extend(
        major
            .into_iter()
            .zip(keep)
            .filter_map(|((i, s), k)| k.then_some((i, s))),
    );
    merged.sort_by_key(|(i, _)| *i);
    merged.into_iter().map(|(_, s)| s).collect()
}

pub const MRD_HEADER: &str = "current_seq\tstale_seq\tlag\tlabel\tuncertainty\tuser\tt\tcandidate\ttarget";

/// Tab-separated dataset with [`MRD_HEADER`]; sequences are comma-joined
/// ids and a missing uncertainty is an empty field.
pub fn write_mrd_tsv(path: &Path, samples: &[MrdSample]) -> Result<()> {
    fs::write(path, mrd_tsv(samples))?;
    Ok(())
}

pub fn mrd_tsv(samples: &[MrdSample]) -> String {
    let mut out = String::new();
    out.push_str(MRD_HEADER);
    out.push('\n');
    for s in samples {
        let u = s.uncertainty.map(|u| format!("{u:e}")).unwrap_or_default();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.current.to_csv(),
            s.stale.to_csv(),
            s.lag,
            s.label,
            u,
            s.user,
            s.t,
            s.candidate,
            s.target
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn read_mrd_tsv(path: &Path, max_len: usize) -> Result<Vec<MrdSample>> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MRD_HEADER => {}
        _ => return Err(err(1, "missing or unexpected header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(err(n, format!("expected 9 fields, found {}", f.len())));
        }
        let int = |k: usize| f[k].parse::<usize>().map_err(|_| err(n, format!("bad integer `{}`", f[k])));
        let label = int(3)?;
        let target = int(8)?;
        if label > 1 || target > 1 {
            return Err(err(n, "labels must be 0 or 1".into()));
        }
        out.push(MrdSample {
            current: ClickSequence::parse_csv(f[0], max_len).map_err(|m| err(n, m))?,
            stale: ClickSequence::parse_csv(f[1], max_len).map_err(|m| err(n, m))?,
            lag: int(2)?,
            label: label as u8,
            uncertainty: if f[4].is_empty() {
                None
            } else {
                Some(f[4].parse().map_err(|_| err(n, format!("bad uncertainty `{}`", f[4])))?)
            },
            user: int(5)?,
            t: int(6)?,
            candidate: int(7)?,
            target: target as u8,
        });
    }
    Ok(out)
}

/// Pairwise classifier: `φ(x) = tanh(x W + b)` on both embeddings, then
/// `[φ(a); φ(b); φ(a)⊙φ(b); u]` through a ReLU layer and a sigmoid output.
#[derive(Clone, Debug)]
pub struct MrdDetector {
    pub store: ParamStore,
    proj: (ParamId, ParamId),
    hidden: (ParamId, ParamId),
    out: (ParamId, ParamId),
    /// `[mean, std]` used to standardize the uncertainty input.
    u_norm: ParamId,
    with_uncertainty: bool,
    trained: bool,
}

impl MrdDetector {
    fn build(dim: usize, proj_dim: usize, hidden: usize, with_uncertainty: bool, rng: Option<&mut Rng>) -> Result<Self> {
        let feat = 3 * proj_dim + usize::from(with_uncertainty);
        let mut store = ParamStore::new();
        let (pw, hw) = match rng {
            Some(rng) => (init_matrix(rng, dim, proj_dim), init_matrix(rng, feat, hidden)),
            None => (Tensor::zeros(&[dim, proj_dim]), Tensor::zeros(&[feat, hidden])),
        };
        let proj = (store.add("mrd.proj.w", pw)?, store.add("mrd.proj.b", Tensor::zeros(&[1, proj_dim]))?);
        let width = hidden;
        let hidden = (store.add("mrd.hidden.w", hw)?, store.add("mrd.hidden.b", Tensor::zeros(&[1, width]))?);
        let out = (
            store.add("mrd.out.w", Tensor::zeros(&[width, 1]))?,
            store.add("mrd.out.b", Tensor::zeros(&[1, 1]))?,
        );
        let u_norm = store.add("mrd.u_norm", Tensor::row(vec![0.0, 1.0]))?;
        Ok(MrdDetector {
            store,
            proj,
            hidden,
            out,
            u_norm,
            with_uncertainty,
            trained: false,
        })
    }

    /// Randomly initialized detector over `dim`-wide sequence embeddings.
    pub fn init(dim: usize, hidden: usize, with_uncertainty: bool, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed).derive(&[0x3e]);
        Self::build(dim, dim, hidden, with_uncertainty, Some(&mut rng))
    }

    /// All-zero detector; it scores every input 0.5.
    pub fn zeros(dim: usize, hidden: usize, with_uncertainty: bool) -> Result<Self> {
        Self::build(dim, dim, hidden, with_uncertainty, None)
    }

    pub fn with_uncertainty(&self) -> bool {
        self.with_uncertainty
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn input_dim(&self) -> usize {
        self.store.value(self.proj.0).shape()[0]
    }

    /// Trainable parameters (excludes the uncertainty normalizer).
    pub fn trainable(&self) -> Vec<ParamId> {
        vec![self.proj.0, self.proj.1, self.hidden.0, self.hidden.1, self.out.0, self.out.1]
    }

    pub fn uncertainty_norm(&self) -> (f64, f64) {
        let d = self.store.value(self.u_norm).data();
        (d[0], d[1])
    }

    fn normalize_u(&self, u: f64) -> f64 {
        let (m, s) = self.uncertainty_norm();
        (u - m) / s
    }

    fn check_u(&self, u: Option<f64>) -> Result<Option<f64>> {
        match (self.with_uncertainty, u) {
            (true, None) => Err(Error::MissingFeature("uncertainty")),
            (true, Some(u)) if !u.is_finite() => Err(Error::NonFinite("uncertainty")),
            (true, Some(u)) => Ok(Some(self.normalize_u(u))),
            (false, _) => Ok(None),
        }
    }

    /// Probabilities `B x 1` for batched embeddings `a`, `b` (`B x N`) and an
    /// optional standardized uncertainty column `B x 1`.
    pub fn forward(&self, g: &mut Graph<'_>, a: Var, b: Var, u: Option<Var>) -> Result<Var> {
        let pw = g.param(self.proj.0);
        let pb = g.param(self.proj.1);
        let project = |g: &mut Graph<'_>, x: Var| -> Result<Var> {
            let h = g.matmul(x, pw)?;
            let h = g.add_row(h, pb)?;
            g.tanh(h)
        };
        let pa = project(g, a)?;
        let pbv = project(g, b)?;
        let prod = g.mul(pa, pbv)?;
        let mut x = g.concat_cols(pa, pbv)?;
        x = g.concat_cols(x, prod)?;
        if let Some(u) = u {
            x = g.concat_cols(x, u)?;
        }
        let hw = g.param(self.hidden.0);
        let hb = g.param(self.hidden.1);
        let h = g.matmul(x, hw)?;
        let h = g.add_row(h, hb)?;
        let h = g.relu(h)?;
        let ow = g.param(self.out.0);
        let ob = g.param(self.out.1);
        let o = g.matmul(h, ow)?;
        let o = g.add_row(o, ob)?;
        g.sigmoid(o)
    }

    /// Mean cross-entropy of the detector on a batch.
    pub fn loss(&self, g: &mut Graph<'_>, a: Tensor, b: Tensor, u: Option<Tensor>, labels: &[f64]) -> Result<Var> {
        let a = g.input(a)?;
        let b = g.input(b)?;
        let u = u.map(|u| g.input(u)).transpose()?;
        let p = self.forward(g, a, b, u)?;
        g.bce(p, labels)
    }

    /// Correctness probability for one pair of embeddings without a graph.
    pub fn score_embeddings(&self, a: &[f64], b: &[f64], u: Option<f64>) -> Result<f64> {
        let n = self.input_dim();
        if a.len() != n || b.len() != n {
            return Err(crate::error::shape_err(
                "mrs",
                format!("embeddings of width {} and {}, expected {n}", a.len(), b.len()),
            ));
        }
        let u = self.check_u(u)?;
        let project = |x: &[f64]| -> Vec<f64> {
            let mut out = affine(x, self.store.value(self.proj.0), self.store.value(self.proj.1));
            out.iter_mut().for_each(|v| *v = v.tanh());
            out
        };
        let pa = project(a);
        let pb = project(b);
        let mut x = Vec::with_capacity(3 * pa.len() + 1);
        x.extend_from_slice(&pa);
        x.extend_from_slice(&pb);
        x.extend(pa.iter().zip(&pb).map(|(p, q)| p * q));
        if let Some(u) = u {
            x.push(u);
        }
        let mut h = affine(&x, self.store.value(self.hidden.0), self.store.value(self.hidden.1));
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let o = affine(&h, self.store.value(self.out.0), self.store.value(self.out.1));
        Ok(logistic(o[0]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    /// Restores a detector saved by [`MrdDetector::save`]; the layout is
    /// recovered from the stored shapes. The result is marked trained.
    pub fn load(path: &Path) -> Result<Self> {
        let loaded = load_checkpoint(path)?;
        let shape = |name: &str| -> Result<Vec<usize>> {
            loaded
                .id(name)
                .map(|id| loaded.value(id).shape().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };
        let proj = shape("mrd.proj.w")?;
        let hidden = shape("mrd.hidden.w")?;
        let with_u = hidden[0] == 3 * proj[1] + 1;
        let mut det = Self::build(proj[0], proj[1], hidden[1], with_u, None)?;
        restore_into(&mut det.store, &loaded)?;
        det.trained = true;
        Ok(det)
    }
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (_, o) = w.dims2().expect("2-d weight");
    let wd = w.data();
    let mut out = b.data().to_vec();
    for (p, xv) in x.iter().enumerate() {
        for (acc, wv) in out.iter_mut().zip(&wd[p * o..(p + 1) * o]) {
            *acc += xv * wv;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrdTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for MrdTrainConfig {
    fn default() -> Self {
        MrdTrainConfig {
            epochs: 20,
            batch_size: 128,
            learning_rate: 0.005,
            optimizer: OptimizerKind::Adam,
            hidden: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MrdTrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub train_accuracy: f64,
}

/// Backbone embeddings of every distinct sequence in `samples`.
pub fn embed_sequences<'a>(
    bundle: &ModelBundle,
    seqs: impl IntoIterator<Item = &'a ClickSequence>,
) -> Result<HashMap<ClickSequence, Vec<f64>>> {
    let mut out = HashMap::new();
    for s in seqs {
        if !out.contains_key(s) {
            out.insert(s.clone(), bundle.encode(s)?.into_data());
        }
    }
    Ok(out)
}

/// Fits a detector on frozen backbone embeddings of the sample sequences.
pub fn train_mrd(
    bundle: &ModelBundle,
    samples: &[MrdSample],
    with_uncertainty: bool,
    config: &MrdTrainConfig,
) -> Result<(MrdDetector, MrdTrainReport)> {
    let positives = samples.iter().filter(|s| s.label == 1).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::ClassImbalance { positives, negatives });
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut us = Vec::new();
    if with_uncertainty {
        for s in samples {
            match s.uncertainty {
                Some(u) if u.is_finite() => us.push(u),
                Some(_) => return Err(Error::NonFinite("uncertainty")),
                None => return Err(Error::MissingFeature("uncertainty")),
            }
        }
    }
    let embeds = embed_sequences(bundle, samples.iter().flat_map(|s| [&s.current, &s.stale]))?;
    let dim = bundle.config().dim;
    let mut det = MrdDetector::init(dim, config.hidden, with_uncertainty, config.seed)?;
    if with_uncertainty {
        let n = us.len() as f64;
        let mean = us.iter().sum::<f64>() / n;
        let var = us.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        det.store.set(det.u_norm, Tensor::row(vec![mean, std]))?;
    }
    let trainable = det.trainable();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let rng = Rng::new(config.seed).derive(&[0x3f]);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = MrdTrainReport::default();

    let batch = |det: &MrdDetector, idx: &[usize]| -> Result<(Tensor, Tensor, Option<Tensor>, Vec<f64>)> {
        let mut a = Vec::with_capacity(idx.len() * dim);
        let mut b = Vec::with_capacity(idx.len() * dim);
        let mut u = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &samples[i];
            a.extend_from_slice(&embeds[&s.current]);
            b.extend_from_slice(&embeds[&s.stale]);
            if with_uncertainty {
                u.push(det.normalize_u(s.uncertainty.expect("checked above")));
            }
            y.push(f64::from(s.label));
        }
        let n = idx.len();
        Ok((
            Tensor::new(vec![n, dim], a)?,
            Tensor::new(vec![n, dim], b)?,
            if with_uncertainty { Some(Tensor::new(vec![n, 1], u)?) } else { None },
            y,
        ))
    };

    for epoch in 0..config.epochs {
        rng.derive(&[epoch as u64]).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (a, b, u, y) = batch(&det, chunk)?;
            det.store.zero_grads();
            let snapshot = det.clone();
            let (params, mut grads) = det.store.split_mut();
            let mut g = Graph::new(params);
            let loss = snapshot.loss(&mut g, a, b, u, &y)?;
            total += g.scalar(loss) * chunk.len() as f64;
            g.backward(loss, &mut grads)?;
            opt.step(&mut det.store, Some(&trainable));
            report.steps += 1;
        }
        report.epoch_losses.push(total / samples.len() as f64);
    }
    let mut correct = 0;
    for s in samples {
        let p = det.score_embeddings(&embeds[&s.current], &embeds[&s.stale], s.uncertainty)?;
        if hard_decision(p) == s.label {
            correct += 1;
        }
    }
    report.train_accuracy = correct as f64 / samples.len() as f64;
    det.trained = true;
    Ok((det, report))
}

/// Mis-recommendation score: the detector's probability that parameters
/// generated from `s_last_request` still classify correctly at `s_t`.
/// Low scores call for a request.
pub fn mrs(
    bundle: &ModelBundle,
    s_t: &ClickSequence,
    s_last_request: &ClickSequence,
    u: Option<f64>,
    detector: &MrdDetector,
) -> Result<f64> {
    let a = bundle.encode(s_t)?;
    let b = bundle.encode(s_last_request)?;
    detector.score_embeddings(a.data(), b.data(), u)
}
