//! Distribution mapper: prior and posterior diagonal Gaussians over a latent
//! `z`, a next-item embedding head driven by `z`, and the multi-sample
//! uncertainty fed to the mis-recommendation detector.
//!
//! Training samples `z` from the posterior, which also sees the embedding of
//! the true next item; inference samples from the prior only.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Session;
use crate::error::{shape_err, Error, Result};
use crate::hypernet::ModelBundle;
use crate::kernel::{
    init_matrix, load_checkpoint, restore_into, save_checkpoint, softplus, Graph, Optimizer, OptimizerKind, ParamId,
    ParamStore, Rng, Tensor, Var,
};
use crate::mrd::MrdDetector;
use crate::seqrec::{classify, ClickSequence, DynamicParams};

/// Lower bound added to every standard deviation.
pub const SIGMA_MIN: f64 = 1e-4;

/// Diagonal Gaussian `N(mu, diag(sigma^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(shape_err("gaussian", format!("mu {} vs sigma {}", mu.len(), sigma.len())));
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters"));
        }
        if sigma.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidArgument("negative sigma".into()));
        }
        Ok(GaussianLatent { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `mu + sigma * eps` with standard normal `eps`.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mu.iter().zip(&self.sigma).map(|(m, s)| m + s * rng.normal()).collect()
    }
}

/// `KL(q || p)` for diagonal Gaussians.
pub fn kl_diag_gaussian(q: &GaussianLatent, p: &GaussianLatent) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(shape_err("kl", format!("dims {} vs {}", q.dim(), p.dim())));
    }
    if q.sigma.iter().chain(&p.sigma).any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument("kl requires positive sigmas".into()));
    }
    Ok((0..q.dim())
        .map(|d| {
            let (mq, sq, mp, sp) = (q.mu[d], q.sigma[d], p.mu[d], p.sigma[d]);
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// Sum over coordinates of the population variance across samples.
pub fn variance_sum(samples: &[Vec<f64>]) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    (0..samples[0].len())
        .map(|k| population_variance(&samples.iter().map(|s| s[k]).collect::<Vec<_>>()))
        .sum()
}

/// Population variance (divides by `n`). Values are shifted by the first
/// element so identical inputs give exactly zero.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let shift = xs[0];
    let mean = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    xs.iter().map(|x| (x - shift - mean).powi(2)).sum::<f64>() / n
}

/// Reconstruction loss for the next-item head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecLoss {
    /// Route the prediction through the recommendation classifier (CL).
    Classification,
    /// Mean squared error against the true next-item embedding (RL).
    Regression,
}

/// Which multi-sample quantity becomes the uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyKind {
    /// Variance of sampled next-item embeddings (NU).
    NextItem,
    /// Variance of sampled mis-recommendation scores (MU).
    MisRecommendation,
}

impl FromStr for RecLoss {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cl" | "classification" => Ok(RecLoss::Classification),
            "rl" | "regression" => Ok(RecLoss::Regression),
            other => Err(format!("unknown loss `{other}` (expected cl or rl)")),
        }
    }
}

impl FromStr for UncertaintyKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "nu" => Ok(UncertaintyKind::NextItem),
            "mu" => Ok(UncertaintyKind::MisRecommendation),
            other => Err(format!("unknown uncertainty `{other}` (expected nu or mu)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmConfig {
    pub latent_dim: usize,
    pub beta: f64,
    pub loss: RecLoss,
    pub uncertainty: UncertaintyKind,
    pub samples: usize,
}

impl Default for DmConfig {
    fn default() -> Self {
        DmConfig {
            latent_dim: 64,
            beta: 0.1,
            loss: RecLoss::Classification,
            uncertainty: UncertaintyKind::NextItem,
            samples: 10,
        }
    }
}

impl DmConfig {
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            out.push(format!("dm.beta must be a finite value >= 0, got {}", self.beta));
        }
        if self.samples == 0 {
            out.push("dm.n must be at least 1".to_string());
        }
        if self.latent_dim == 0 {
            out.push("dm.latent_dim must be at least 1".to_string());
        }
        out
    }

    /// Short label such as `CL+NU`.
    pub fn strategy(&self) -> &'static str {
        match (self.loss, self.uncertainty) {
            (RecLoss::Classification, UncertaintyKind::NextItem) => "CL+NU",
            (RecLoss::Classification, UncertaintyKind::MisRecommendation) => "CL+MU",
            (RecLoss::Regression, UncertaintyKind::NextItem) => "RL+NU",
            (RecLoss::Regression, UncertaintyKind::MisRecommendation) => "RL+MU",
        }
    }
}

type Affine = (ParamId, ParamId);

/// Prior and posterior networks, the next-item head, and the fusion layer
/// used by the classification loss. Inputs are frozen backbone embeddings.
#[derive(Clone, Debug)]
pub struct DistributionMapper {
    pub store: ParamStore,
    dim: usize,
    latent: usize,
    prior_mu: Affine,
    prior_sigma: Affine,
    post_mu: Affine,
    post_sigma: Affine,
    z_proj: Affine,
    out: Affine,
    fuse: Affine,
    trained: bool,
}

impl DistributionMapper {
    fn build(dim: usize, latent: usize, mut rng: Option<&mut Rng>) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut add = |name: &str, rows: usize, cols: usize, rng: &mut Option<&mut Rng>| -> Result<Affine> {
            let w = match rng {
                Some(r) => init_matrix(r, rows, cols),
                None => Tensor::zeros(&[rows, cols]),
            };
            Ok((
                store.add(format!("dm.{name}.w"), w)?,
                store.add(format!("dm.{name}.b"), Tensor::zeros(&[1, cols]))?,
            ))
        };
        let prior_mu = add("prior_mu", dim, latent, &mut rng)?;
        let prior_sigma = add("prior_sigma", dim, latent, &mut rng)?;
        let post_mu = add("post_mu", 2 * dim, latent, &mut rng)?;
        let post_sigma = add("post_sigma", 2 * dim, latent, &mut rng)?;
        let z_proj = add("z_proj", latent, dim, &mut rng)?;
        let out = add("out", 2 * dim, dim, &mut rng)?;
        let fuse = add("fuse", 2 * dim, dim, &mut rng)?;
        Ok(DistributionMapper {
            store,
            dim,
            latent,
            prior_mu,
            prior_sigma,
            post_mu,
            post_sigma,
            z_proj,
            out,
            fuse,
            trained: false,
        })
    }

    /// Random initialization for `dim`-wide embeddings and a `latent`-wide z.
    pub fn init(dim: usize, latent: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed).derive(&[0xd3]);
        Self::build(dim, latent, Some(&mut rng))
    }

    pub fn zeros(dim: usize, latent: usize) -> Result<Self> {
        Self::build(dim, latent, None)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Parameter handles of the named block (`prior_mu`, `prior_sigma`,
    /// `post_mu`, `post_sigma`, `z_proj`, `out`, `fuse`), for hand-set
    /// fixtures.
    pub fn block(&self, name: &str) -> Option<(ParamId, ParamId)> {
        Some(match name {
            "prior_mu" => self.prior_mu,
            "prior_sigma" => self.prior_sigma,
            "post_mu" => self.post_mu,
            "post_sigma" => self.post_sigma,
            "z_proj" => self.z_proj,
            "out" => self.out,
            "fuse" => self.fuse,
            _ => return None,
        })
    }

    fn affine(&self, (w, b): Affine, x: &[f64]) -> Vec<f64> {
        let wt = self.store.value(w);
        let (_, o) = wt.dims2().expect("2-d weight");
        let wd = wt.data();
        let mut out = self.store.value(b).data().to_vec();
        for (p, xv) in x.iter().enumerate() {
            for (acc, wv) in out.iter_mut().zip(&wd[p * o..(p + 1) * o]) {
                *acc += xv * wv;
            }
        }
        out
    }

    fn check_len(&self, what: &'static str, v: &[f64], n: usize) -> Result<()> {
        if v.len() != n {
            return Err(shape_err(what, format!("length {}, expected {n}", v.len())));
        }
        Ok(())
    }

    fn gaussian(&self, mu: Affine, sigma: Affine, x: &[f64]) -> GaussianLatent {
        GaussianLatent {
            mu: self.affine(mu, x),
            sigma: self.affine(sigma, x).into_iter().map(|v| softplus(v) + SIGMA_MIN).collect(),
        }
    }

    /// Prior over `z` given the sequence embedding `e`.
    pub fn prior(&self, e: &[f64]) -> Result<GaussianLatent> {
        self.check_len("prior input", e, self.dim)?;
        Ok(self.gaussian(self.prior_mu, self.prior_sigma, e))
    }

    /// Posterior over `z` given `e` and the next item's embedding `r`.
    pub fn posterior(&self, e: &[f64], r: &[f64]) -> Result<GaussianLatent> {
        self.check_len("posterior input", e, self.dim)?;
        self.check_len("posterior next item", r, self.dim)?;
        let x: Vec<f64> = e.iter().chain(r).copied().collect();
        Ok(self.gaussian(self.post_mu, self.post_sigma, &x))
    }

    /// `r_hat = W_out [e; W_z z + b_z] + b_out`.
    pub fn predict_next_item(&self, e: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check_len("predict input", e, self.dim)?;
        self.check_len("latent z", z, self.latent)?;
        let h = self.affine(self.z_proj, z);
        let x: Vec<f64> = e.iter().chain(&h).copied().collect();
        Ok(self.affine(self.out, &x))
    }

    fn affine_graph(&self, g: &mut Graph<'_>, (w, b): Affine, x: Var) -> Result<Var> {
        let w = g.param(w);
        let b = g.param(b);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    fn gaussian_graph(&self, g: &mut Graph<'_>, mu: Affine, sigma: Affine, x: Var) -> Result<(Var, Var)> {
        let m = self.affine_graph(g, mu, x)?;
        let s = self.affine_graph(g, sigma, x)?;
        let s = g.softplus(s)?;
        let s = g.offset(s, SIGMA_MIN)?;
        Ok((m, s))
    }

    pub fn prior_graph(&self, g: &mut Graph<'_>, e: Var) -> Result<(Var, Var)> {
        self.gaussian_graph(g, self.prior_mu, self.prior_sigma, e)
    }

    pub fn posterior_graph(&self, g: &mut Graph<'_>, e: Var, r: Var) -> Result<(Var, Var)> {
        let x = g.concat_cols(e, r)?;
        self.gaussian_graph(g, self.post_mu, self.post_sigma, x)
    }

    pub fn predict_graph(&self, g: &mut Graph<'_>, e: Var, z: Var) -> Result<Var> {
        let h = self.affine_graph(g, self.z_proj, z)?;
        let x = g.concat_cols(e, h)?;
        self.affine_graph(g, self.out, x)
    }

    /// Classifier input combining `Ω(x)` (`C x N`) with the predicted next
    /// item (`1 x N`, shared by every row): `tanh([Ω; r_hat] W_f + b_f)`.
    pub fn fuse_graph(&self, g: &mut Graph<'_>, omega: Var, r_hat: Var) -> Result<Var> {
        let rows = g.value(omega).shape()[0];
        let (w, b) = self.fuse;
        let w = g.param(w);
        let b = g.param(b);
        let w_omega = g.slice_rows(w, 0, self.dim)?;
        let w_r = g.slice_rows(w, self.dim, self.dim)?;
        let a = g.matmul(omega, w_omega)?;
        let r = g.matmul(r_hat, w_r)?;
        let r = g.add(r, b)?;
        let h = g.add_row(a, r)?;
        debug_assert_eq!(g.value(h).shape()[0], rows);
        g.tanh(h)
    }

    /// Uncertainty of one step from `n` prior samples. `e_prev` and
    /// `detector` are required for the mis-recommendation kind.
    pub fn uncertainty(
        &self,
        e: &[f64],
        e_prev: Option<&[f64]>,
        detector: Option<&MrdDetector>,
        config: &DmConfig,
        rng: &mut Rng,
    ) -> Result<f64> {
        if config.samples == 0 {
            return Err(Error::InvalidArgument("uncertainty needs at least one sample".into()));
        }
        let prior = self.prior(e)?;
        match config.uncertainty {
            UncertaintyKind::NextItem => nu_uncertainty(self, e, &prior, config.samples, rng),
            UncertaintyKind::MisRecommendation => {
                let det = detector.ok_or(Error::MissingFeature("detector for MU uncertainty"))?;
                let e_prev = e_prev.ok_or(Error::MissingFeature("previous embedding for MU uncertainty"))?;
                let prev_prior = self.prior(e_prev)?;
                let mut scores = Vec::with_capacity(config.samples);
                for _ in 0..config.samples {
                    let now = self.predict_next_item(e, &prior.sample(rng))?;
                    let before = self.predict_next_item(e_prev, &prev_prior.sample(rng))?;
                    scores.push(det.score_embeddings(&now, &before, None)?);
                }
                Ok(population_variance(&scores))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    /// Restores a mapper saved by [`DistributionMapper::save`]; dims come from
    /// the stored shapes. The result is marked trained.
    pub fn load(path: &Path) -> Result<Self> {
        let loaded = load_checkpoint(path)?;
        let id = loaded
            .id("dm.prior_mu.w")
            .ok_or_else(|| Error::Checkpoint("missing parameter `dm.prior_mu.w`".into()))?;
        let shape = loaded.value(id).shape().to_vec();
        let mut dm = Self::build(shape[0], shape[1], None)?;
        restore_into(&mut dm.store, &loaded)?;
        dm.trained = true;
        Ok(dm)
    }
}

/// Next-item uncertainty: `n` draws of `z` from `latent`, each mapped to
/// `r_hat`, summed per-coordinate population variance.
pub fn nu_uncertainty(dm: &DistributionMapper, e: &[f64], latent: &GaussianLatent, n: usize, rng: &mut Rng) -> Result<f64> {
    let samples = (0..n)
        .map(|_| dm.predict_next_item(e, &latent.sample(rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok(variance_sum(&samples))
}

/// Sequence with its most recent click removed (unchanged when it has
/// a single item). Stands in for the previous step in MU uncertainty.
pub fn previous_sequence(seq: &ClickSequence) -> ClickSequence {
    let items = seq.items();
    if items.len() < 2 {
        return seq.clone();
    }
    ClickSequence::new(items[..items.len() - 1].to_vec(), items.len()).expect("non-empty")
}

/// Uncertainty of a raw click sequence using the bundle's encoder.
pub fn sequence_uncertainty(
    bundle: &ModelBundle,
    dm: &DistributionMapper,
    seq: &ClickSequence,
    detector: Option<&MrdDetector>,
    config: &DmConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let e = bundle.encode(seq)?.into_data();
    let prev = match config.uncertainty {
        UncertaintyKind::MisRecommendation => Some(bundle.encode(&previous_sequence(seq))?.into_data()),
        UncertaintyKind::NextItem => None,
    };
    dm.uncertainty(&e, prev.as_deref(), detector, config, rng)
}

/// One training example: a sequence step with its true next item and the
/// labeled candidates shown there.
#[derive(Clone, Debug)]
pub struct DmExample {
    /// Backbone sequence embedding.
    pub e: Vec<f64>,
    /// Embedding of the clicked next item.
    pub r: Vec<f64>,
    /// `Ω(x)` for each candidate, `C x N`.
    pub omega: Tensor,
    /// Classifier generated from the same sequence.
    pub layers: DynamicParams,
    pub labels: Vec<f64>,
}

/// Builds examples from every session step with exactly one positive.
pub fn dm_examples(bundle: &ModelBundle, sessions: &[Session]) -> Result<Vec<DmExample>> {
    let table = bundle.store.value(bundle.backbone().item_table());
    let dim = bundle.config().dim;
    let mut out = Vec::new();
    for step in sessions.iter().flat_map(|s| &s.steps) {
        let Some(pos) = step.labels.iter().position(|&y| y == 1) else {
            continue;
        };
        let item = step.candidates[pos];
        out.push(DmExample {
            e: bundle.encode(&step.sequence)?.into_data(),
            r: table.data()[item * dim..(item + 1) * dim].to_vec(),
            omega: bundle.features(&step.sequence, &step.candidates)?,
            layers: bundle.generate_params(&step.sequence)?,
            labels: step.labels.iter().map(|&y| f64::from(y)).collect(),
        });
    }
    Ok(out)
}

/// Loss components as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct DmLoss {
    pub total: Var,
    pub rec: Var,
    pub dist: Var,
}

/// Mean of `KL(q || p)` over rows, as a graph node.
pub fn kl_graph(g: &mut Graph<'_>, q: (Var, Var), p: (Var, Var)) -> Result<Var> {
    let (mq, sq) = q;
    let (mp, sp) = p;
    let rows = g.value(mq).shape()[0] as f64;
    let ln_sp = g.ln(sp)?;
    let ln_sq = g.ln(sq)?;
    let log_ratio = g.sub(ln_sp, ln_sq)?;
    let sq2 = g.square(sq)?;
    let diff = g.sub(mq, mp)?;
    let diff2 = g.square(diff)?;
    let num = g.add(sq2, diff2)?;
    let inv = g.scale(ln_sp, -2.0)?;
    let inv = g.exp(inv)?;
    let frac = g.mul(num, inv)?;
    let frac = g.scale(frac, 0.5)?;
    let terms = g.add(log_ratio, frac)?;
    let terms = g.offset(terms, -0.5)?;
    let total = g.sum(terms)?;
    g.scale(total, 1.0 / rows)
}

/// `L_rec + beta * KL(Q || P)` over a batch, with `z` drawn from the
/// posterior by reparameterization (`eps` from `rng`, one draw per example).
pub fn dm_loss(
    dm: &DistributionMapper,
    g: &mut Graph<'_>,
    batch: &[DmExample],
    config: &DmConfig,
    rng: &mut Rng,
) -> Result<DmLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("distribution mapper batch"));
    }
    let n = dm.dim;
    let b = batch.len();
    let e = g.input(Tensor::new(vec![b, n], batch.iter().flat_map(|x| x.e.iter().copied()).collect())?)?;
    let r = g.input(Tensor::new(vec![b, n], batch.iter().flat_map(|x| x.r.iter().copied()).collect())?)?;
    let prior = dm.prior_graph(g, e)?;
    let post = dm.posterior_graph(g, e, r)?;
    let eps = g.input(rng.normal_tensor(&[b, dm.latent], 1.0))?;
    let noise = g.mul(post.1, eps)?;
    let z = g.add(post.0, noise)?;
    let r_hat = dm.predict_graph(g, e, z)?;
    let rec = match config.loss {
        RecLoss::Regression => {
            let diff = g.sub(r_hat, r)?;
            let sq = g.square(diff)?;
            g.mean(sq)?
        }
        RecLoss::Classification => {
            let total: usize = batch.iter().map(|x| x.labels.len()).sum();
            let mut acc: Option<Var> = None;
            for (i, ex) in batch.iter().enumerate() {
                let omega = g.input(ex.omega.clone())?;
                let row = g.slice_rows(r_hat, i, 1)?;
                let fused = dm.fuse_graph(g, omega, row)?;
                let layers = ex.layers.to_graph(g)?;
                let p = classify(g, fused, &layers)?;
                let l = g.bce(p, &ex.labels)?;
                let l = g.scale(l, ex.labels.len() as f64 / total as f64)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
            acc.expect("non-empty batch")
        }
    };
    let dist = kl_graph(g, post, prior)?;
    let weighted = g.scale(dist, config.beta)?;
    let total = g.add(rec, weighted)?;
    Ok(DmLoss { total, rec, dist })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for DmTrainConfig {
    fn default() -> Self {
        DmTrainConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.005,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DmTrainReport {
    pub epoch_losses: Vec<f64>,
    pub epoch_rec: Vec<f64>,
    pub epoch_dist: Vec<f64>,
    pub steps: usize,
}

/// Fits a mapper on prepared examples.
pub fn train_dm(
    examples: &[DmExample],
    dim: usize,
    config: &DmConfig,
    train: &DmTrainConfig,
) -> Result<(DistributionMapper, DmTrainReport)> {
    let problems = config.diagnostics();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if examples.is_empty() {
        return Err(Error::Empty("distribution mapper examples"));
    }
    if train.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut dm = DistributionMapper::init(dim, config.latent_dim, train.seed)?;
    let layout = dm.clone();
    let mut opt = Optimizer::new(train.optimizer, train.learning_rate);
    let root = Rng::new(train.seed).derive(&[0xd4]);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = DmTrainReport::default();
    for epoch in 0..train.epochs {
        root.derive(&[epoch as u64]).shuffle(&mut order);
        let mut noise = root.derive(&[epoch as u64, 1]);
        let (mut tot, mut rec, mut dist, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<DmExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            dm.store.zero_grads();
            let (params, mut grads) = dm.store.split_mut();
            let mut g = Graph::new(params);
            let loss = dm_loss(&layout, &mut g, &batch, config, &mut noise)?;
            tot += g.scalar(loss.total);
            rec += g.scalar(loss.rec);
            dist += g.scalar(loss.dist);
            batches += 1;
            g.backward(loss.total, &mut grads)?;
            opt.step(&mut dm.store, None);
            report.steps += 1;
        }
        report.epoch_losses.push(tot / batches as f64);
        report.epoch_rec.push(rec / batches as f64);
        report.epoch_dist.push(dist / batches as f64);
    }
    dm.trained = true;
    Ok((dm, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::grad_check;

    const SOFTPLUS0: f64 = std::f64::consts::LN_2;

    fn set(dm: &mut DistributionMapper, block: &str, w: Vec<f64>, b: Vec<f64>) {
        let (wid, bid) = dm.block(block).unwrap();
        let ws = dm.store.value(wid).shape().to_vec();
        let bs = dm.store.value(bid).shape().to_vec();
        dm.store.set(wid, Tensor::new(ws, w).unwrap()).unwrap();
        dm.store.set(bid, Tensor::new(bs, b).unwrap()).unwrap();
    }

    #[test]
    fn zero_heads_give_closed_form() {
        let dm = DistributionMapper::zeros(3, 4).unwrap();
        let p = dm.prior(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(p.mu, vec![0.0; 4]);
        for s in &p.sigma {
            assert!((s - (SOFTPLUS0 + SIGMA_MIN)).abs() < 1e-12);
            assert!((s - 0.6933).abs() < 1e-4);
        }
        let q = dm.posterior(&[0.3, -1.0, 2.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(q, p);
        assert_eq!(dm.predict_next_item(&[1.0, 2.0, 3.0], &[1.0; 4]).unwrap(), vec![0.0; 3]);
        assert!(dm.predict_next_item(&[1.0, 2.0, 3.0], &[1.0; 3]).is_err());
    }

    #[test]
    fn one_dim_hand_example() {
        let mut dm = DistributionMapper::zeros(1, 1).unwrap();
        set(&mut dm, "prior_mu", vec![2.0], vec![0.5]);
        set(&mut dm, "prior_sigma", vec![-1.0], vec![0.0]);
        let p = dm.prior(&[1.5]).unwrap();
        // mu = 2 * 1.5 + 0.5; sigma = ln(1 + e^-1.5) + 1e-4.
        assert!((p.mu[0] - 3.5).abs() < 1e-12);
        assert!((p.sigma[0] - ((1.0 + (-1.5f64).exp()).ln() + 1e-4)).abs() < 1e-12);

        set(&mut dm, "z_proj", vec![3.0], vec![1.0]);
        set(&mut dm, "out", vec![0.5, 2.0], vec![-1.0]);
        // h = 3 * 2 + 1 = 7; r_hat = 0.5 * 4 + 2 * 7 - 1 = 15.
        assert_eq!(dm.predict_next_item(&[4.0], &[2.0]).unwrap(), vec![15.0]);
    }

    #[test]
    fn random_init_is_sensitive_and_deterministic() {
        let dm = DistributionMapper::init(4, 6, 1).unwrap();
        let e = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(dm.prior(&e).unwrap(), dm.prior(&e).unwrap());
        let a = dm.posterior(&e, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = dm.posterior(&e, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_ne!(a, b);
        let z1 = dm.predict_next_item(&e, &[1.0; 6]).unwrap();
        let z2 = dm.predict_next_item(&e, &[-1.0; 6]).unwrap();
        assert_ne!(z1, z2);
    }

    #[test]
    fn kl_examples() {
        let q = GaussianLatent::new(vec![1.0], vec![1.0]).unwrap();
        let p = GaussianLatent::new(vec![0.0], vec![1.0]).unwrap();
        assert!((kl_diag_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(kl_diag_gaussian(&q, &q).unwrap(), 0.0);
        let mut rng = Rng::new(5);
        for _ in 0..1000 {
            let mut g = || GaussianLatent::new(vec![rng.normal(); 3], vec![0.1 + rng.uniform() * 3.0; 3]).unwrap();
            let (a, b) = (g(), g());
            assert!(kl_diag_gaussian(&a, &b).unwrap() >= -1e-12);
        }
        let short = GaussianLatent::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        assert!(kl_diag_gaussian(&q, &short).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        assert_eq!(variance_sum(&[vec![0.0, 0.0], vec![2.0, 2.0]]), 2.0);
        assert_eq!(variance_sum(&[vec![3.0, 1.0]]), 0.0);
        let dm = DistributionMapper::init(2, 3, 2).unwrap();
        let e = [0.5, -0.5];
        let cfg = DmConfig {
            samples: 1,
            ..DmConfig::default()
        };
        assert_eq!(dm.uncertainty(&e, None, None, &cfg, &mut Rng::new(1)).unwrap(), 0.0);
        let degenerate = GaussianLatent::new(vec![0.3; 3], vec![0.0; 3]).unwrap();
        assert_eq!(nu_uncertainty(&dm, &e, &degenerate, 10, &mut Rng::new(1)).unwrap(), 0.0);
        let mu_cfg = DmConfig {
            uncertainty: UncertaintyKind::MisRecommendation,
            ..DmConfig::default()
        };
        assert!(dm.uncertainty(&e, Some(&e), None, &mu_cfg, &mut Rng::new(1)).is_err());
        let det = MrdDetector::init(2, 4, false, 0).unwrap();
        let u = dm.uncertainty(&e, Some(&[0.1, 0.1]), Some(&det), &mu_cfg, &mut Rng::new(1)).unwrap();
        assert!(u >= 0.0);
    }

    #[test]
    fn doubling_sigma_at_least_doubles_uncertainty() {
        let dm = DistributionMapper::init(3, 4, 7).unwrap();
        let e = [0.2, 0.1, -0.4];
        let base = GaussianLatent::new(vec![0.1; 4], vec![0.5; 4]).unwrap();
        let doubled = GaussianLatent::new(vec![0.1; 4], vec![1.0; 4]).unwrap();
        let (mut a, mut b) = (0.0, 0.0);
        for seed in 0..1000 {
            a += nu_uncertainty(&dm, &e, &base, 10, &mut Rng::new(seed)).unwrap();
            b += nu_uncertainty(&dm, &e, &doubled, 10, &mut Rng::new(seed)).unwrap();
        }
        assert!(b >= 2.0 * a, "{a} {b}");
    }

    fn toy_batch(dim: usize) -> Vec<DmExample> {
        let mut rng = Rng::new(11);
        let mut layers = DynamicParams::zeros(dim);
        for l in &mut layers.layers {
            for v in l.weight.data_mut() {
                *v = rng.normal() * 0.5;
            }
        }
        (0..3)
            .map(|i| DmExample {
                e: (0..dim).map(|_| rng.normal()).collect(),
                r: (0..dim).map(|_| rng.normal()).collect(),
                omega: rng.normal_tensor(&[2, dim], 0.7),
                layers: layers.clone(),
                labels: vec![1.0, (i % 2) as f64],
            })
            .collect()
    }

    #[test]
    fn loss_examples() {
        let dm = DistributionMapper::init(2, 3, 1).unwrap();
        let batch = toy_batch(2);
        let cfg = DmConfig {
            beta: 0.0,
            latent_dim: 3,
            ..DmConfig::default()
        };
        let mut g = Graph::new(dm.store.params());
        let l = dm_loss(&dm, &mut g, &batch, &cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(g.scalar(l.total), g.scalar(l.rec));

        // Prior copied from the posterior's sequence half with zero weights on
        // the next-item half: identical Gaussians, zero KL.
        let mut same = DistributionMapper::zeros(2, 3).unwrap();
        let mut rng = Rng::new(4);
        let wm: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let ws: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        set(&mut same, "prior_mu", wm.clone(), vec![0.1; 3]);
        set(&mut same, "prior_sigma", ws.clone(), vec![0.2; 3]);
        set(&mut same, "post_mu", [wm, vec![0.0; 6]].concat(), vec![0.1; 3]);
        set(&mut same, "post_sigma", [ws, vec![0.0; 6]].concat(), vec![0.2; 3]);
        let mut g = Graph::new(same.store.params());
        let l = dm_loss(&same, &mut g, &batch, &DmConfig { latent_dim: 3, ..cfg.clone() }, &mut Rng::new(1)).unwrap();
        assert!(g.scalar(l.dist).abs() < 1e-12);

        // Zero dynamic classifier: p = 0.5 everywhere.
        let zero_batch: Vec<DmExample> = batch
            .iter()
            .map(|x| DmExample {
                layers: DynamicParams::zeros(2),
                labels: vec![1.0, 1.0],
                ..x.clone()
            })
            .collect();
        let mut g = Graph::new(dm.store.params());
        let l = dm_loss(&dm, &mut g, &zero_batch, &cfg, &mut Rng::new(1)).unwrap();
        assert!((g.scalar(l.rec) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for loss in [RecLoss::Classification, RecLoss::Regression] {
            let mut dm = DistributionMapper::init(2, 2, 3).unwrap();
            let layout = dm.clone();
            let batch = toy_batch(2);
            let cfg = DmConfig {
                latent_dim: 2,
                loss,
                ..DmConfig::default()
            };
            let build = |g: &mut Graph<'_>| Ok(dm_loss(&layout, g, &batch, &cfg, &mut Rng::new(8))?.total);
            let err = grad_check(&build, &mut dm.store, 1e-5).unwrap();
            assert!(err < 1e-3, "{loss:?}: {err}");
        }
    }

    #[test]
    fn kl_term_decreases_with_training() {
        let mut decreased = 0;
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            let examples: Vec<DmExample> = (0..16)
                .map(|_| DmExample {
                    e: (0..2).map(|_| rng.normal()).collect(),
                    r: (0..2).map(|_| rng.normal()).collect(),
                    omega: Tensor::zeros(&[1, 2]),
                    layers: DynamicParams::zeros(2),
                    labels: vec![1.0],
                })
                .collect();
            let cfg = DmConfig {
                latent_dim: 2,
                loss: RecLoss::Regression,
                beta: 1.0,
                ..DmConfig::default()
            };
            let train = DmTrainConfig {
                epochs: 500,
                batch_size: 16,
                learning_rate: 0.01,
                seed,
                ..DmTrainConfig::default()
            };
            let (_, report) = train_dm(&examples, 2, &cfg, &train).unwrap();
            assert_eq!(report.steps, 500);
            if report.epoch_dist.last() < report.epoch_dist.first() {
                decreased += 1;
            }
        }
        assert!(decreased >= 9, "{decreased}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dm = DistributionMapper::init(3, 5, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dm.ckpt");
        dm.save(&path).unwrap();
        let back = DistributionMapper::load(&path).unwrap();
        assert_eq!(back.latent_dim(), 5);
        assert_eq!(back.store.checksum(), dm.store.checksum());
    }
}
