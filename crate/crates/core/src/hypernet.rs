//! Cloud-side parameter generator and joint training with the backbone.
//!
//! The generator encodes the real-time click sequence with its own encoder
//! (same family as the backbone, separate weights) and maps the encoding
//! through one linear head per dynamic layer. Each head emits the flattened
//! `N_in x N_out` weight matrix followed by the `N_out` bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    load_checkpoint, restore_into, save_checkpoint, Graph, Optimizer, OptimizerKind, ParamId,
    ParamStore, Rng, Tensor, Var,
};
use crate::seqrec::{
    classifier_shapes, classify, Backbone, BackboneConfig, ClickSequence, DenseLayer,
    DynamicParams, Interaction, SequenceEncoder,
};

#[derive(Clone, Debug)]
struct Head {
    weight: ParamId,
    bias: ParamId,
    n_in: usize,
    n_out: usize,
}

/// `g(·) = L_layer(E_shared(·))` for every dynamic layer.
#[derive(Clone, Debug)]
pub struct Generator {
    encoder: SequenceEncoder,
    heads: Vec<Head>,
}

impl Generator {
    pub fn init(store: &mut ParamStore, prefix: &str, config: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        let encoder = SequenceEncoder::init(
            store,
            &format!("{prefix}.encoder"),
            config.encoder,
            config.vocab,
            config.dim,
            rng,
        )?;
        let n = config.dim;
        let heads = classifier_shapes(n)
            .iter()
            .enumerate()
            .map(|(i, &(n_in, n_out))| {
                let width = n_in * n_out + n_out;
                let std = 1.0 / (n as f64).sqrt();
                Ok(Head {
                    weight: store.add(format!("{prefix}.head{i}.weight"), rng.normal_tensor(&[n, width], std))?,
                    bias: store.add(format!("{prefix}.head{i}.bias"), Tensor::zeros(&[1, width]))?,
                    n_in,
                    n_out,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Generator { encoder, heads })
    }

    pub fn encoder(&self) -> &SequenceEncoder {
        &self.encoder
    }

    /// Output width of each head: `N_in * N_out + N_out`.
    pub fn head_widths(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.n_in * h.n_out + h.n_out).collect()
    }

    pub fn head_params(&self) -> Vec<(ParamId, ParamId)> {
        self.heads.iter().map(|h| (h.weight, h.bias)).collect()
    }

    /// Dynamic layers as graph nodes. Head outputs are scaled by
    /// `1 / sqrt(N_in)`.
    pub fn generate(&self, g: &mut Graph<'_>, seq: &ClickSequence) -> Result<Vec<(Var, Var)>> {
        let e = self.encoder.encode(g, seq)?;
        self.heads
            .iter()
            .map(|head| {
                let w = g.param(head.weight);
                let b = g.param(head.bias);
                let h = g.matmul(e, w)?;
                let h = g.add_row(h, b)?;
                let h = g.scale(h, 1.0 / (head.n_in as f64).sqrt())?;
                let k = g.slice_cols(h, 0, head.n_in * head.n_out)?;
                let k = g.reshape(k, head.n_in, head.n_out)?;
                let bias = g.slice_cols(h, head.n_in * head.n_out, head.n_out)?;
                Ok((k, bias))
            })
            .collect()
    }
}

/// Static backbone, generator, and their shared parameter store.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    config: BackboneConfig,
    pub store: ParamStore,
    backbone: Backbone,
    generator: Generator,
    trained: bool,
}

impl ModelBundle {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed).derive(&[0xb0]);
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&mut store, "backbone", config, &mut rng)?;
        let generator = Generator::init(&mut store, "generator", &config, &mut rng)?;
        Ok(ModelBundle {
            config,
            store,
            backbone,
            generator,
            trained: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// Parameters owned by the backbone (prefix `backbone.`).
    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|id| self.store.name(*id).starts_with("backbone."))
            .collect()
    }

    pub fn generator_params(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|id| self.store.name(*id).starts_with("generator."))
            .collect()
    }

    /// Generates the dynamic classifier for a click sequence.
    pub fn generate_params(&self, seq: &ClickSequence) -> Result<DynamicParams> {
        let mut g = Graph::new(self.store.params());
        let layers = self.generator.generate(&mut g, seq)?;
        Ok(DynamicParams {
            layers: layers
                .into_iter()
                .map(|(k, b)| DenseLayer {
                    weight: g.value(k).clone(),
                    bias: g.value(b).clone(),
                })
                .collect(),
        })
    }

    /// Backbone sequence embedding, `1 x N`.
    pub fn encode(&self, seq: &ClickSequence) -> Result<Tensor> {
        let mut g = Graph::new(self.store.params());
        let v = self.backbone.encode(&mut g, seq)?;
        Ok(g.value(v).clone())
    }

    /// `Ω(x)` for a batch of candidates sharing one sequence, `C x N`.
    pub fn features(&self, seq: &ClickSequence, candidates: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(self.store.params());
        let v = self.backbone.features(&mut g, seq, candidates)?;
        Ok(g.value(v).clone())
    }

    /// Click probability of `interaction` using the given dynamic layers.
    pub fn predict(&self, interaction: &Interaction, dynamic: &DynamicParams) -> Result<f64> {
        crate::seqrec::predict_ctr(&self.backbone, &self.store, interaction, dynamic)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    /// Loads values saved by [`ModelBundle::save`] into a bundle built from
    /// the same configuration. The result is marked trained.
    pub fn load(config: BackboneConfig, path: &Path) -> Result<Self> {
        let mut bundle = ModelBundle::new(config, 0)?;
        let loaded = load_checkpoint(path)?;
        restore_into(&mut bundle.store, &loaded)?;
        bundle.trained = true;
        Ok(bundle)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 256,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss observed during each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Interactions sharing one click sequence, scored in one graph.
#[derive(Clone, Debug)]
pub(crate) struct SequenceBatch<'a> {
    pub sequence: &'a ClickSequence,
    pub candidates: Vec<usize>,
    pub labels: Vec<f64>,
}

pub(crate) fn group_by_sequence(history: &[Interaction]) -> Vec<SequenceBatch<'_>> {
    let mut out: Vec<SequenceBatch<'_>> = Vec::new();
    let mut last_user = usize::MAX;
    for it in history {
        match out.last_mut() {
            Some(b) if last_user == it.user && *b.sequence == it.sequence => {
                b.candidates.push(it.candidate);
                b.labels.push(it.label_f64());
            }
            _ => out.push(SequenceBatch {
                sequence: &it.sequence,
                candidates: vec![it.candidate],
                labels: vec![it.label_f64()],
            }),
        }
        last_user = it.user;
    }
    out
}

/// Cross-entropy of one sequence batch through backbone and generator.
pub(crate) fn joint_loss(bundle_parts: (&Backbone, &Generator), g: &mut Graph<'_>, batch: &SequenceBatch<'_>) -> Result<Var> {
    let (backbone, generator) = bundle_parts;
    let layers = generator.generate(g, batch.sequence)?;
    let feats = backbone.features(g, batch.sequence, &batch.candidates)?;
    let p = classify(g, feats, &layers)?;
    g.bce(p, &batch.labels)
}

/// Mean cross-entropy of `data` through backbone and generator, as one graph
/// over the bundle's parameters. This is the objective [`train_joint`]
/// minimizes.
pub fn interaction_loss(bundle: &ModelBundle, g: &mut Graph<'_>, data: &[Interaction]) -> Result<Var> {
    if data.is_empty() {
        return Err(Error::Empty("interactions"));
    }
    let total = data.len() as f64;
    let mut acc: Option<Var> = None;
    for batch in group_by_sequence(data) {
        let loss = joint_loss((&bundle.backbone, &bundle.generator), g, &batch)?;
        let scaled = g.scale(loss, batch.labels.len() as f64 / total)?;
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.expect("non-empty data"))
}

/// Trains backbone and generator together on cross-entropy, by mini-batch
/// gradient descent over interactions.
pub fn train_joint(mut bundle: ModelBundle, history: &[Interaction], config: &TrainConfig) -> Result<(ModelBundle, TrainReport)> {
    if history.is_empty() {
        return Err(Error::Empty("training history"));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let vocab = bundle.config.vocab;
    for it in history {
        it.sequence.validate(vocab)?;
        if it.candidate >= vocab {
            return Err(Error::OutOfVocabulary {
                item: it.candidate,
                vocab,
            });
        }
    }
    let groups = group_by_sequence(history);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let rng = Rng::new(config.seed).derive(&[0x7a]);
    let mut report = TrainReport::default();
    let parts = (bundle.backbone.clone(), bundle.generator.clone());

    for epoch in 0..config.epochs {
        rng.derive(&[epoch as u64]).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        let mut cursor = 0;
        while cursor < order.len() {
            // Fill one mini-batch with whole sequence groups.
            let mut end = cursor;
            let mut batch_n = 0;
            while end < order.len() && (batch_n == 0 || batch_n + groups[order[end]].labels.len() <= config.batch_size) {
                batch_n += groups[order[end]].labels.len();
                end += 1;
            }
            bundle.store.zero_grads();
            for &gi in &order[cursor..end] {
                let batch = &groups[gi];
                let weight = batch.labels.len() as f64 / batch_n as f64;
                let (params, mut grads) = bundle.store.split_mut();
                let mut g = Graph::new(params);
                let loss = joint_loss((&parts.0, &parts.1), &mut g, batch)?;
                epoch_loss += g.scalar(loss) * batch.labels.len() as f64;
                let scaled = g.scale(loss, weight)?;
                g.backward(scaled, &mut grads)?;
            }
            epoch_n += batch_n;
            opt.step(&mut bundle.store, None);
            report.steps += 1;
            cursor = end;
        }
        report.epoch_losses.push(epoch_loss / epoch_n as f64);
    }
    bundle.trained = true;
    Ok((bundle, report))
}

/// Mean cross-entropy and accuracy of the bundle on `data`, with dynamic
/// layers generated from each interaction's own sequence.
pub fn evaluate(bundle: &ModelBundle, data: &[Interaction]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for batch in group_by_sequence(data) {
        let mut g = Graph::new(bundle.store.params());
        let layers = bundle.generator.generate(&mut g, batch.sequence)?;
        let feats = bundle.backbone.features(&mut g, batch.sequence, &batch.candidates)?;
        let p = classify(&mut g, feats, &layers)?;
        for (pv, y) in g.value(p).data().iter().zip(&batch.labels) {
            loss += crate::kernel::binary_cross_entropy(*y, *pv);
            if f64::from(crate::seqrec::hard_decision(*pv)) == *y {
                correct += 1;
            }
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}
