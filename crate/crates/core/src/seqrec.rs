//! Sequential recommendation backbone and the dynamic classifier.
//!
//! The backbone is split the same way the cloud model is deployed: static
//! layers (item embeddings, sequence encoder, feature projection) are trained
//! once in the cloud, while the two fully connected classifier layers are
//! dynamic and filled per request by the generator.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernel::{init_matrix, logistic, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Time-ordered click history, most recent item last.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClickSequence(Vec<usize>);

impl ClickSequence {
    /// Keeps the most recent `max_len` items. Empty sequences are rejected.
    pub fn new(items: impl Into<Vec<usize>>, max_len: usize) -> Result<Self> {
        let mut items = items.into();
        if items.is_empty() {
            return Err(Error::Empty("click sequence"));
        }
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        if items.len() > max_len {
            items.drain(..items.len() - max_len);
        }
        Ok(ClickSequence(items))
    }

    pub fn items(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("click sequences are non-empty")
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&i| i >= vocab) {
            Some(&item) => Err(Error::OutOfVocabulary { item, vocab }),
            None => Ok(()),
        }
    }

    /// Comma-joined ids, as used by the TSV formats.
    pub fn to_csv(&self) -> String {
        self.0
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_csv(text: &str, max_len: usize) -> std::result::Result<Self, String> {
        let items = text
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad item id `{t}`")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        ClickSequence::new(items, max_len).map_err(|e| e.to_string())
    }
}

/// One labeled sample: a candidate item shown after a click sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub candidate: usize,
    pub sequence: ClickSequence,
    pub label: u8,
}

impl Interaction {
    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Attention-weighted mean pooling against the candidate item.
    MeanPoolAttention,
    /// Single tanh recurrent cell over the sequence.
    Recurrent,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::MeanPoolAttention => "mean-pool-attention",
            EncoderKind::Recurrent => "recurrent",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean-pool-attention" | "attention" => Ok(EncoderKind::MeanPoolAttention),
            "recurrent" | "rnn" => Ok(EncoderKind::Recurrent),
            other => Err(format!("unknown encoder `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab: usize,
    pub dim: usize,
    pub encoder: EncoderKind,
    pub max_len: usize,
}

impl BackboneConfig {
    pub fn new(vocab: usize) -> Self {
        BackboneConfig {
            vocab,
            dim: 32,
            encoder: EncoderKind::MeanPoolAttention,
            max_len: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.max_len == 0 || self.vocab == 0 {
            return Err(Error::InvalidArgument(format!(
                "backbone needs vocab, dim and max_len >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Item embedding table plus one of the two encoder bodies.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    kind: EncoderKind,
    dim: usize,
    vocab: usize,
    table: ParamId,
    /// Projection (mean-pool) or input weights (recurrent).
    w_in: ParamId,
    /// Recurrent weights; absent for mean-pool.
    w_rec: Option<ParamId>,
    bias: ParamId,
}

impl SequenceEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        kind: EncoderKind,
        vocab: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let table = store.add(
            format!("{prefix}.item_embedding"),
            rng.normal_tensor(&[vocab, dim], 1.0 / (dim as f64).sqrt()),
        )?;
        let (w_in, w_rec) = match kind {
            EncoderKind::MeanPoolAttention => (
                store.add(format!("{prefix}.projection"), Tensor::identity(dim))?,
                None,
            ),
            EncoderKind::Recurrent => (
                store.add(format!("{prefix}.w_input"), init_matrix(rng, dim, dim))?,
                Some(store.add(
                    format!("{prefix}.w_recurrent"),
                    init_matrix(rng, dim, dim),
                )?),
            ),
        };
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, dim]))?;
        Ok(SequenceEncoder {
            kind,
            dim,
            vocab,
            table,
            w_in,
            w_rec,
            bias,
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    /// Parameter handles of the projection and bias, for fixtures that need
    /// to hand-set them.
    pub fn projection(&self) -> (ParamId, ParamId) {
        (self.w_in, self.bias)
    }

    /// Sequence embedding, `1 x dim`. The mean-pool kind uses uniform
    /// weights here since no candidate is available.
    pub fn encode(&self, g: &mut Graph<'_>, seq: &ClickSequence) -> Result<Var> {
        seq.validate(self.vocab)?;
        let table = g.param(self.table);
        let x = g.embedding(table, seq.items())?;
        match self.kind {
            EncoderKind::MeanPoolAttention => {
                let pooled = g.mean_rows(x)?;
                self.project(g, pooled)
            }
            EncoderKind::Recurrent => {
                let w_in = g.param(self.w_in);
                let w_rec = g.param(self.w_rec.expect("recurrent encoder has w_rec"));
                let bias = g.param(self.bias);
                let xw = g.matmul(x, w_in)?;
                let mut h: Option<Var> = None;
                for i in 0..seq.len() {
                    let mut pre = g.slice_rows(xw, i, 1)?;
                    if let Some(prev) = h {
                        let rec = g.matmul(prev, w_rec)?;
                        pre = g.add(pre, rec)?;
                    }
                    let pre = g.add_row(pre, bias)?;
                    h = Some(g.tanh(pre)?);
                }
                Ok(h.expect("non-empty sequence"))
            }
        }
    }

    fn project(&self, g: &mut Graph<'_>, pooled: Var) -> Result<Var> {
        let w = g.param(self.w_in);
        let b = g.param(self.bias);
        let p = g.matmul(pooled, w)?;
        g.add_row(p, b)
    }

    /// Candidate-aware sequence embeddings, one row per candidate for the
    /// mean-pool kind (attention against each candidate), or a single row
    /// for the recurrent kind.
    fn encode_against(&self, g: &mut Graph<'_>, seq: &ClickSequence, cand: Var) -> Result<Var> {
        match self.kind {
            EncoderKind::Recurrent => self.encode(g, seq),
            EncoderKind::MeanPoolAttention => {
                seq.validate(self.vocab)?;
                let table = g.param(self.table);
                let s = g.embedding(table, seq.items())?;
                let st = g.transpose(s)?;
                let scores = g.matmul(cand, st)?;
                let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt())?;
                let alpha = g.softmax_rows(scores)?;
                let pooled = g.matmul(alpha, s)?;
                self.project(g, pooled)
            }
        }
    }
}

/// Static part of the on-device model: `Ω(x)` producing classifier inputs.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    encoder: SequenceEncoder,
    w_seq: ParamId,
    w_cand: ParamId,
    bias: ParamId,
}

impl Backbone {
    pub fn init(store: &mut ParamStore, prefix: &str, config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let n = config.dim;
        let encoder = SequenceEncoder::init(store, &format!("{prefix}.encoder"), config.encoder, config.vocab, n, rng)?;
        let w_seq = store.add(format!("{prefix}.w_seq"), init_matrix(rng, n, n))?;
        let w_cand = store.add(format!("{prefix}.w_cand"), init_matrix(rng, n, n))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, n]))?;
        Ok(Backbone {
            config,
            encoder,
            w_seq,
            w_cand,
            bias,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn encoder(&self) -> &SequenceEncoder {
        &self.encoder
    }

    pub fn item_table(&self) -> ParamId {
        self.encoder.table
    }

    pub fn encode(&self, g: &mut Graph<'_>, seq: &ClickSequence) -> Result<Var> {
        self.encoder.encode(g, seq)
    }

    /// `Ω(x)` for every candidate: `tanh(enc W_seq + emb(cand) W_cand + b)`,
    /// shape `candidates.len() x dim`.
    pub fn features(&self, g: &mut Graph<'_>, seq: &ClickSequence, candidates: &[usize]) -> Result<Var> {
        if let Some(&item) = candidates.iter().find(|&&c| c >= self.config.vocab) {
            return Err(Error::OutOfVocabulary {
                item,
                vocab: self.config.vocab,
            });
        }
        let table = g.param(self.encoder.table);
        let cand = g.embedding(table, candidates)?;
        let enc = self.encoder.encode_against(g, seq, cand)?;
        let w_seq = g.param(self.w_seq);
        let w_cand = g.param(self.w_cand);
        let bias = g.param(self.bias);
        let seq_part = g.matmul(enc, w_seq)?;
        let cand_part = g.matmul(cand, w_cand)?;
        let sum = if g.value(seq_part).shape()[0] == candidates.len() {
            g.add(cand_part, seq_part)?
        } else {
            g.add_row(cand_part, seq_part)?
        };
        let pre = g.add_row(sum, bias)?;
        g.tanh(pre)
    }
}

/// Shapes `(N_in, N_out)` of the dynamic classifier layers: `N -> N -> 1`.
pub fn classifier_shapes(dim: usize) -> [(usize, usize); 2] {
    [(dim, dim), (dim, 1)]
}

/// One fully connected layer with weight `N_in x N_out` and bias `1 x N_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-request classifier weights `K^(n)` and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicParams {
    pub layers: Vec<DenseLayer>,
}

impl DynamicParams {
    pub fn zeros(dim: usize) -> Self {
        DynamicParams {
            layers: classifier_shapes(dim)
                .iter()
                .map(|&(i, o)| DenseLayer {
                    weight: Tensor::zeros(&[i, o]),
                    bias: Tensor::zeros(&[1, o]),
                })
                .collect(),
        }
    }

    pub fn check_shapes(&self, dim: usize) -> Result<()> {
        let expected = classifier_shapes(dim);
        if self.layers.len() != expected.len() {
            return Err(shape_err(
                "dynamic classifier",
                format!("{} layers, expected {}", self.layers.len(), expected.len()),
            ));
        }
        for (n, (layer, &(i, o))) in self.layers.iter().zip(&expected).enumerate() {
            if layer.weight.shape() != [i, o] || layer.bias.shape() != [1, o] {
                return Err(shape_err(
                    "dynamic classifier",
                    format!(
                        "layer {n}: weight {:?} bias {:?}, expected [{i}, {o}] and [1, {o}]",
                        layer.weight.shape(),
                        layer.bias.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Adds the layers to a graph as constants.
    pub fn to_graph(&self, g: &mut Graph<'_>) -> Result<Vec<(Var, Var)>> {
        self.layers
            .iter()
            .map(|l| Ok((g.input(l.weight.clone())?, g.input(l.bias.clone())?)))
            .collect()
    }

    /// Classifier logit for one feature row without building a graph.
    pub fn logit(&self, features: &[f64]) -> f64 {
        let mut x = features.to_vec();
        let last = self.layers.len() - 1;
        for (n, layer) in self.layers.iter().enumerate() {
            let (i, o) = layer.weight.dims2().expect("2-d weight");
            debug_assert_eq!(x.len(), i);
            let w = layer.weight.data();
            let mut out = layer.bias.data().to_vec();
            for (p, xv) in x.iter().enumerate() {
                if *xv == 0.0 {
                    continue;
                }
                for (oq, wv) in out.iter_mut().zip(&w[p * o..(p + 1) * o]) {
                    *oq += xv * wv;
                }
            }
            if n != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = out;
        }
        x[0]
    }

    pub fn probability(&self, features: &[f64]) -> f64 {
        logistic(self.logit(features))
    }
}

/// `f_rec`: hidden layers use ReLU, the last layer yields one logit per
/// row, mapped through a sigmoid. Returns probabilities `m x 1`.
pub fn classify(g: &mut Graph<'_>, features: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let mut x = features;
    for (n, (w, b)) in layers.iter().enumerate() {
        let h = g.matmul(x, *w)?;
        let h = g.add_row(h, *b)?;
        x = if n + 1 < layers.len() { g.relu(h)? } else { h };
    }
    g.sigmoid(x)
}

/// `ŷ = 1` iff `p >= 0.5`.
pub fn hard_decision(probability: f64) -> u8 {
    u8::from(probability >= 0.5)
}

/// Click-through probability of one interaction under the given dynamic
/// classifier.
pub fn predict_ctr(
    backbone: &Backbone,
    store: &ParamStore,
    interaction: &Interaction,
    dynamic: &DynamicParams,
) -> Result<f64> {
    dynamic.check_shapes(backbone.config.dim)?;
    let mut g = Graph::new(store.params());
    let feats = backbone.features(&mut g, &interaction.sequence, &[interaction.candidate])?;
    let layers = dynamic.to_graph(&mut g)?;
    let p = classify(&mut g, feats, &layers)?;
    Ok(g.scalar(p))
}

/// Backbone sequence embedding as a plain vector.
pub fn encode_sequence(backbone: &Backbone, store: &ParamStore, seq: &ClickSequence) -> Result<Tensor> {
    let mut g = Graph::new(store.params());
    let v = backbone.encode(&mut g, seq)?;
    Ok(g.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_pool_fixture(vocab: usize, dim: usize) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut cfg = BackboneConfig::new(vocab);
        cfg.dim = dim;
        let bb = Backbone::init(&mut store, "bb", cfg, &mut Rng::new(1)).unwrap();
        (store, bb)
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let seq = ClickSequence::new((0..40).collect::<Vec<_>>(), 30).unwrap();
        assert_eq!(seq.items(), &(10..40).collect::<Vec<_>>()[..]);
        assert!(ClickSequence::new(vec![], 30).is_err());
    }

    #[test]
    fn single_item_mean_pool_is_the_embedding_row() {
        let (store, bb) = mean_pool_fixture(5, 4);
        let seq = ClickSequence::new(vec![3], 30).unwrap();
        let enc = encode_sequence(&bb, &store, &seq).unwrap();
        assert_eq!(enc.data(), store.value(bb.item_table()).row_slice(3));
    }

    #[test]
    fn two_item_mean_pool_hand_computed() {
        let (mut store, bb) = mean_pool_fixture(2, 2);
        store
            .set(bb.item_table(), Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, -4.0]).unwrap())
            .unwrap();
        let seq = ClickSequence::new(vec![0, 1], 30).unwrap();
        let enc = encode_sequence(&bb, &store, &seq).unwrap();
        assert_eq!(enc.data(), &[2.0, -1.0]);
        assert_eq!(enc, encode_sequence(&bb, &store, &seq).unwrap());
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let (store, bb) = mean_pool_fixture(5, 4);
        let seq = ClickSequence::new(vec![7], 30).unwrap();
        assert!(matches!(
            encode_sequence(&bb, &store, &seq),
            Err(Error::OutOfVocabulary { item: 7, .. })
        ));
    }

    #[test]
    fn zero_dynamic_params_give_one_half() {
        let (store, bb) = mean_pool_fixture(6, 4);
        let it = Interaction {
            user: 0,
            candidate: 2,
            sequence: ClickSequence::new(vec![1, 4, 5], 30).unwrap(),
            label: 1,
        };
        let p = predict_ctr(&bb, &store, &it, &DynamicParams::zeros(4)).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn one_dim_classifier_toy() {
        let dynamic = DynamicParams {
            layers: vec![
                DenseLayer {
                    weight: Tensor::scalar(2.0),
                    bias: Tensor::scalar(-1.0),
                },
                DenseLayer {
                    weight: Tensor::scalar(1.0),
                    bias: Tensor::scalar(0.0),
                },
            ],
        };
        let p = dynamic.probability(&[1.0]);
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);

        let store = ParamStore::new();
        let mut g = Graph::new(store.params());
        let x = g.input(Tensor::scalar(1.0)).unwrap();
        let layers = dynamic.to_graph(&mut g).unwrap();
        let pv = classify(&mut g, x, &layers).unwrap();
        assert_eq!(g.scalar(pv), p);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (store, bb) = mean_pool_fixture(6, 4);
        let it = Interaction {
            user: 0,
            candidate: 2,
            sequence: ClickSequence::new(vec![1], 30).unwrap(),
            label: 0,
        };
        assert!(predict_ctr(&bb, &store, &it, &DynamicParams::zeros(3)).is_err());
    }

    #[test]
    fn hard_decision_tie_goes_to_one() {
        assert_eq!(hard_decision(0.7), 1);
        assert_eq!(hard_decision(0.3), 0);
        assert_eq!(hard_decision(0.5), 1);
    }

    #[test]
    fn recurrent_encoder_is_order_sensitive() {
        let mut store = ParamStore::new();
        let mut cfg = BackboneConfig::new(8);
        cfg.dim = 4;
        cfg.encoder = EncoderKind::Recurrent;
        let bb = Backbone::init(&mut store, "bb", cfg, &mut Rng::new(9)).unwrap();
        let a = encode_sequence(&bb, &store, &ClickSequence::new(vec![1, 2], 30).unwrap()).unwrap();
        let b = encode_sequence(&bb, &store, &ClickSequence::new(vec![2, 1], 30).unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mean_pool_is_permutation_invariant() {
        let (store, bb) = mean_pool_fixture(8, 4);
        let a = encode_sequence(&bb, &store, &ClickSequence::new(vec![1, 2, 5], 30).unwrap()).unwrap();
        let b = encode_sequence(&bb, &store, &ClickSequence::new(vec![5, 1, 2], 30).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
