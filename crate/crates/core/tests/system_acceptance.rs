//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::time::Instant;

use ideal::data::{synth_drift_stream, DriftConfig};
use ideal::hypernet::{interaction_loss, train_joint, ModelBundle, TrainConfig};
use ideal::kernel::{grad_check, Graph, OptimizerKind, ParamStore, Rng, Tensor, Var};
use ideal::mapper::{
    dm_loss, kl_diag_gaussian, nu_uncertainty, variance_sum, DistributionMapper, DmConfig, DmExample, GaussianLatent,
    RecLoss,
};
use ideal::metrics::{auc, hitrate_at_k, ndcg_at_k, rank_in_candidates, spearman, uauc, CurveRow, ScoredItem};
use ideal::mrd::{build_mrd_dataset, LagPolicy, MrdDatasetConfig, MrdDetector};
use ideal::policy::Policy;
use ideal::runner::{run, ExperimentConfig, Stage};
use ideal::seqrec::{hard_decision, BackboneConfig, DynamicParams, EncoderKind, Interaction};
use ideal::sim::{calibrated_policy, ReplayWorld, SweepKind, Uncertainty, WorldOptions};

const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn weighted_sum(g: &mut Graph<'_>, out: Var, seed: u64) -> ideal::Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = Rng::new(seed).normal_tensor(&shape, 1.0);
    let w = g.input(w)?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Values bounded away from zero, for kinks and logarithms.
fn away_from_zero(rng: &mut Rng, shape: &[usize], positive: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.2 + rng.uniform();
            if positive || rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn primitive_errors() -> ideal::Result<Vec<(&'static str, f64)>> {
    type Build = Box<dyn Fn(&mut Graph<'_>, &[ideal::kernel::ParamId]) -> ideal::Result<Var>>;
    let mut rng = Rng::new(17);
    let cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("matmul", vec![rng.normal_tensor(&[3, 4], 1.0), rng.normal_tensor(&[4, 2], 1.0)], Box::new(|g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.matmul(a, b)
        })),
        ("add", vec![rng.normal_tensor(&[2, 3], 1.0), rng.normal_tensor(&[2, 3], 1.0)], Box::new(|g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.add(a, b)
        })),
        ("sub", vec![rng.normal_tensor(&[2, 3], 1.0), rng.normal_tensor(&[2, 3], 1.0)], Box::new(|g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.sub(a, b)
        })),
        ("mul", vec![rng.normal_tensor(&[2, 3], 1.0), rng.normal_tensor(&[2, 3], 1.0)], Box::new(|g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.mul(a, b)
        })),
        ("add_row", vec![rng.normal_tensor(&[3, 4], 1.0), rng.normal_tensor(&[1, 4], 1.0)], Box::new(|g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.add_row(a, b)
        })),
        ("scale", vec![rng.normal_tensor(&[2, 3], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.scale(a, -1.7)
        })),
        ("offset", vec![rng.normal_tensor(&[2, 3], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            let o = g.offset(a, 0.3)?;
            g.square(o)
        })),
        ("sigmoid", vec![rng.normal_tensor(&[2, 4], 1.5)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.sigmoid(a)
        })),
        ("tanh", vec![rng.normal_tensor(&[2, 4], 1.5)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.tanh(a)
        })),
        ("relu", vec![away_from_zero(&mut rng, &[2, 5], false)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.relu(a)
        })),
        ("softplus", vec![rng.normal_tensor(&[2, 4], 2.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.softplus(a)
        })),
        ("exp", vec![rng.normal_tensor(&[2, 3], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.exp(a)
        })),
        ("ln", vec![away_from_zero(&mut rng, &[2, 3], true)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.ln(a)
        })),
        ("square", vec![rng.normal_tensor(&[2, 3], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.square(a)
        })),
        ("transpose", vec![rng.normal_tensor(&[2, 3], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.transpose(a)
        })),
        ("embedding", vec![rng.normal_tensor(&[5, 3], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.embedding(a, &[4, 0, 4, 2])
        })),
        ("mean_rows", vec![rng.normal_tensor(&[4, 3], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.mean_rows(a)
        })),
        ("sum", vec![rng.normal_tensor(&[3, 3], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            let s = g.sum(a)?;
            g.square(s)
        })),
        ("mean", vec![rng.normal_tensor(&[3, 3], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            let s = g.mean(a)?;
            g.square(s)
        })),
        ("concat_cols", vec![rng.normal_tensor(&[2, 3], 1.0), rng.normal_tensor(&[2, 2], 1.0)], Box::new(|g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.concat_cols(a, b)
        })),
        ("slice_cols", vec![rng.normal_tensor(&[3, 5], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.slice_cols(a, 1, 3)
        })),
        ("slice_rows", vec![rng.normal_tensor(&[5, 3], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.slice_rows(a, 2, 2)
        })),
        ("reshape", vec![rng.normal_tensor(&[2, 6], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.reshape(a, 4, 3)
        })),
        ("softmax_rows", vec![rng.normal_tensor(&[3, 4], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            g.softmax_rows(a)
        })),
        ("bce", vec![rng.normal_tensor(&[4, 1], 1.0)], Box::new(|g, p| {
            let a = g.param(p[0]);
            let s = g.sigmoid(a)?;
            g.bce(s, &[1.0, 0.0, 0.0, 1.0])
        })),
    ];
    let mut out = Vec::new();
    for (i, (name, values, build)) in cases.into_iter().enumerate() {
        let mut store = ParamStore::new();
        let ids: Vec<_> = values
            .into_iter()
            .enumerate()
            .map(|(k, v)| store.add(format!("p{k}"), v).unwrap())
            .collect();
        let f = |g: &mut Graph<'_>| {
            let y = build(g, &ids)?;
            weighted_sum(g, y, 100 + i as u64)
        };
        out.push((name, grad_check(&f, &mut store, EPS)?));
    }
    Ok(out)
}

fn composed_errors() -> ideal::Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (kind, label) in [(EncoderKind::MeanPoolAttention, "attention"), (EncoderKind::Recurrent, "recurrent")] {
        let cfg = BackboneConfig {
            vocab: 6,
            dim: 4,
            encoder: kind,
            max_len: 3,
        };
        let mut bundle = ModelBundle::new(cfg, 5)?;
        let layout = bundle.clone();
        let seq = |items: Vec<usize>| ideal::seqrec::ClickSequence::new(items, 3).unwrap();
        let data = vec![
            Interaction { user: 0, candidate: 2, sequence: seq(vec![1, 3]), label: 1 },
            Interaction { user: 0, candidate: 5, sequence: seq(vec![1, 3]), label: 0 },
            Interaction { user: 1, candidate: 0, sequence: seq(vec![4, 2, 0]), label: 1 },
            Interaction { user: 1, candidate: 3, sequence: seq(vec![4, 2, 0]), label: 0 },
        ];
        let f = |g: &mut Graph<'_>| interaction_loss(&layout, g, &data);
        out.push((format!("joint loss ({label})"), grad_check(&f, &mut bundle.store, EPS)?));
    }

    let mut rng = Rng::new(9);
    let batch: Vec<DmExample> = (0..3)
        .map(|_| DmExample {
            e: (0..3).map(|_| rng.normal()).collect(),
            r: (0..3).map(|_| rng.normal()).collect(),
            omega: rng.normal_tensor(&[2, 3], 0.5),
            layers: DynamicParams {
                layers: vec![
                    ideal::seqrec::DenseLayer {
                        weight: rng.normal_tensor(&[3, 3], 0.5),
                        bias: rng.normal_tensor(&[1, 3], 0.5),
                    },
                    ideal::seqrec::DenseLayer {
                        weight: rng.normal_tensor(&[3, 1], 0.5),
                        bias: rng.normal_tensor(&[1, 1], 0.5),
                    },
                ],
            },
            labels: vec![1.0, 0.0],
        })
        .collect();
    for (loss, label) in [(RecLoss::Classification, "CL"), (RecLoss::Regression, "RL")] {
        let mut dm = DistributionMapper::init(3, 2, 11)?;
        let layout = dm.clone();
        let cfg = DmConfig {
            latent_dim: 2,
            loss,
            ..DmConfig::default()
        };
        let f = |g: &mut Graph<'_>| Ok(dm_loss(&layout, g, &batch, &cfg, &mut Rng::new(21))?.total);
        out.push((format!("mapper loss ({label})"), grad_check(&f, &mut dm.store, EPS)?));
    }

    for with_u in [false, true] {
        let mut det = MrdDetector::init(3, 4, with_u, 13)?;
        let layout = det.clone();
        let a = rng.normal_tensor(&[4, 3], 1.0);
        let b = rng.normal_tensor(&[4, 3], 1.0);
        let u = with_u.then(|| Tensor::new(vec![4, 1], vec![0.1, 0.5, 0.02, 0.9]).unwrap());
        let labels = [1.0, 0.0, 1.0, 0.0];
        let f = |g: &mut Graph<'_>| layout.loss(g, a.clone(), b.clone(), u.clone(), &labels);
        let label = if with_u { "detector loss (with u)" } else { "detector loss" };
        out.push((label.to_string(), grad_check(&f, &mut det.store, EPS)?));
    }
    Ok(out)
}

fn criterion_gradients() -> ideal::Result<Outcome> {
    let start = Instant::now();
    let prims = primitive_errors()?;
    let composed = composed_errors()?;
    let secs = start.elapsed().as_secs_f64();
    let worst = prims
        .iter()
        .map(|(n, e)| (n.to_string(), *e))
        .chain(composed)
        .fold((String::new(), 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    let pass = worst.1 < GRAD_TOL && secs < 30.0;
    Ok(outcome(
        pass,
        format!(
            "{} primitives and 6 composed losses, worst relative error {:.2e} ({}), {secs:.1} s",
            prims.len(),
            worst.1,
            worst.0
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn brute_auc(items: &[ScoredItem]) -> Option<f64> {
    let pos: Vec<f64> = items.iter().filter(|s| s.label == 1).map(|s| s.score).collect();
    let neg: Vec<f64> = items.iter().filter(|s| s.label == 0).map(|s| s.score).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut twice = 0u64;
    for p in &pos {
        for n in &neg {
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    Some((twice as f64 / 2.0) / (pos.len() as f64 * neg.len() as f64))
}

fn criterion_metrics() -> ideal::Result<Outcome> {
    let start = Instant::now();
    let mut mismatches = 0;
    for inst in 0..100u64 {
        let mut rng = Rng::new(1000 + inst);
        let n = 5 + rng.below(60);
        let users = 1 + rng.below(6);
        let mut items: Vec<ScoredItem> = (0..n)
            .map(|_| ScoredItem {
                user: rng.below(users),
                // Coarse grid so ties are common.
                score: rng.below(8) as f64 / 8.0,
                label: u8::from(rng.bernoulli(0.4)),
            })
            .collect();
        items[0].label = 1;
        items[1].label = 0;
        if auc(&items)? != brute_auc(&items).unwrap() {
            mismatches += 1;
        }

        let mut by_user: BTreeMap<usize, Vec<ScoredItem>> = BTreeMap::new();
        for s in &items {
            by_user.entry(s.user).or_default().push(*s);
        }
        let per_user: Vec<f64> = by_user.values().filter_map(|v| brute_auc(v)).collect();
        match uauc(&items) {
            Ok(r) => {
                let expected = per_user.iter().sum::<f64>() / per_user.len() as f64;
                if r.value != expected || r.included.len() != per_user.len() {
                    mismatches += 1;
                }
            }
            Err(_) if per_user.is_empty() => {}
            Err(_) => mismatches += 1,
        }

        let c = 2 + rng.below(30);
        let scores: Vec<f64> = (0..c).map(|_| rng.below(6) as f64).collect();
        let truth = rng.below(c);
        let labels: Vec<u8> = (0..c).map(|i| u8::from(i == truth)).collect();
        let rank = rank_in_candidates(&scores, &labels)?;
        // Pessimistic placement: sort candidates by score descending with the
        // ground truth after every tied negative.
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then_with(|| labels[a].cmp(&labels[b]))
        });
        let brute_rank = 1 + order.iter().position(|&i| i == truth).unwrap();
        if rank != brute_rank {
            mismatches += 1;
        }
        for k in [1, 5, 10, 20] {
            let brute_ndcg = if brute_rank <= k {
                1.0 / ((brute_rank + 1) as f64).log2()
            } else {
                0.0
            };
            let brute_hr = if brute_rank <= k { 1.0 } else { 0.0 };
            if ndcg_at_k(rank, k) != brute_ndcg || hitrate_at_k(rank, k) != brute_hr {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        mismatches == 0 && secs < 10.0,
        format!("100 instances each of AUC, UAUC, rank, NDCG@K, HR@K: {mismatches} mismatches, {secs:.2} s"),
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_mapper() -> ideal::Result<Outcome> {
    let mut rng = Rng::new(31);
    let mut min_kl = f64::INFINITY;
    let mut max_self = 0.0f64;
    for _ in 0..1000 {
        let d = 1 + rng.below(8);
        let gauss = |rng: &mut Rng| {
            GaussianLatent::new(
                (0..d).map(|_| rng.normal() * 2.0).collect(),
                (0..d).map(|_| 0.05 + 2.0 * rng.uniform()).collect(),
            )
            .unwrap()
        };
        let q = gauss(&mut rng);
        let p = gauss(&mut rng);
        min_kl = min_kl.min(kl_diag_gaussian(&q, &p)?);
        max_self = max_self.max(kl_diag_gaussian(&q, &q)?.abs());
    }

    let dm = DistributionMapper::init(4, 3, 2)?;
    let e = [0.3, -0.2, 0.8, 0.1];
    let point = GaussianLatent::new(vec![0.4, -1.0, 0.2], vec![0.0; 3])?;
    let broad = GaussianLatent::new(vec![0.4, -1.0, 0.2], vec![1.0; 3])?;
    let u_sigma0 = nu_uncertainty(&dm, &e, &point, 10, &mut Rng::new(1))?;
    let u_n1 = nu_uncertainty(&dm, &e, &broad, 1, &mut Rng::new(1))?;
    let u_hand = variance_sum(&[vec![0.0, 0.0], vec![2.0, 2.0]]);

    let pass = min_kl >= 0.0 && max_self < 1e-9 && u_sigma0 == 0.0 && u_n1 == 0.0 && u_hand == 2.0;
    Ok(outcome(
        pass,
        format!(
            "min KL {min_kl:.3e} over 1000 pairs, max self-KL {max_self:.1e}, u(sigma=0)={u_sigma0}, u(n=1)={u_n1}, hand example u={u_hand}"
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_labels() -> ideal::Result<Outcome> {
    let stream = synth_drift_stream(&DriftConfig {
        users: 50,
        items: 400,
        domains: 4,
        switch_prob: 0.05,
        length: 30,
        seed: 44,
    })?;
    let sessions = stream.sessions(1..30, 4, 10, 0);
    let history: Vec<_> = sessions.iter().flat_map(|s| s.interactions()).collect();
    let cfg = BackboneConfig {
        max_len: 10,
        ..BackboneConfig::new(400)
    };
    let tc = TrainConfig {
        epochs: 3,
        learning_rate: 0.003,
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let (bundle, _) = train_joint(ModelBundle::new(cfg, 0)?, &history, &tc)?;
    let dc = MrdDatasetConfig {
        lag_policy: LagPolicy::AllPairs,
        balance_ratio: None,
        max_samples: None,
        seed: 0,
    };
    let samples = build_mrd_dataset(&sessions, &bundle, &dc)?;
    let mut cache: HashMap<Vec<usize>, DynamicParams> = HashMap::new();
    let mut mismatches = 0;
    for s in &samples {
        let params = match cache.get(s.stale.items()) {
            Some(p) => p,
            None => {
                let p = bundle.generate_params(&s.stale)?;
                cache.entry(s.stale.items().to_vec()).or_insert(p)
            }
        };
        let interaction = Interaction {
            user: s.user,
            candidate: s.candidate,
            sequence: s.current.clone(),
            label: s.target,
        };
        let p = bundle.predict(&interaction, params)?;
        let expected = u8::from(hard_decision(p) == s.target);
        if expected != s.label {
            mismatches += 1;
        }
    }
    let negatives = samples.iter().filter(|s| s.label == 0).count();
    Ok(outcome(
        mismatches == 0 && !samples.is_empty(),
        format!(
            "{} samples on 50 users ({negatives} mis-recommendations), {mismatches} label mismatches",
            samples.len()
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_budget(out: &Path, cfg: &ExperimentConfig) -> ideal::Result<Outcome> {
    let dir = out.join("seed-0");
    let bc = BackboneConfig {
        vocab: cfg.items,
        dim: cfg.dim,
        encoder: cfg.encoder,
        max_len: cfg.max_len,
    };
    let bundle = ModelBundle::load(bc, &dir.join("bundle.ckpt"))?;
    let detector = MrdDetector::load(&dir.join("detector-cl-nu.ckpt"))?;
    let dm = DistributionMapper::load(&dir.join("dm-cl.ckpt"))?;
    let (h, l) = (cfg.history, cfg.realtime);
    let stream = |users, seed| {
        synth_drift_stream(&DriftConfig {
            users,
            items: cfg.items,
            domains: cfg.domains,
            switch_prob: cfg.switch_prob,
            length: h + l,
            seed,
        })
    };
    let held_out = stream(400, 9001)?.sessions(h - 1..h + l, cfg.eval_negatives, cfg.max_len, 2);
    let calibration = stream(1000, 9002)?.sessions(h - 1..h + l, cfg.eval_negatives, cfg.max_len, 3);
    let options = WorldOptions::default();
    let mut eval = ReplayWorld::new(&bundle, &held_out, &options)?;
    let mut calib = ReplayWorld::new(&bundle, &calibration, &options)?;
    let dm_cfg = cfg.dm.clone();
    let unc = Uncertainty::Mapper {
        dm: &dm,
        config: &dm_cfg,
        base: None,
        seed: 5,
    };
    let source = eval.add_mrs_source(&detector, unc)?;
    calib.add_mrs_source(&detector, unc)?;

    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for f in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let mrs_policy = calibrated_policy(SweepKind::Mrs(source), f, &calib, options.lof_k, 0)?;
        let (m, _) = eval.replay(&mrs_policy, Some(source), 0)?;
        let (r, _) = eval.replay(&Policy::Random(f), None, 0)?;
        worst = worst.max((m.realized_freq - f).abs()).max((r.realized_freq - f).abs());
        parts.push(format!("{f}:{:.3}/{:.3}", m.realized_freq, r.realized_freq));
    }
    let (always, _) = eval.replay(&Policy::Always, None, 0)?;
    let (never, _) = eval.replay(&Policy::Never, None, 0)?;
    let pass = worst <= 0.02 && always.realized_freq == 1.0 && never.realized_freq == 0.0;
    Ok(outcome(
        pass,
        format!(
            "{} held-out decisions, budget:mrs/random {}, worst deviation {:.2} pp, always {} never {}",
            eval.num_decisions(),
            parts.join(" "),
            worst * 100.0,
            always.realized_freq,
            never.realized_freq
        ),
    ))
}

// ---------------------------------------------------------------- 6-8

fn rows_for<'a>(rows: &'a [CurveRow], policy: &str, seed: u64) -> Vec<&'a CurveRow> {
    rows.iter().filter(|r| r.policy == policy && r.seed == seed).collect()
}

fn auc_at(rows: &[CurveRow], policy: &str, seed: u64, budget: f64) -> f64 {
    rows_for(rows, policy, seed)
        .into_iter()
        .find(|r| (r.budget - budget).abs() < 1e-9)
        .map(|r| r.auc)
        .unwrap_or(f64::NAN)
}

fn criterion_curves(rows: &[CurveRow], seeds: &[u64], secs: f64) -> Outcome {
    let mut rhos = Vec::new();
    let mut wins = 0;
    for &s in seeds {
        let ideal = rows_for(rows, "ideal", s);
        let b: Vec<f64> = ideal.iter().map(|r| r.budget).collect();
        let a: Vec<f64> = ideal.iter().map(|r| r.auc).collect();
        rhos.push(spearman(&b, &a));
        if auc_at(rows, "ideal", s, 0.1) >= auc_at(rows, "random", s, 0.1) {
            wins += 1;
        }
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    let pass = mean >= 0.8 && wins >= 4 && secs < 600.0;
    outcome(
        pass,
        format!(
            "mean Spearman(budget, AUC) {mean:.3} (per seed {}), IDEAL >= Random at f=0.1 in {wins}/5 seeds, sweep {secs:.0} s",
            rhos.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn criterion_revenue(revenue: &BTreeMap<u64, Vec<ideal::metrics::RevenueRow>>) -> Outcome {
    let mut negative = 0;
    let mut parts = Vec::new();
    let mut enough_groups = true;
    for rows in revenue.values() {
        enough_groups &= rows.len() >= 10;
        let m: Vec<f64> = rows.iter().map(|r| r.mean_mrs).collect();
        let v: Vec<f64> = rows.iter().map(|r| r.revenue).collect();
        let rho = spearman(&m, &v);
        negative += usize::from(rho < 0.0);
        parts.push(format!("{rho:.2}"));
    }
    outcome(
        negative >= 4 && enough_groups,
        format!("Spearman(mean MRS, revenue) per seed {}, negative in {negative}/5", parts.join(" ")),
    )
}

fn criterion_ablation(rows: &[CurveRow], seeds: &[u64]) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for &s in seeds {
        let nu = auc_at(rows, "ideal", s, 0.5);
        let mu = auc_at(rows, "ideal-cl-mu", s, 0.5);
        wins += usize::from(nu >= mu);
        parts.push(format!("{nu:.4}/{mu:.4}"));
    }
    outcome(
        wins >= 3,
        format!("AUC at f=0.5 CL+NU/CL+MU {}, CL+NU ahead in {wins}/5", parts.join(" ")),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_determinism(root: &Path) -> ideal::Result<Outcome> {
    let text = "
data.users = 40
data.calib_users = 60
data.history = 25
data.realtime = 12
data.eval_negatives = 9
train.epochs = 2
mrd.epochs = 3
mrd.max_samples = 4000
dm.latent_dim = 8
dm.epochs = 1
policy.list = always, never, random, ideal, ideal-mrd, ideal-rl-mu, lof, svdd
budget.list = 0, 0.3, 0.6, 1
report.group_size = 5
seeds = 0, 1
";
    let mut digests = Vec::new();
    for run_id in 0..2 {
        let mut cfg = ExperimentConfig::parse(text)?;
        cfg.out = root.join(format!("determinism-{run_id}"));
        run(&cfg, Stage::Sweep)?;
        let mut files = vec![fs::read(cfg.out.join("curves.csv"))?];
        for s in &cfg.seeds {
            files.push(fs::read(cfg.out.join(format!("seed-{s}/curves.csv")))?);
            files.push(fs::read(cfg.out.join(format!("seed-{s}/revenue.csv")))?);
        }
        digests.push(files);
    }
    let same = digests[0] == digests[1];
    Ok(outcome(
        same,
        format!(
            "two full sweeps, {} CSV files compared byte for byte: {}",
            digests[0].len(),
            if same { "identical" } else { "different" }
        ),
    ))
}

// ----------------------------------------------------------------

fn report(id: usize, title: &str, result: ideal::Result<Outcome>, failures: &mut usize) {
    let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    if !o.pass {
        *failures += 1;
    }
    println!("[{}] {id} {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut failures = 0;
    println!("acceptance criteria");
    report(1, "gradient correctness", criterion_gradients(), &mut failures);
    report(2, "metric oracles", criterion_metrics(), &mut failures);
    report(3, "distribution mapper invariants", criterion_mapper(), &mut failures);
    report(4, "detector label fidelity", criterion_labels(), &mut failures);

    let tmp = tempfile::tempdir().expect("temporary directory");
    let cfg = ExperimentConfig {
        policies: ["always", "never", "random", "ideal", "ideal-cl-mu"].map(String::from).to_vec(),
        seeds: (0..5).collect(),
        out: tmp.path().join("drift"),
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let sweep = run(&cfg, Stage::Sweep);
    let secs = start.elapsed().as_secs_f64();

    match &sweep {
        Ok(_) => report(5, "budget fidelity", criterion_budget(&cfg.out, &cfg), &mut failures),
        Err(e) => report(5, "budget fidelity", Err(ideal::Error::InvalidArgument(e.to_string())), &mut failures),
    }
    match sweep {
        Ok(summary) => {
            report(6, "curve shape", Ok(criterion_curves(&summary.curves, &cfg.seeds, secs)), &mut failures);
            report(7, "revenue anti-correlation", Ok(criterion_revenue(&summary.revenue)), &mut failures);
            report(8, "strategy ablation", Ok(criterion_ablation(&summary.curves, &cfg.seeds)), &mut failures);
        }
        Err(e) => {
            for (id, title) in [(6, "curve shape"), (7, "revenue anti-correlation"), (8, "strategy ablation")] {
                report(id, title, Err(ideal::Error::InvalidArgument(e.to_string())), &mut failures);
            }
        }
    }
    report(9, "determinism", criterion_determinism(tmp.path()), &mut failures);

    println!("{} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
