//! Device-cloud replay: devices walk their click streams, a policy decides
//! at every step whether to fetch fresh classifier parameters, and every
//! step logs both counterfactual predictions (fresh and stale) so revenue
//! can be measured independently of the decisions.
//!
//! Step 0 of each device stream is a forced initial request and is not
//! evaluated; decisions start at step 1.

use std::fmt::Write as _;
use std::sync::OnceLock;

use crate::data::{Session, StepSample};
use crate::error::{Error, Result};
use crate::hypernet::ModelBundle;
use crate::kernel::{Rng, Tensor};
use crate::mapper::{previous_sequence, DistributionMapper, DmConfig, UncertaintyKind};
use crate::metrics::{self, CurveRow, RevenueRow, ScoredItem};
use crate::mrd::MrdDetector;
use crate::policy::{calibrate_threshold, lof_score, svdd_fit, svdd_score, Direction, Policy, StepFeatures};
use crate::seqrec::DynamicParams;

/// Drift-score settings for the LOF and hypersphere baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldOptions {
    /// Number of preceding sequence embeddings used as reference.
    pub window: usize,
    pub lof_k: usize,
    pub svdd_quantile: f64,
}

impl Default for WorldOptions {
    fn default() -> Self {
        WorldOptions {
            window: 10,
            lof_k: 3,
            svdd_quantile: 0.9,
        }
    }
}

fn tri(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

struct Device {
    user: usize,
    steps: Vec<StepSample>,
    enc: Vec<Vec<f64>>,
    omega: Vec<Tensor>,
    fresh: Vec<DynamicParams>,
    lof: Vec<f64>,
    svdd: Vec<f64>,
    /// Candidate probabilities at step `i` under parameters from step `j`.
    probs: Vec<OnceLock<Vec<f64>>>,
}

impl Device {
    fn probs(&self, i: usize, j: usize) -> &[f64] {
        self.probs[tri(i, j)].get_or_init(|| {
            let omega = &self.omega[i];
            (0..omega.shape()[0])
                .map(|r| self.fresh[j].probability(omega.row_slice(r)))
                .collect()
        })
    }
}

struct MrsSource {
    detector: MrdDetector,
    /// Uncertainty per device per step, when the detector uses it.
    u: Option<Vec<Vec<f64>>>,
    memo: Vec<Vec<OnceLock<f64>>>,
}

/// How a score source obtains its uncertainty input.
#[derive(Clone, Copy)]
pub enum Uncertainty<'a> {
    None,
    Mapper {
        dm: &'a DistributionMapper,
        config: &'a DmConfig,
        /// Detector without uncertainty, required for the MU kind.
        base: Option<&'a MrdDetector>,
        seed: u64,
    },
}

/// Device streams with every policy-independent quantity precomputed:
/// sequence embeddings, classifier inputs, generated parameters, and drift
/// scores. Counterfactual probabilities and scores are memoized per
/// `(t, t')` pair.
pub struct ReplayWorld<'a> {
    bundle: &'a ModelBundle,
    devices: Vec<Device>,
    sources: Vec<MrsSource>,
}

/// One candidate shown at a step.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateOutcome {
    pub item: usize,
    pub y: u8,
    pub p_used: f64,
    pub p_fresh: f64,
    pub p_stale: f64,
}

/// One decision step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub device: usize,
    pub t: usize,
    pub request: bool,
    pub mrs: Option<f64>,
    pub lof: f64,
    pub svdd: f64,
    pub candidates: Vec<CandidateOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    pub decisions: usize,
    pub requests: usize,
    pub realized_freq: f64,
    pub auc: f64,
    pub uauc: f64,
    pub ndcg10: f64,
    pub hr10: f64,
    pub ndcg20: f64,
    pub hr20: f64,
}

impl<'a> ReplayWorld<'a> {
    pub fn new(bundle: &'a ModelBundle, sessions: &[Session], options: &WorldOptions) -> Result<Self> {
        if !bundle.is_trained() {
            return Err(Error::Untrained("model bundle"));
        }
        let mut devices = Vec::with_capacity(sessions.len());
        for s in sessions {
            if s.steps.len() < 2 {
                continue;
            }
            let mut enc = Vec::with_capacity(s.steps.len());
            let mut omega = Vec::with_capacity(s.steps.len());
            let mut fresh = Vec::with_capacity(s.steps.len());
            for step in &s.steps {
                enc.push(bundle.encode(&step.sequence)?.into_data());
                omega.push(bundle.features(&step.sequence, &step.candidates)?);
                fresh.push(bundle.generate_params(&step.sequence)?);
            }
            let mut lof = vec![1.0; s.steps.len()];
            let mut svdd = vec![0.0; s.steps.len()];
            for i in 1..s.steps.len() {
                let reference = &enc[i.saturating_sub(options.window)..i];
                if reference.len() > options.lof_k {
                    lof[i] = lof_score(&enc[i], reference, options.lof_k)?;
                }
                svdd[i] = svdd_score(&enc[i], &svdd_fit(reference, options.svdd_quantile)?);
            }
            let n = s.steps.len();
            devices.push(Device {
                user: s.user,
                steps: s.steps.clone(),
                enc,
                omega,
                fresh,
                lof,
                svdd,
                probs: (0..n * (n + 1) / 2).map(|_| OnceLock::new()).collect(),
            });
        }
        devices.sort_by_key(|d| d.user);
        Ok(ReplayWorld {
            bundle,
            devices,
            sources: Vec::new(),
        })
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    /// Number of decision steps (every step but each device's first).
    pub fn num_decisions(&self) -> usize {
        self.devices.iter().map(|d| d.steps.len() - 1).sum()
    }

    /// Registers a mis-recommendation score source and returns its index.
    pub fn add_mrs_source(&mut self, detector: &MrdDetector, uncertainty: Uncertainty<'_>) -> Result<usize> {
        if !detector.is_trained() {
            return Err(Error::Untrained("mis-recommendation detector"));
        }
        let u = if detector.with_uncertainty() {
            let Uncertainty::Mapper { dm, config, base, seed } = uncertainty else {
                return Err(Error::MissingFeature("uncertainty source for detector"));
            };
            if !dm.is_trained() {
                return Err(Error::Untrained("distribution mapper"));
            }
            let root = Rng::new(seed).derive(&[0x5c]);
            let mut all = Vec::with_capacity(self.devices.len());
            for d in &self.devices {
                let mut per = Vec::with_capacity(d.steps.len());
                for (i, step) in d.steps.iter().enumerate() {
                    let mut rng = root.derive(&[d.user as u64, step.t as u64]);
                    let prev = match config.uncertainty {
                        UncertaintyKind::MisRecommendation => {
                            Some(self.bundle.encode(&previous_sequence(&step.sequence))?.into_data())
                        }
                        UncertaintyKind::NextItem => None,
                    };
                    per.push(dm.uncertainty(&d.enc[i], prev.as_deref(), base, config, &mut rng)?);
                }
                all.push(per);
            }
            Some(all)
        } else {
            None
        };
        let memo = self
            .devices
            .iter()
            .map(|d| {
                let n = d.steps.len();
                (0..n * (n + 1) / 2).map(|_| OnceLock::new()).collect()
            })
            .collect();
        self.sources.push(MrsSource {
            detector: detector.clone(),
            u,
            memo,
        });
        Ok(self.sources.len() - 1)
    }

    fn mrs(&self, source: usize, device: usize, i: usize, j: usize) -> Result<f64> {
        let src = &self.sources[source];
        let d = &self.devices[device];
        if let Some(v) = src.memo[device][tri(i, j)].get() {
            return Ok(*v);
        }
        let u = src.u.as_ref().map(|u| u[device][i]);
        let v = src.detector.score_embeddings(&d.enc[i], &d.enc[j], u)?;
        Ok(*src.memo[device][tri(i, j)].get_or_init(|| v))
    }

    fn check_source(&self, source: Option<usize>) -> Result<()> {
        match source {
            Some(s) if s >= self.sources.len() => Err(Error::InvalidArgument(format!("unknown score source {s}"))),
            _ => Ok(()),
        }
    }

    fn rng(seed: u64, user: usize) -> Rng {
        Rng::new(seed).derive(&[0x51, user as u64])
    }

    /// Replays every device under `policy`; `source` supplies the
    /// mis-recommendation score (logged, and required by the threshold
    /// policy on it).
    pub fn replay(&self, policy: &Policy, source: Option<usize>, seed: u64) -> Result<(SimReport, Vec<StepRecord>)> {
        policy.validate()?;
        self.check_source(source)?;
        let mut records = Vec::with_capacity(self.num_decisions());
        for (di, d) in self.devices.iter().enumerate() {
            let mut rng = Self::rng(seed, d.user);
            let mut last = 0usize;
            for i in 1..d.steps.len() {
                let mrs = source.map(|s| self.mrs(s, di, i, last)).transpose()?;
                let features = StepFeatures {
                    mrs,
                    lof: Some(d.lof[i]),
                    svdd: Some(d.svdd[i]),
                };
                let request = policy.decide(&features, &mut rng)?;
                let fresh = d.probs(i, i);
                let stale = d.probs(i, last);
                let step = &d.steps[i];
                let candidates = step
                    .candidates
                    .iter()
                    .zip(&step.labels)
                    .enumerate()
                    .map(|(k, (&item, &y))| CandidateOutcome {
                        item,
                        y,
                        p_used: if request { fresh[k] } else { stale[k] },
                        p_fresh: fresh[k],
                        p_stale: stale[k],
                    })
                    .collect();
                records.push(StepRecord {
                    device: d.user,
                    t: step.t,
                    request,
                    mrs,
                    lof: d.lof[i],
                    svdd: d.svdd[i],
                    candidates,
                });
                if request {
                    last = i;
                }
            }
        }
        Ok((summarize(&records)?, records))
    }

    /// Request frequency and the scores seen at each decision, without
    /// building records.
    fn frequency(&self, policy: &Policy, source: Option<usize>, seed: u64) -> Result<f64> {
        let mut requests = 0usize;
        for (di, d) in self.devices.iter().enumerate() {
            let mut rng = Self::rng(seed, d.user);
            let mut last = 0usize;
            for i in 1..d.steps.len() {
                let features = StepFeatures {
                    mrs: source.map(|s| self.mrs(s, di, i, last)).transpose()?,
                    lof: Some(d.lof[i]),
                    svdd: Some(d.svdd[i]),
                };
                if policy.decide(&features, &mut rng)? {
                    requests += 1;
                    last = i;
                }
            }
        }
        Ok(requests as f64 / self.num_decisions() as f64)
    }

    /// Score threshold whose replay on this world requests as close to a
    /// fraction `f` of steps as possible.
    ///
    /// The score seen at a step depends on when the device last requested,
    /// so the threshold is found by bisection on the replayed frequency
    /// rather than by a single quantile.
    pub fn calibrate_mrs(&self, source: usize, f: f64, seed: u64) -> Result<f64> {
        self.check_source(Some(source))?;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!("budget {f} out of [0,1]")));
        }
        if f == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        if f == 1.0 {
            return Ok(f64::INFINITY);
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut best = (f64::INFINITY, lo);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let freq = self.frequency(&Policy::MrsThreshold(mid), Some(source), seed)?;
            let gap = (freq - f).abs();
            if gap < best.0 {
                best = (gap, mid);
            }
            if freq < f {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(best.1)
    }

    /// Threshold for a state-independent drift score from this world's
    /// decision steps.
    pub fn calibrate_drift(&self, policy_lof: bool, f: f64) -> Result<f64> {
        let scores: Vec<f64> = self
            .devices
            .iter()
            .flat_map(|d| (1..d.steps.len()).map(move |i| if policy_lof { d.lof[i] } else { d.svdd[i] }))
            .collect();
        calibrate_threshold(&scores, f, Direction::HighRequests)
    }
}

/// Frequency and accuracy metrics over `p_used`.
pub fn summarize(records: &[StepRecord]) -> Result<SimReport> {
    if records.is_empty() {
        return Err(Error::Empty("replay records"));
    }
    let requests = records.iter().filter(|r| r.request).count();
    let scored: Vec<ScoredItem> = records
        .iter()
        .flat_map(|r| {
            r.candidates.iter().map(move |c| ScoredItem {
                user: r.device,
                score: c.p_used,
                label: c.y,
            })
        })
        .collect();
    let mut ranks = Vec::new();
    for r in records {
        if r.candidates.iter().filter(|c| c.y == 1).count() == 1 {
            let scores: Vec<f64> = r.candidates.iter().map(|c| c.p_used).collect();
            let labels: Vec<u8> = r.candidates.iter().map(|c| c.y).collect();
            ranks.push(metrics::rank_in_candidates(&scores, &labels)?);
        }
    }
    let (ndcg10, hr10) = metrics::ranking_summary(&ranks, 10);
    let (ndcg20, hr20) = metrics::ranking_summary(&ranks, 20);
    Ok(SimReport {
        decisions: records.len(),
        requests,
        realized_freq: requests as f64 / records.len() as f64,
        auc: metrics::auc(&scored)?,
        uauc: metrics::uauc(&scored)?.value,
        ndcg10,
        hr10,
        ndcg20,
        hr20,
    })
}

pub const STEP_LOG_HEADER: &str = "device\tt\tdecision\tmrs\ty\tp_used\tp_fresh\tp_stale";

/// One row per candidate; a missing score is an empty field.
pub fn step_log_tsv(records: &[StepRecord]) -> String {
    let mut out = String::new();
    out.push_str(STEP_LOG_HEADER);
    out.push('\n');
    for r in records {
        let mrs = r.mrs.map(|m| format!("{m:.9}")).unwrap_or_default();
        for c in &r.candidates {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.9}\t{:.9}\t{:.9}",
                r.device,
                r.t,
                u8::from(r.request),
                mrs,
                c.y,
                c.p_used,
                c.p_fresh,
                c.p_stale
            )
            .expect("writing to a String cannot fail");
        }
    }
    out
}

/// Per-group revenue and the groups skipped for lacking both classes.
#[derive(Clone, Debug, PartialEq)]
pub struct RevenueReport {
    pub rows: Vec<RevenueRow>,
    pub skipped: Vec<usize>,
}

/// Groups devices by ascending id, `users_per_group` at a time, and reports
/// mean score and `AUC(p_fresh) - AUC(p_stale)` per group.
pub fn revenue(records: &[StepRecord], users_per_group: usize) -> Result<RevenueReport> {
    if users_per_group == 0 {
        return Err(Error::InvalidArgument("users_per_group must be at least 1".into()));
    }
    let mut users: Vec<usize> = records.iter().map(|r| r.device).collect();
    users.sort_unstable();
    users.dedup();
    let groups = users.len().div_ceil(users_per_group);
    let group_of = |device: usize| users.binary_search(&device).expect("known device") / users_per_group;
    let mut fresh: Vec<Vec<ScoredItem>> = vec![Vec::new(); groups];
    let mut stale: Vec<Vec<ScoredItem>> = vec![Vec::new(); groups];
    let mut mrs: Vec<Vec<f64>> = vec![Vec::new(); groups];
    for r in records {
        let g = group_of(r.device);
        if let Some(m) = r.mrs {
            mrs[g].push(m);
        }
        for c in &r.candidates {
            fresh[g].push(ScoredItem {
                user: r.device,
                score: c.p_fresh,
                label: c.y,
            });
            stale[g].push(ScoredItem {
                user: r.device,
                score: c.p_stale,
                label: c.y,
            });
        }
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for g in 0..groups {
        match (metrics::auc(&fresh[g]), metrics::auc(&stale[g])) {
            (Ok(af), Ok(as_)) => rows.push(RevenueRow {
                group: g,
                mean_mrs: if mrs[g].is_empty() {
                    f64::NAN
                } else {
                    mrs[g].iter().sum::<f64>() / mrs[g].len() as f64
                },
                auc_fresh: af,
                auc_stale: as_,
                revenue: af - as_,
            }),
            (Err(Error::ClassImbalance { .. }), _) | (_, Err(Error::ClassImbalance { .. })) => skipped.push(g),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(RevenueReport { rows, skipped })
}

/// What a curve line replays.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepKind {
    Always,
    Never,
    Random,
    /// Threshold on the score source with this index (same index in the
    /// evaluation and calibration worlds).
    Mrs(usize),
    Lof,
    Svdd,
}

/// Policy at budget `f`, calibrated on `calib`.
pub fn calibrated_policy(kind: SweepKind, f: f64, calib: &ReplayWorld<'_>, k: usize, seed: u64) -> Result<Policy> {
    Ok(match kind {
        SweepKind::Always => Policy::Always,
        SweepKind::Never => Policy::Never,
        SweepKind::Random => Policy::Random(f),
        SweepKind::Mrs(s) => Policy::MrsThreshold(calib.calibrate_mrs(s, f, seed)?),
        SweepKind::Lof => Policy::LofThreshold {
            k,
            tau: calib.calibrate_drift(true, f)?,
        },
        SweepKind::Svdd => Policy::SvddThreshold(calib.calibrate_drift(false, f)?),
    })
}

fn source_of(kind: SweepKind) -> Option<usize> {
    match kind {
        SweepKind::Mrs(s) => Some(s),
        _ => None,
    }
}

/// One curve row per `(policy, budget)`; `Always` and `Never` contribute a
/// single row at budgets 1 and 0.
pub fn frequency_sweep(
    eval: &ReplayWorld<'_>,
    calib: &ReplayWorld<'_>,
    policies: &[(String, SweepKind)],
    budgets: &[f64],
    backbone: &str,
    lof_k: usize,
    seed: u64,
) -> Result<Vec<CurveRow>> {
    if let Some(b) = budgets.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(Error::InvalidArgument(format!("budget {b} out of [0,1]")));
    }
    let mut rows = Vec::new();
    for (name, kind) in policies {
        let points: Vec<f64> = match kind {
            SweepKind::Always => vec![1.0],
            SweepKind::Never => vec![0.0],
            _ => budgets.to_vec(),
        };
        for f in points {
            let policy = calibrated_policy(*kind, f, calib, lof_k, seed)?;
            let (report, _) = eval.replay(&policy, source_of(*kind), seed)?;
            rows.push(CurveRow {
                policy: name.clone(),
                backbone: backbone.to_string(),
                budget: f,
                realized_freq: report.realized_freq,
                auc: report.auc,
                uauc: report.uauc,
                ndcg10: report.ndcg10,
                hr10: report.hr10,
                ndcg20: report.ndcg20,
                hr20: report.hr20,
                seed,
            });
        }
    }
    Ok(rows)
}

/// Builds a world from `sessions` and replays it once under `policy`.
pub fn run_replay(
    sessions: &[Session],
    bundle: &ModelBundle,
    detector: Option<(&MrdDetector, Uncertainty<'_>)>,
    policy: &Policy,
    seed: u64,
) -> Result<(SimReport, Vec<StepRecord>)> {
    let mut world = ReplayWorld::new(bundle, sessions, &WorldOptions::default())?;
    let source = detector.map(|(d, u)| world.add_mrs_source(d, u)).transpose()?;
    world.replay(policy, source, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_drift_stream, DriftConfig};
    use crate::seqrec::BackboneConfig;

    fn fixture() -> (ModelBundle, Vec<Session>) {
        let cfg = DriftConfig {
            users: 40,
            items: 80,
            length: 40,
            ..DriftConfig::default()
        };
        let stream = synth_drift_stream(&cfg).unwrap();
        let mut bc = BackboneConfig::new(cfg.items);
        bc.dim = 8;
        let mut bundle = ModelBundle::new(bc, 1).unwrap();
        bundle.mark_trained();
        (bundle, stream.sessions(0..40, 4, 30, 1))
    }

    #[test]
    fn always_and_never() {
        let (bundle, sessions) = fixture();
        let world = ReplayWorld::new(&bundle, &sessions, &WorldOptions::default()).unwrap();
        let (rep, recs) = world.replay(&Policy::Always, None, 0).unwrap();
        assert_eq!(rep.realized_freq, 1.0);
        assert!(recs.iter().flat_map(|r| &r.candidates).all(|c| c.p_used == c.p_fresh));
        let (rep, recs) = world.replay(&Policy::Never, None, 0).unwrap();
        assert_eq!(rep.realized_freq, 0.0);
        for r in &recs {
            let d = world.devices.iter().find(|d| d.user == r.device).unwrap();
            let i = d.steps.iter().position(|s| s.t == r.t).unwrap();
            for (k, c) in r.candidates.iter().enumerate() {
                assert_eq!(c.p_used, c.p_stale);
                assert_eq!(c.p_stale, d.fresh[0].probability(d.omega[i].row_slice(k)));
            }
        }
    }

    #[test]
    fn random_half_is_concentrated_and_deterministic() {
        let (bundle, sessions) = fixture();
        let cfg = DriftConfig {
            users: 110,
            items: 80,
            length: 40,
            ..DriftConfig::default()
        };
        let sessions_big = synth_drift_stream(&cfg).unwrap().sessions(0..40, 1, 30, 1);
        let world = ReplayWorld::new(&bundle, &sessions_big, &WorldOptions::default()).unwrap();
        assert!(world.num_decisions() >= 4000);
        let (a, ra) = world.replay(&Policy::Random(0.5), None, 3).unwrap();
        assert!((0.48..=0.52).contains(&a.realized_freq), "{}", a.realized_freq);
        let (b, rb) = world.replay(&Policy::Random(0.5), None, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(step_log_tsv(&ra), step_log_tsv(&rb));
        let counted = ra.iter().filter(|r| r.request).count();
        assert_eq!(a.requests, counted);
        for r in &ra {
            for c in &r.candidates {
                assert_eq!(c.p_used, if r.request { c.p_fresh } else { c.p_stale });
            }
        }
        drop(sessions);
    }

    #[test]
    fn untrained_components_rejected() {
        let (mut bundle, sessions) = fixture();
        let det = MrdDetector::zeros(8, 4, false).unwrap();
        assert!(matches!(
            run_replay(&sessions, &bundle, Some((&det, Uncertainty::None)), &Policy::Always, 0),
            Err(Error::Untrained(_))
        ));
        bundle = ModelBundle::new(*bundle.config(), 0).unwrap();
        assert!(matches!(
            run_replay(&sessions, &bundle, None, &Policy::Always, 0),
            Err(Error::Untrained(_))
        ));
    }

    fn record(device: usize, fresh: &[f64], stale: &[f64], ys: &[u8]) -> StepRecord {
        StepRecord {
            device,
            t: 1,
            request: false,
            mrs: Some(0.5),
            lof: 1.0,
            svdd: 0.0,
            candidates: ys
                .iter()
                .enumerate()
                .map(|(k, &y)| CandidateOutcome {
                    item: k,
                    y,
                    p_used: stale[k],
                    p_fresh: fresh[k],
                    p_stale: stale[k],
                })
                .collect(),
        }
    }

    #[test]
    fn revenue_examples() {
        let same = vec![record(0, &[0.9, 0.2], &[0.9, 0.2], &[1, 0])];
        assert_eq!(revenue(&same, 20).unwrap().rows[0].revenue, 0.0);

        let flipped = vec![
            record(0, &[0.9, 0.1], &[0.1, 0.9], &[1, 0]),
            record(1, &[0.8, 0.3], &[0.3, 0.8], &[1, 0]),
        ];
        let rep = revenue(&flipped, 20).unwrap();
        assert_eq!(rep.rows[0].revenue, 1.0);

        let mut a = vec![
            record(3, &[0.9, 0.1], &[0.1, 0.9], &[1, 0]),
            record(7, &[0.6, 0.3], &[0.5, 0.5], &[1, 0]),
            record(5, &[0.4, 0.1], &[0.2, 0.1], &[1, 0]),
        ];
        let x = revenue(&a, 1).unwrap();
        a.reverse();
        assert_eq!(x, revenue(&a, 1).unwrap());

        let single = vec![record(0, &[0.9], &[0.9], &[1])];
        assert_eq!(revenue(&single, 1).unwrap().skipped, vec![0]);
    }

    #[test]
    fn sweep_brackets_and_is_deterministic() {
        let (bundle, sessions) = fixture();
        let world = ReplayWorld::new(&bundle, &sessions, &WorldOptions::default()).unwrap();
        let mut det = MrdDetector::init(8, 4, false, 1).unwrap();
        det.mark_trained();
        let mut eval = world;
        let s = eval.add_mrs_source(&det, Uncertainty::None).unwrap();
        let (_, calib_sessions) = fixture();
        let mut calib = ReplayWorld::new(&bundle, &calib_sessions, &WorldOptions::default()).unwrap();
        calib.add_mrs_source(&det, Uncertainty::None).unwrap();
        let policies = vec![
            ("always".to_string(), SweepKind::Always),
            ("never".to_string(), SweepKind::Never),
            ("ideal".to_string(), SweepKind::Mrs(s)),
            ("lof".to_string(), SweepKind::Lof),
        ];
        let rows = frequency_sweep(&eval, &calib, &policies, &[0.0, 0.5, 1.0], "mean_pool", 3, 0).unwrap();
        let find = |p: &str, b: f64| rows.iter().find(|r| r.policy == p && r.budget == b).unwrap();
        assert_eq!(find("ideal", 0.0).auc, find("never", 0.0).auc);
        assert_eq!(find("ideal", 1.0).auc, find("always", 1.0).auc);
        assert_eq!(find("lof", 1.0).realized_freq, 1.0);
        let again = frequency_sweep(&eval, &calib, &policies, &[0.0, 0.5, 1.0], "mean_pool", 3, 0).unwrap();
        assert_eq!(metrics::emit_curves(&rows), metrics::emit_curves(&again));
    }
}
