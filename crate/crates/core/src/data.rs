//! Interaction logs, click sequences, negative sampling, and synthetic
//! multi-domain drift streams.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Rng;
use crate::seqrec::{ClickSequence, Interaction};

/// One row of an interaction log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

pub const INTERACTIONS_HEADER: &str = "user\titem\ttimestamp";

/// Reads a `user<TAB>item<TAB>timestamp` file with one header line.
pub fn load_interactions(path: &Path) -> Result<Vec<InteractionEvent>> {
    let text = fs::read_to_string(path)?;
    parse_interactions(&text, path)
}

pub fn parse_interactions(text: &str, path: &Path) -> Result<Vec<InteractionEvent>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some(_) => {}
        None => return Err(err(1, "missing header line".into())),
    }
    let mut events = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(lineno, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let user = fields[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| err(lineno, format!("user `{}` is not a non-negative integer", fields[0])))?;
        let item = fields[1]
            .trim()
            .parse::<usize>()
            .map_err(|_| err(lineno, format!("item `{}` is not a non-negative integer", fields[1])))?;
        let timestamp = fields[2]
            .trim()
            .parse::<i64>()
            .map_err(|_| err(lineno, format!("timestamp `{}` is not an integer", fields[2])))?;
        events.push(InteractionEvent { user, item, timestamp });
    }
    Ok(events)
}

pub fn write_interactions(path: &Path, events: &[InteractionEvent]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{INTERACTIONS_HEADER}")?;
    for e in events {
        writeln!(out, "{}\t{}\t{}", e.user, e.item, e.timestamp)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Keeps only users and items with at least `k` interactions, repeating
/// until both conditions hold.
pub fn k_core_filter(events: &[InteractionEvent], k: usize) -> Vec<InteractionEvent> {
    let mut current = events.to_vec();
    loop {
        let mut users: BTreeMap<usize, usize> = BTreeMap::new();
        let mut items: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &current {
            *users.entry(e.user).or_default() += 1;
            *items.entry(e.item).or_default() += 1;
        }
        let before = current.len();
        current.retain(|e| users[&e.user] >= k && items[&e.item] >= k);
        if current.len() == before {
            return current;
        }
    }
}

/// A click-sequence prefix and the item clicked right after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequencePair {
    pub prefix: ClickSequence,
    pub next: usize,
    pub timestamp: i64,
}

/// Per-user sliding-window pairs, ordered by `(timestamp, item)`.
///
/// A user with `m >= 2` events yields `m - 1` pairs; the prefix for event `t`
/// holds the (at most `max_len`) events before it.
pub fn build_sequences(events: &[InteractionEvent], max_len: usize) -> BTreeMap<usize, Vec<SequencePair>> {
    let mut per_user: BTreeMap<usize, Vec<(i64, usize)>> = BTreeMap::new();
    for e in events {
        per_user.entry(e.user).or_default().push((e.timestamp, e.item));
    }
    let mut out = BTreeMap::new();
    for (user, mut clicks) in per_user {
        if clicks.len() < 2 {
            continue;
        }
        clicks.sort();
        let items: Vec<usize> = clicks.iter().map(|c| c.1).collect();
        let pairs = (1..items.len())
            .map(|t| SequencePair {
                prefix: ClickSequence::new(items[t.saturating_sub(max_len)..t].to_vec(), max_len)
                    .expect("prefix is non-empty"),
                next: items[t],
                timestamp: clicks[t].0,
            })
            .collect();
        out.insert(user, pairs);
    }
    out
}

/// Attaches `ratio` negatives to every positive pair. Negatives are drawn
/// uniformly without replacement from the items in `0..num_items` that the
/// user never interacted with.
pub fn negative_sample(
    user: usize,
    pairs: &[SequencePair],
    history: &BTreeSet<usize>,
    ratio: usize,
    num_items: usize,
    rng: &mut Rng,
) -> Result<Vec<Interaction>> {
    let available = num_items.saturating_sub(history.len());
    if ratio > 0 && available < ratio {
        return Err(Error::InvalidArgument(format!(
            "user {user}: only {available} non-interacted items for {ratio} negatives"
        )));
    }
    let mut out = Vec::with_capacity(pairs.len() * (ratio + 1));
    for pair in pairs {
        out.push(Interaction {
            user,
            candidate: pair.next,
            sequence: pair.prefix.clone(),
            label: 1,
        });
        let mut chosen = HashSet::with_capacity(ratio);
        while chosen.len() < ratio {
            let item = rng.below(num_items);
            if !history.contains(&item) && chosen.insert(item) {
                out.push(Interaction {
                    user,
                    candidate: item,
                    sequence: pair.prefix.clone(),
                    label: 0,
                });
            }
        }
    }
    Ok(out)
}

/// One decision step of a device stream: the click sequence so far and the
/// labeled candidates shown next (positive first).
#[derive(Clone, Debug, PartialEq)]
pub struct StepSample {
    pub t: usize,
    pub sequence: ClickSequence,
    pub candidates: Vec<usize>,
    pub labels: Vec<u8>,
}

/// A device's time-ordered steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub user: usize,
    pub steps: Vec<StepSample>,
}

impl Session {
    pub fn interactions(&self) -> Vec<Interaction> {
        self.steps
            .iter()
            .flat_map(|s| {
                s.candidates.iter().zip(&s.labels).map(move |(&c, &y)| Interaction {
                    user: self.user,
                    candidate: c,
                    sequence: s.sequence.clone(),
                    label: y,
                })
            })
            .collect()
    }
}

/// Groups labeled interactions (positive first, then its negatives, as
/// produced by [`negative_sample`]) into per-user sessions.
pub fn sessions_from_interactions(interactions: &[Interaction]) -> Vec<Session> {
    let mut by_user: BTreeMap<usize, Vec<StepSample>> = BTreeMap::new();
    for it in interactions {
        let steps = by_user.entry(it.user).or_default();
        match steps.last_mut() {
            Some(s) if s.sequence == it.sequence && it.label == 0 => {
                s.candidates.push(it.candidate);
                s.labels.push(0);
            }
            _ => {
                let t = steps.len();
                steps.push(StepSample {
                    t,
                    sequence: it.sequence.clone(),
                    candidates: vec![it.candidate],
                    labels: vec![it.label],
                });
            }
        }
    }
    by_user
        .into_iter()
        .map(|(user, steps)| Session { user, steps })
        .collect()
}

/// Leave-one-out split of an ingested log: the last pair of every user is
/// held out with `test_ratio` negatives, the rest get `train_ratio`.
#[derive(Clone, Debug)]
pub struct LeaveOneOut {
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub num_items: usize,
}

pub fn leave_one_out(
    events: &[InteractionEvent],
    max_len: usize,
    train_ratio: usize,
    test_ratio: usize,
    seed: u64,
) -> Result<LeaveOneOut> {
    let num_items = events.iter().map(|e| e.item + 1).max().unwrap_or(0);
    let mut histories: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for e in events {
        histories.entry(e.user).or_default().insert(e.item);
    }
    let rng = Rng::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (user, pairs) in build_sequences(events, max_len) {
        let hist = &histories[&user];
        let mut r = rng.derive(&[user as u64]);
        let (head, last) = pairs.split_at(pairs.len() - 1);
        train.extend(negative_sample(user, head, hist, train_ratio, num_items, &mut r)?);
        test.extend(negative_sample(user, last, hist, test_ratio, num_items, &mut r)?);
    }
    Ok(LeaveOneOut { train, test, num_items })
}

/// Synthetic world in which users stick to one item domain for a while and
/// then jump to another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub users: usize,
    pub items: usize,
    pub domains: usize,
    /// Per-step probability of resampling the user's domain uniformly.
    pub switch_prob: f64,
    /// Clicks generated per user.
    pub length: usize,
    pub seed: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            users: 200,
            items: 400,
            domains: 4,
            switch_prob: 0.05,
            length: 70,
            seed: 0,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.switch_prob) {
            problems.push(format!("switch_prob {} out of [0,1]", self.switch_prob));
        }
        if self.domains < 2 {
            problems.push("at least 2 domains are required".to_string());
        }
        if self.items < self.domains {
            problems.push("need at least one item per domain".to_string());
        }
        if self.users == 0 || self.length < 2 {
            problems.push("need at least one user and two clicks per user".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn block_size(&self) -> usize {
        self.items / self.domains
    }

    pub fn domain_of(&self, item: usize) -> usize {
        (item / self.block_size()).min(self.domains - 1)
    }

    fn block(&self, domain: usize) -> std::ops::Range<usize> {
        let bs = self.block_size();
        let end = if domain + 1 == self.domains { self.items } else { (domain + 1) * bs };
        domain * bs..end
    }
}

/// Ground-truth domain change for one user.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchMarker {
    pub user: usize,
    pub step: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserStream {
    pub user: usize,
    pub items: Vec<usize>,
    pub domains: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftStream {
    pub config: DriftConfig,
    pub users: Vec<UserStream>,
    pub switches: Vec<SwitchMarker>,
}

pub fn synth_drift_stream(cfg: &DriftConfig) -> Result<DriftStream> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed).derive(&[0xd1]);
    let mut users = Vec::with_capacity(cfg.users);
    let mut switches = Vec::new();
    for user in 0..cfg.users {
        let mut rng = root.derive(&[user as u64]);
        let mut domain = rng.below(cfg.domains);
        let mut items = Vec::with_capacity(cfg.length);
        let mut domains = Vec::with_capacity(cfg.length);
        for step in 0..cfg.length {
            if step > 0 && rng.bernoulli(cfg.switch_prob) {
                let next = rng.below(cfg.domains);
                if next != domain {
                    switches.push(SwitchMarker {
                        user,
                        step,
                        from: domain,
                        to: next,
                    });
                }
                domain = next;
            }
            let block = cfg.block(domain);
            items.push(block.start + rng.below(block.len()));
            domains.push(domain);
        }
        users.push(UserStream { user, items, domains });
    }
    Ok(DriftStream {
        config: cfg.clone(),
        users,
        switches,
    })
}

impl DriftStream {
    /// Labeled steps `steps` of every user. Step `t` shows the click at `t`
    /// as the positive after the prefix `items[..t]`, followed by `ratio`
    /// negatives drawn from other domains. Step 0 has no prefix and is
    /// skipped.
    pub fn sessions(&self, steps: std::ops::Range<usize>, ratio: usize, max_len: usize, key: u64) -> Vec<Session> {
        let root = Rng::new(self.config.seed).derive(&[0x5e, key]);
        self.users
            .iter()
            .map(|u| {
                let mut rng = root.derive(&[u.user as u64]);
                let steps = steps
                    .clone()
                    .filter(|&t| t >= 1 && t < u.items.len())
                    .map(|t| {
                        let start = t.saturating_sub(max_len);
                        let sequence = ClickSequence::new(u.items[start..t].to_vec(), max_len)
                            .expect("t >= 1");
                        let mut candidates = vec![u.items[t]];
                        let mut labels = vec![1u8];
                        let own = self.config.block(u.domains[t]);
                        let mut seen = HashSet::new();
                        let pool = self.config.items - own.len();
                        let want = ratio.min(pool);
                        while seen.len() < want {
                            let item = rng.below(self.config.items);
                            if !own.contains(&item) && seen.insert(item) {
                                candidates.push(item);
                                labels.push(0);
                            }
                        }
                        StepSample {
                            t,
                            sequence,
                            candidates,
                            labels,
                        }
                    })
                    .collect();
                Session { user: u.user, steps }
            })
            .collect()
    }

    pub fn events(&self) -> Vec<InteractionEvent> {
        self.users
            .iter()
            .flat_map(|u| {
                u.items.iter().enumerate().map(move |(t, &item)| InteractionEvent {
                    user: u.user,
                    item,
                    timestamp: t as i64,
                })
            })
            .collect()
    }

    /// Writes the clicks as an interaction TSV (timestamp = step) and the
    /// switch markers to `<path>.switches` with header
    /// `user<TAB>step<TAB>from_domain<TAB>to_domain`. Returns the side file path.
    pub fn write_tsv(&self, path: &Path) -> Result<PathBuf> {
        write_interactions(path, &self.events())?;
        let side = PathBuf::from(format!("{}.switches", path.display()));
        let mut out = Vec::new();
        writeln!(out, "user\tstep\tfrom_domain\tto_domain")?;
        for s in &self.switches {
            writeln!(out, "{}\t{}\t{}\t{}", s.user, s.step, s.from, s.to)?;
        }
        fs::write(&side, out)?;
        Ok(side)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn events(rows: &[(usize, usize, i64)]) -> Vec<InteractionEvent> {
        rows.iter()
            .map(|&(user, item, timestamp)| InteractionEvent { user, item, timestamp })
            .collect()
    }

    #[test]
    fn header_only_file_is_empty() {
        let ev = parse_interactions("user\titem\ttimestamp\n", Path::new("x.tsv")).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn parses_rows_in_file_order() {
        let text = "user\titem\ttimestamp\n1\t5\t100\n0\t2\t50\n1\t3\t99\n";
        let ev = parse_interactions(text, Path::new("x.tsv")).unwrap();
        assert_eq!(ev, events(&[(1, 5, 100), (0, 2, 50), (1, 3, 99)]));
    }

    #[test]
    fn malformed_line_is_named() {
        let text = "user\titem\ttimestamp\n1\t5\t100\n1\t5\n";
        let err = parse_interactions(text, Path::new("log.tsv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().starts_with("log.tsv:3"));
        let err = parse_interactions("h\n1\tx\t3\n", Path::new("log.tsv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(load_interactions(Path::new("/nonexistent/file.tsv")).is_err());
    }

    #[test]
    fn single_event_user_yields_nothing() {
        let seqs = build_sequences(&events(&[(0, 1, 0)]), 30);
        assert!(seqs.is_empty());
    }

    #[test]
    fn forty_events_sliding_window() {
        let ev: Vec<_> = (0..40).map(|i| InteractionEvent { user: 3, item: i, timestamp: i as i64 }).collect();
        let seqs = build_sequences(&ev, 30);
        let pairs = &seqs[&3];
        assert_eq!(pairs.len(), 39);
        assert!(pairs.iter().all(|p| p.prefix.len() <= 30));
        assert_eq!(pairs[38].prefix.items(), &(9..39).collect::<Vec<_>>()[..]);
        assert_eq!(pairs[38].next, 39);
    }

    #[test]
    fn timestamp_ties_broken_by_item_id() {
        let seqs = build_sequences(&events(&[(0, 9, 5), (0, 4, 5), (0, 7, 1)]), 30);
        let pairs = &seqs[&0];
        assert_eq!(pairs[0].prefix.items(), &[7]);
        assert_eq!(pairs[0].next, 4);
        assert_eq!(pairs[1].next, 9);
    }

    #[test]
    fn ratio_four_gives_five_interactions() {
        let ev = events(&[(0, 1, 0), (0, 2, 1), (0, 3, 2)]);
        let pairs = &build_sequences(&ev, 30)[&0];
        let hist: BTreeSet<usize> = [1, 2, 3].into();
        let out = negative_sample(0, pairs, &hist, 4, 50, &mut Rng::new(1)).unwrap();
        assert_eq!(out.len(), 2 * 5);
        for chunk in out.chunks(5) {
            assert_eq!(chunk[0].label, 1);
            assert!(chunk[1..].iter().all(|i| i.label == 0 && !hist.contains(&i.candidate)));
        }
        let zero = negative_sample(0, pairs, &hist, 0, 50, &mut Rng::new(1)).unwrap();
        assert!(zero.iter().all(|i| i.label == 1));
        let again = negative_sample(0, pairs, &hist, 4, 50, &mut Rng::new(1)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn insufficient_pool_rejected() {
        let ev = events(&[(0, 1, 0), (0, 2, 1)]);
        let pairs = &build_sequences(&ev, 30)[&0];
        let hist: BTreeSet<usize> = [0, 1, 2].into();
        assert!(negative_sample(0, pairs, &hist, 4, 5, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn zero_switch_probability_keeps_one_domain() {
        let cfg = DriftConfig {
            users: 20,
            switch_prob: 0.0,
            ..DriftConfig::default()
        };
        let stream = synth_drift_stream(&cfg).unwrap();
        assert!(stream.switches.is_empty());
        for u in &stream.users {
            let d = cfg.domain_of(u.items[0]);
            assert!(u.items.iter().all(|&i| cfg.domain_of(i) == d));
        }
    }

    #[test]
    fn full_switch_probability_mixes_domains() {
        let cfg = DriftConfig {
            users: 1,
            length: 10_001,
            switch_prob: 1.0,
            ..DriftConfig::default()
        };
        let stream = synth_drift_stream(&cfg).unwrap();
        let d = &stream.users[0].domains;
        let same = d.windows(2).filter(|w| w[0] == w[1]).count() as f64 / 10_000.0;
        assert!(same <= 1.0 / cfg.domains as f64 + 0.05, "{same}");
    }

    #[test]
    fn markers_match_items() {
        let cfg = DriftConfig::default();
        let stream = synth_drift_stream(&cfg).unwrap();
        assert!(!stream.switches.is_empty());
        for m in &stream.switches {
            let items = &stream.users[m.user].items;
            assert_ne!(cfg.domain_of(items[m.step]), cfg.domain_of(items[m.step - 1]));
            assert_eq!(cfg.domain_of(items[m.step]), m.to);
        }
        assert_eq!(stream, synth_drift_stream(&cfg).unwrap());
    }

    #[test]
    fn drift_negatives_are_cross_domain() {
        let cfg = DriftConfig {
            users: 5,
            ..DriftConfig::default()
        };
        let stream = synth_drift_stream(&cfg).unwrap();
        for s in stream.sessions(1..30, 4, 30, 0) {
            for step in s.steps {
                assert_eq!(step.candidates.len(), 5);
                let d = cfg.domain_of(step.candidates[0]);
                assert!(step.candidates[1..].iter().all(|&c| cfg.domain_of(c) != d));
            }
        }
    }
}
