//! Ranking and classification metrics plus the CSV emitters for curves and
//! revenue reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredItem {
    pub user: usize,
    pub score: f64,
    pub label: u8,
}

fn check_finite(scored: &[ScoredItem]) -> Result<()> {
    if scored.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::NonFinite("auc score"));
    }
    Ok(())
}

/// Fraction of (positive, negative) pairs ordered correctly; ties earn 0.5.
///
/// Runs in `O(n log n)` by sorting and counting ties group by group.
pub fn auc(scored: &[ScoredItem]) -> Result<f64> {
    check_finite(scored)?;
    let positives = scored.iter().filter(|s| s.label == 1).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::ClassImbalance { positives, negatives });
    }
    let mut sorted: Vec<(f64, u8)> = scored.iter().map(|s| (s.score, s.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Scan ascending; for each tie group, positives beat all negatives seen
    // before the group and split the ones inside it.
    let mut neg_below = 0usize;
    let mut credit = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0usize, 0usize);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 == 1 {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        credit += pos_here as f64 * (neg_below as f64 + 0.5 * neg_here as f64);
        neg_below += neg_here;
        i = j;
    }
    Ok(credit / (positives as f64 * negatives as f64))
}

/// Per-user AUC averaged without weights.
#[derive(Clone, Debug, PartialEq)]
pub struct UaucReport {
    pub value: f64,
    pub included: Vec<usize>,
    /// Users skipped because they lack one of the two classes.
    pub excluded: Vec<usize>,
}

pub fn uauc(scored: &[ScoredItem]) -> Result<UaucReport> {
    let mut by_user: BTreeMap<usize, Vec<ScoredItem>> = BTreeMap::new();
    for s in scored {
        by_user.entry(s.user).or_default().push(*s);
    }
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    let mut total = 0.0;
    for (user, items) in by_user {
        match auc(&items) {
            Ok(a) => {
                total += a;
                included.push(user);
            }
            Err(Error::ClassImbalance { .. }) => excluded.push(user),
            Err(e) => return Err(e),
        }
    }
    if included.is_empty() {
        return Err(Error::Empty("uauc: no user has both classes"));
    }
    Ok(UaucReport {
        value: total / included.len() as f64,
        included,
        excluded,
    })
}

/// `1 / log2(rank + 1)` inside the top `k`, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "rank starts at 1");
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn hitrate_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "rank starts at 1");
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Rank of the single ground truth: one plus the negatives scoring at least
/// as high.
pub fn rank_in_candidates(scores: &[f64], labels: &[u8]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    let truths: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    if truths.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "expected exactly one ground truth, found {}",
            truths.len()
        )));
    }
    let g = scores[truths[0]];
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("rank score"));
    }
    Ok(1 + scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| y == 0 && s >= g)
        .count())
}

/// Mean NDCG@k and HR@k over candidate sets.
pub fn ranking_summary(ranks: &[usize], k: usize) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let n = ranks.len() as f64;
    let ndcg = ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n;
    let hr = ranks.iter().map(|&r| hitrate_at_k(r, k)).sum::<f64>() / n;
    (ndcg, hr)
}

/// One point of an accuracy-versus-budget curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub policy: String,
    pub backbone: String,
    pub budget: f64,
    pub realized_freq: f64,
    pub auc: f64,
    pub uauc: f64,
    pub ndcg10: f64,
    pub hr10: f64,
    pub ndcg20: f64,
    pub hr20: f64,
    pub seed: u64,
}

pub const CURVES_HEADER: &str = "policy,backbone,budget,realized_freq,auc,uauc,ndcg@10,hr@10,ndcg@20,hr@20,seed";

/// Renders curve rows sorted by `(policy, budget, seed)` with six decimals.
pub fn emit_curves(rows: &[CurveRow]) -> String {
    let mut sorted: Vec<&CurveRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.policy
            .cmp(&b.policy)
            .then(a.budget.total_cmp(&b.budget))
            .then(a.seed.cmp(&b.seed))
    });
    let mut out = String::new();
    out.push_str(CURVES_HEADER);
    out.push('\n');
    for r in sorted {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.policy, r.backbone, r.budget, r.realized_freq, r.auc, r.uauc, r.ndcg10, r.hr10, r.ndcg20, r.hr20, r.seed
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Parses a curves CSV produced by [`emit_curves`].
pub fn parse_curves(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVES_HEADER) {
        return Err(Error::InvalidArgument("curves CSV header mismatch".into()));
    }
    let bad = |line: &str| Error::InvalidArgument(format!("malformed curves row `{line}`"));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(bad(line));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
            Ok(CurveRow {
                policy: f[0].to_string(),
                backbone: f[1].to_string(),
                budget: num(2)?,
                realized_freq: num(3)?,
                auc: num(4)?,
                uauc: num(5)?,
                ndcg10: num(6)?,
                hr10: num(7)?,
                ndcg20: num(8)?,
                hr20: num(9)?,
                seed: f[10].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

/// Revenue of requesting for one group of devices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevenueRow {
    pub group: usize,
    pub mean_mrs: f64,
    pub auc_fresh: f64,
    pub auc_stale: f64,
    pub revenue: f64,
}

pub const REVENUE_HEADER: &str = "group,mean_mrs,auc_fresh,auc_stale,revenue";

pub fn emit_revenue(rows: &[RevenueRow]) -> String {
    let mut sorted: Vec<&RevenueRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.group);
    let mut out = String::new();
    out.push_str(REVENUE_HEADER);
    out.push('\n');
    for r in sorted {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.group, r.mean_mrs, r.auc_fresh, r.auc_stale, r.revenue
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman inputs differ in length");
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(pos: &[f64], neg: &[f64]) -> Vec<ScoredItem> {
        pos.iter()
            .map(|&score| ScoredItem { user: 0, score, label: 1 })
            .chain(neg.iter().map(|&score| ScoredItem { user: 0, score, label: 0 }))
            .collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&items(&[0.9, 0.8], &[0.3, 0.2])).unwrap(), 1.0);
        assert_eq!(auc(&items(&[0.7, 0.4], &[0.5, 0.3])).unwrap(), 0.75);
        assert_eq!(auc(&items(&[0.5], &[0.5])).unwrap(), 0.5);
        assert!(matches!(auc(&items(&[0.5], &[])), Err(Error::ClassImbalance { .. })));
    }

    #[test]
    fn uauc_examples() {
        let one = items(&[0.7, 0.4], &[0.5, 0.3]);
        assert_eq!(uauc(&one).unwrap().value, auc(&one).unwrap());

        let mut two = items(&[0.9], &[0.1]);
        two.extend(items(&[0.5], &[0.5]).into_iter().map(|s| ScoredItem { user: 1, ..s }));
        assert_eq!(uauc(&two).unwrap().value, 0.75);

        let mut three = two.clone();
        three.push(ScoredItem { user: 7, score: 0.3, label: 1 });
        let report = uauc(&three).unwrap();
        assert_eq!(report.value, 0.75);
        assert_eq!(report.excluded, vec![7]);
        assert!(uauc(&items(&[0.1], &[])).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(hitrate_at_k(1, 10), 1.0);
        assert_eq!(ndcg_at_k(3, 10), 0.5);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert_eq!(hitrate_at_k(11, 10), 0.0);
        assert_eq!(rank_in_candidates(&[0.9, 0.1, 0.2], &[1, 0, 0]).unwrap(), 1);
        assert_eq!(rank_in_candidates(&[0.5, 0.9, 0.5, 0.1], &[1, 0, 0, 0]).unwrap(), 3);
        assert!(rank_in_candidates(&[0.5, 0.9], &[0, 0]).is_err());
        assert!(rank_in_candidates(&[0.5, 0.9], &[1, 1]).is_err());
    }

    fn row(policy: &str, budget: f64, seed: u64) -> CurveRow {
        CurveRow {
            policy: policy.into(),
            backbone: "recurrent".into(),
            budget,
            realized_freq: budget,
            auc: 0.5,
            uauc: 0.5,
            ndcg10: 0.1,
            hr10: 0.2,
            ndcg20: 0.3,
            hr20: 0.4,
            seed,
        }
    }

    #[test]
    fn curves_schema() {
        assert_eq!(emit_curves(&[]), format!("{CURVES_HEADER}\n"));
        let one = emit_curves(&[row("random", 0.1, 0)]);
        let lines: Vec<&str> = one.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].split(',').count(), 11);
        let rows = vec![row("mrs", 0.5, 1), row("mrs", 0.1, 2), row("always", 1.0, 0), row("mrs", 0.1, 0)];
        let a = emit_curves(&rows);
        assert_eq!(a, emit_curves(&rows));
        let parsed = parse_curves(&a).unwrap();
        let order: Vec<(String, f64, u64)> = parsed.iter().map(|r| (r.policy.clone(), r.budget, r.seed)).collect();
        assert_eq!(
            order,
            vec![
                ("always".into(), 1.0, 0),
                ("mrs".into(), 0.1, 0),
                ("mrs".into(), 0.1, 2),
                ("mrs".into(), 0.5, 1)
            ]
        );
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
    }
}
