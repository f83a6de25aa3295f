//! Request policies: when a device asks the cloud for fresh parameters.
//!
//! Besides the trivial and random policies, a device can threshold its
//! mis-recommendation score (request when low) or a drift score computed
//! against its recent sequence embeddings: the local outlier factor, or the
//! distance outside a fitted hypersphere (request when high). Thresholds are
//! calibrated so a target fraction of calibration scores requests.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Rng;

/// A request policy with its operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    Always,
    Never,
    /// Request with probability `p` at every step.
    Random(f64),
    /// Request when the mis-recommendation score is below `tau`.
    MrsThreshold(f64),
    /// Request when the local outlier factor exceeds `tau`.
    LofThreshold { k: usize, tau: f64 },
    /// Request when the hypersphere score exceeds `tau`.
    SvddThreshold(f64),
}

/// Per-step scores a policy may consult.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepFeatures {
    pub mrs: Option<f64>,
    pub lof: Option<f64>,
    pub svdd: Option<f64>,
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::Random(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::InvalidArgument(format!("random request probability {p} out of [0,1]")))
            }
            Policy::LofThreshold { k: 0, .. } => Err(Error::InvalidArgument("LOF needs k >= 1".into())),
            _ => Ok(()),
        }
    }

    /// True when the device should request fresh parameters.
    pub fn decide(&self, features: &StepFeatures, rng: &mut Rng) -> Result<bool> {
        let need = |v: Option<f64>, name: &'static str| v.ok_or(Error::MissingFeature(name));
        Ok(match *self {
            Policy::Always => true,
            Policy::Never => false,
            Policy::Random(p) => rng.bernoulli(p),
            Policy::MrsThreshold(tau) => need(features.mrs, "mrs")? < tau,
            Policy::LofThreshold { tau, .. } => need(features.lof, "lof")? > tau,
            Policy::SvddThreshold(tau) => need(features.svdd, "svdd")? > tau,
        })
    }
}

/// Which side of the threshold requests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Scores strictly below the threshold request.
    LowRequests,
    /// Scores strictly above the threshold request.
    HighRequests,
}

/// Threshold under which (or over which, for [`Direction::HighRequests`])
/// the largest achievable fraction of `scores` not exceeding `f` requests.
///
/// With `c = floor(f * m)` and ascending scores, the threshold sits halfway
/// between the `c`-th and `(c+1)`-th score when they differ; on a tie it sits
/// on the tied value, so fewer than `c` request. `f = 0` and `f = 1` give
/// infinite thresholds.
pub fn calibrate_threshold(scores: &[f64], f: f64, direction: Direction) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidArgument(format!("budget {f} out of [0,1]")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration score"));
    }
    let mut sorted = scores.to_vec();
    match direction {
        Direction::LowRequests => sorted.sort_by(f64::total_cmp),
        Direction::HighRequests => sorted.sort_by(|a, b| b.total_cmp(a)),
    }
    let m = sorted.len();
    let c = ((f * m as f64) + 1e-9).floor() as usize;
    let c = c.min(m);
    let (none, all) = match direction {
        Direction::LowRequests => (f64::NEG_INFINITY, f64::INFINITY),
        Direction::HighRequests => (f64::INFINITY, f64::NEG_INFINITY),
    };
    if c == 0 {
        return Ok(none);
    }
    if c == m {
        return Ok(all);
    }
    let (below, above) = (sorted[c - 1], sorted[c]);
    Ok(if below == above { above } else { 0.5 * (below + above) })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices and distances of the `k` nearest points to `q` (ties by index),
/// skipping `exclude`.
fn knn(q: &[f64], points: &[Vec<f64>], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (i, euclid(q, p)))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

/// Floor on the mean reachability distance; identical points then share one
/// finite density and their ratio is exactly 1.
const MIN_REACH: f64 = 1e-12;

/// Local outlier factor of `query` with respect to `reference`.
pub fn lof_score(query: &[f64], reference: &[Vec<f64>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("LOF needs k >= 1".into()));
    }
    if reference.len() < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "LOF with k={k} needs at least {} reference points, got {}",
            k + 1,
            reference.len()
        )));
    }
    let k_dist: Vec<f64> = (0..reference.len())
        .map(|i| knn(&reference[i], reference, k, Some(i)).last().expect("k >= 1").1)
        .collect();
    let lrd = |neigh: &[(usize, f64)]| -> f64 {
        let mean = neigh.iter().map(|&(o, d)| d.max(k_dist[o])).sum::<f64>() / neigh.len() as f64;
        1.0 / mean.max(MIN_REACH)
    };
    let ref_lrd: Vec<f64> = (0..reference.len())
        .map(|i| lrd(&knn(&reference[i], reference, k, Some(i))))
        .collect();
    let neigh = knn(query, reference, k, None);
    let own = lrd(&neigh);
    let mean_neigh = neigh.iter().map(|&(o, _)| ref_lrd[o]).sum::<f64>() / neigh.len() as f64;
    Ok(mean_neigh / own)
}

/// Hypersphere around the reference embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SvddModel {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Center = mean of `reference`; radius = `radius_quantile` quantile
/// (nearest rank) of the distances to the center.
pub fn svdd_fit(reference: &[Vec<f64>], radius_quantile: f64) -> Result<SvddModel> {
    if reference.is_empty() {
        return Err(Error::Empty("svdd reference"));
    }
    if !(radius_quantile > 0.0 && radius_quantile <= 1.0) {
        return Err(Error::InvalidArgument(format!("radius quantile {radius_quantile} out of (0,1]")));
    }
    let dim = reference[0].len();
    let n = reference.len() as f64;
    let center: Vec<f64> = (0..dim).map(|d| reference.iter().map(|p| p[d]).sum::<f64>() / n).collect();
    let mut dists: Vec<f64> = reference.iter().map(|p| euclid(p, &center)).collect();
    dists.sort_by(f64::total_cmp);
    let rank = ((radius_quantile * n).ceil() as usize).clamp(1, dists.len());
    Ok(SvddModel {
        center,
        radius: dists[rank - 1],
    })
}

/// Distance outside the sphere; positive means out of distribution.
pub fn svdd_score(query: &[f64], model: &SvddModel) -> f64 {
    euclid(query, &model.center) - model.radius
}

/// A policy family as named in experiment configurations.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicySpec {
    Always,
    Never,
    Random,
    /// Mis-recommendation score threshold. `None` uses the configured
    /// uncertainty strategy; `Some("mrd")` uses the detector without
    /// uncertainty; otherwise a strategy label such as `cl-mu`.
    Ideal(Option<String>),
    Lof,
    Svdd,
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Always => write!(f, "always"),
            PolicySpec::Never => write!(f, "never"),
            PolicySpec::Random => write!(f, "random"),
            PolicySpec::Ideal(None) => write!(f, "ideal"),
            PolicySpec::Ideal(Some(s)) => write!(f, "ideal-{s}"),
            PolicySpec::Lof => write!(f, "lof"),
            PolicySpec::Svdd => write!(f, "svdd"),
        }
    }
}

pub const STRATEGY_LABELS: [&str; 5] = ["mrd", "cl-nu", "cl-mu", "rl-nu", "rl-mu"];

impl FromStr for PolicySpec {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "always" => Ok(PolicySpec::Always),
            "never" => Ok(PolicySpec::Never),
            "random" => Ok(PolicySpec::Random),
            "ideal" => Ok(PolicySpec::Ideal(None)),
            "lof" => Ok(PolicySpec::Lof),
            "svdd" | "oc-svm" => Ok(PolicySpec::Svdd),
            other => match other.strip_prefix("ideal-") {
                Some(label) if STRATEGY_LABELS.contains(&label) => Ok(PolicySpec::Ideal(Some(label.to_string()))),
                _ => Err(format!(
                    "unknown policy `{other}` (expected always, never, random, ideal, ideal-<{}>, lof, svdd)",
                    STRATEGY_LABELS.join("|")
                )),
            },
        }
    }
}
