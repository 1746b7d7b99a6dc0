//! Evaluation metrics: frame-score volatility, Spearman rank correlation,
//! and intersection-based detection scoring with change-point threshold
//! tuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::EventList;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("need at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("rank correlation undefined for constant input")]
    ConstantInput,
    #[error("scores must be positive for log returns")]
    NonPositiveScore,
    #[error("invalid rho: {0} (must lie in (0, 1])")]
    BadRho(f64),
    #[error("fps must be positive")]
    ZeroFps,
}

/// r_t = ln(q_{t+1} / q_t); requires at least two positive scores.
pub fn log_returns(scores: &[f32]) -> Result<Vec<f64>, MetricError> {
    if scores.len() < 2 {
        return Err(MetricError::TooShort {
            need: 2,
            got: scores.len(),
        });
    }
    if scores.iter().any(|&q| q <= 0.0) {
        return Err(MetricError::NonPositiveScore);
    }
    Ok(scores
        .windows(2)
        .map(|w| (f64::from(w[1]) / f64::from(w[0])).ln())
        .collect())
}

/// Annualized-style volatility: sqrt(T / fps) * population std of the log
/// returns, where T is the number of frames. A geometric (constant-ratio)
/// score sequence has exactly zero volatility.
pub fn volatility(scores: &[f32], fps: u32) -> Result<f64, MetricError> {
    if fps == 0 {
        return Err(MetricError::ZeroFps);
    }
    if scores.len() < 3 {
        return Err(MetricError::TooShort {
            need: 3,
            got: scores.len(),
        });
    }
    let returns = log_returns(scores)?;
    // Welford keeps the variance exactly zero when every return is the same
    // bit pattern, which a two-pass mean cannot guarantee.
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (i, &r) in returns.iter().enumerate() {
        let delta = r - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (r - mean);
    }
    let var = (m2 / returns.len() as f64).max(0.0);
    let t = scores.len() as f64;
    Ok((t / f64::from(fps)).sqrt() * var.sqrt())
}

/// Midranks: ties receive the average of the ranks they occupy (1-based).
fn midranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricError::ConstantInput);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation with midrank tie handling.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(MetricError::TooShort {
            need: 2,
            got: a.len(),
        });
    }
    pearson(&midranks(a), &midranks(b))
}

/// Groups utterance-level values by system id, then correlates the
/// per-system means.
pub fn system_spearman(
    preds: &[(String, f64)],
    labels: &[(String, f64)],
) -> Result<f64, MetricError> {
    if preds.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            a: preds.len(),
            b: labels.len(),
        });
    }
    fn by_system(pairs: &[(String, f64)]) -> BTreeMap<String, (f64, usize)> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (sys, v) in pairs {
            let e = acc.entry(sys.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        acc
    }
    let p = by_system(preds);
    let l = by_system(labels);
    let pm: Vec<f64> = p.values().map(|(s, n)| s / *n as f64).collect();
    let lm: Vec<f64> = l.values().map(|(s, n)| s / *n as f64).collect();
    if p.len() != l.len() || !p.keys().eq(l.keys()) {
        return Err(MetricError::LengthMismatch {
            a: p.len(),
            b: l.len(),
        });
    }
    spearman(&pm, &lm)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub rho_dtc: f64,
    pub rho_gtc: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rho_dtc: 0.5,
            rho_gtc: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        for rho in [self.rho_dtc, self.rho_gtc] {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(MetricError::BadRho(rho));
            }
        }
        Ok(())
    }
}

/// Detection counts and derived rates. `fn` is a reserved word, hence the
/// serde rename on the miss count.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionReport {
    pub rho_dtc: f64,
    pub rho_gtc: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl DetectionReport {
    fn from_counts(cfg: &EvalConfig, tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = safe_div(tp as f64, (tp + fp) as f64);
        let recall = safe_div(tp as f64, (tp + fn_) as f64);
        let f1 = safe_div(2.0 * precision * recall, precision + recall);
        DetectionReport {
            rho_dtc: cfg.rho_dtc,
            rho_gtc: cfg.rho_gtc,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            threshold: None,
        }
    }
}

/// Intersection-based matching for one utterance.
///
/// A detection is relevant iff the sum of its intersections with all ground
/// truth events covers at least `rho_dtc` of the detection (inclusive). A
/// ground truth event is a true positive iff the relevant detections jointly
/// cover at least `rho_gtc` of it. Non-relevant detections are false
/// positives; unmatched ground truths are false negatives, so
/// tp + fn == number of ground truth events.
fn eval_one(cfg: &EvalConfig, dets: &EventList, gts: &EventList) -> (usize, usize, usize) {
    let relevant: Vec<bool> = dets
        .events()
        .iter()
        .map(|d| {
            let inter: f64 = gts.events().iter().map(|g| d.intersection_len(g)).sum();
            inter >= cfg.rho_dtc * d.duration()
        })
        .collect();
    let fp = relevant.iter().filter(|r| !**r).count();
    let tp = gts
        .events()
        .iter()
        .filter(|g| {
            let inter: f64 = dets
                .events()
                .iter()
                .zip(&relevant)
                .filter(|(_, r)| **r)
                .map(|(d, _)| g.intersection_len(d))
                .sum();
            inter >= cfg.rho_gtc * g.duration()
        })
        .count();
    let fn_ = gts.len() - tp;
    (tp, fp, fn_)
}

/// Pools counts across utterances, pairing detection and ground truth lists
/// by utterance id. Utterances present on only one side contribute their
/// events as false positives or false negatives respectively.
pub fn intersection_eval(
    cfg: &EvalConfig,
    detections: &[EventList],
    ground_truth: &[EventList],
) -> Result<DetectionReport, MetricError> {
    cfg.validate()?;
    let mut by_utt: BTreeMap<&str, (Option<&EventList>, Option<&EventList>)> = BTreeMap::new();
    for d in detections {
        by_utt.entry(&d.utt_id).or_default().0 = Some(d);
    }
    for g in ground_truth {
        by_utt.entry(&g.utt_id).or_default().1 = Some(g);
    }
    let empty = EventList::empty(String::new());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (_, (d, g)) in by_utt {
        let (t, f, m) = eval_one(cfg, d.unwrap_or(&empty), g.unwrap_or(&empty));
        tp += t;
        fp += f;
        fn_ += m;
    }
    Ok(DetectionReport::from_counts(cfg, tp, fp, fn_))
}

/// Candidate thresholds for change-point tuning: midpoints between adjacent
/// distinct pooled scores, plus one sentinel below the minimum and one above
/// the maximum.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = scores.iter().cloned().filter(|s| s.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.is_empty() {
        return vec![0.0];
    }
    let mut cands = Vec::with_capacity(sorted.len() + 1);
    cands.push(sorted[0] - 1.0);
    for w in sorted.windows(2) {
        cands.push((w[0] + w[1]) / 2.0);
    }
    cands.push(sorted[sorted.len() - 1] + 1.0);
    cands
}
