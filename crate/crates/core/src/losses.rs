//! Training objectives: MOS regression, batch contrastive ranking, the
//! frame-score penalty baseline, slice sampling, and the two slice
//! consistency terms. Pure f64 forms serve as oracles and reports; graph
//! forms feed the optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use framequal_tape::{Scalar, Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("batch size {0} < 2")]
    BatchTooSmall(usize),
    #[error("slice length mismatch: expected {expected}, got {got}")]
    SliceLengthMismatch { expected: usize, got: usize },
    #[error("utterance too short for minimum slice: T = {t}, need {need}")]
    UtteranceTooShort { t: usize, need: usize },
    #[error("negative loss weight")]
    NegativeWeight,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_emb: f64,
    pub lambda_scores: f64,
    /// Optional frame-score penalty baseline; off by default.
    #[serde(default)]
    pub lambda_qnet: f64,
    #[serde(default = "default_margin")]
    pub contrastive_margin: f64,
    #[serde(default = "default_y_max")]
    pub y_max: f64,
}

fn default_margin() -> f64 {
    0.1
}

fn default_y_max() -> f64 {
    5.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_emb: 0.0,
            lambda_scores: 0.0,
            lambda_qnet: 0.0,
            contrastive_margin: default_margin(),
            y_max: default_y_max(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda_emb < 0.0
            || self.lambda_scores < 0.0
            || self.lambda_qnet < 0.0
            || self.contrastive_margin < 0.0
        {
            return Err(LossError::NegativeWeight);
        }
        Ok(())
    }

    pub fn uses_slices(&self) -> bool {
        self.lambda_emb > 0.0 || self.lambda_scores > 0.0
    }
}

/// Contiguous frame slice, 1-based inclusive on both ends: frames m..=end of
/// a T-frame sequence, with 1 <= m < end <= T.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub m: usize,
    pub end: usize,
}

impl SliceSpec {
    pub fn new(m: usize, end: usize) -> Self {
        assert!(m >= 1 && m < end, "slice must satisfy 1 <= m < end");
        SliceSpec { m, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Normalizer of the consistency losses: 1 / (end - m). The sums run
    /// over end - m + 1 frames; the denominator is intentionally end - m.
    pub fn normalizer(&self) -> f64 {
        1.0 / (self.end - self.m) as f64
    }

    /// 0-based half-open row range.
    pub fn rows(&self) -> (usize, usize) {
        (self.m - 1, self.end)
    }
}

/// Uniform slice duration over the attainable frame counts in
/// [min_s, min(max_s, (T-1)/fps)], then uniform position.
pub fn sample_slice(
    t_frames: usize,
    fps: u32,
    min_s: f64,
    max_s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SliceSpec, LossError> {
    let min_frames = (min_s * f64::from(fps)).ceil() as usize;
    let min_frames = min_frames.max(2);
    let max_frames = ((max_s * f64::from(fps)).round() as usize).min(t_frames.saturating_sub(1));
    if max_frames < min_frames {
        return Err(LossError::UtteranceTooShort {
            t: t_frames,
            need: min_frames + 1,
        });
    }
    let len = rng.gen_range(min_frames..=max_frames);
    let m = rng.gen_range(1..=t_frames - len + 1);
    Ok(SliceSpec::new(m, m + len - 1))
}

/// L_mos = |y_hat - y|.
pub fn loss_mos(y_hat: f64, y: f64) -> f64 {
    (y_hat - y).abs()
}

/// Mean over unordered pairs of max(0, |(yi - yj) - (li - lj)| - margin).
pub fn loss_contrastive(y_hat: &[f64], y: &[f64], margin: f64) -> Result<f64, LossError> {
    if y_hat.len() < 2 || y_hat.len() != y.len() {
        return Err(LossError::BatchTooSmall(y_hat.len().min(y.len())));
    }
    let n = y_hat.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = (y_hat[i] - y_hat[j]) - (y[i] - y[j]);
            sum += (d.abs() - margin).max(0.0);
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// alpha(y_hat) * sum_t (y_hat - q_t)^2 with alpha = 10^(y_hat - y_max).
pub fn qualitynet_penalty(y_hat: f64, q: &[f64], y_max: f64) -> f64 {
    let alpha = 10f64.powf(y_hat - y_max);
    alpha * q.iter().map(|&qt| (y_hat - qt) * (y_hat - qt)).sum::<f64>()
}

/// Squared-L2 embedding consistency over the slice rows of the full-context
/// sequence, normalized by end - m.
pub fn loss_emb(
    h: &Array2<f64>,
    h_slice: &Array2<f64>,
    s: &SliceSpec,
) -> Result<f64, LossError> {
    if h_slice.nrows() != s.len() {
        return Err(LossError::SliceLengthMismatch {
            expected: s.len(),
            got: h_slice.nrows(),
        });
    }
    let (r0, r1) = s.rows();
    let mut sum = 0.0;
    for (sr, fr) in (r0..r1).enumerate() {
        for c in 0..h.ncols() {
            let d = h[(fr, c)] - h_slice[(sr, c)];
            sum += d * d;
        }
    }
    Ok(sum * s.normalizer())
}

/// Absolute frame-score consistency over the slice rows, normalized by
/// end - m.
pub fn loss_scores(q: &[f64], q_slice: &[f64], s: &SliceSpec) -> Result<f64, LossError> {
    if q_slice.len() != s.len() {
        return Err(LossError::SliceLengthMismatch {
            expected: s.len(),
            got: q_slice.len(),
        });
    }
    let (r0, r1) = s.rows();
    let sum: f64 = (r0..r1)
        .enumerate()
        .map(|(sr, fr)| (q[fr] - q_slice[sr]).abs())
        .sum();
    Ok(sum * s.normalizer())
}

/// Graph form of L_mos for one utterance: |y_hat - y| as a 1x1 node.
pub fn g_loss_mos<S: Scalar>(tape: &mut Tape<S>, y_hat: Var, y: f64) -> Var {
    let diff = tape.add_scalar(y_hat, S::from_f64(-y));
    tape.abs(diff)
}

/// Graph form of the pairwise contrastive loss over batch predictions.
pub fn g_loss_contrastive<S: Scalar>(
    tape: &mut Tape<S>,
    y_hat: &[Var],
    y: &[f64],
    margin: f64,
) -> Result<Var, LossError> {
    if y_hat.len() < 2 || y_hat.len() != y.len() {
        return Err(LossError::BatchTooSmall(y_hat.len().min(y.len())));
    }
    let n = y_hat.len();
    let mut acc: Option<Var> = None;
    for i in 0..n {
        for j in i + 1..n {
            let d = tape.sub(y_hat[i], y_hat[j]);
            let centered = tape.add_scalar(d, S::from_f64(-(y[i] - y[j])));
            let a = tape.abs(centered);
            let hinge_arg = tape.add_scalar(a, S::from_f64(-margin));
            let hinge = tape.relu(hinge_arg);
            acc = Some(match acc {
                None => hinge,
                Some(prev) => tape.add(prev, hinge),
            });
        }
    }
    let n_pairs = (n * (n - 1) / 2) as f64;
    Ok(tape.scale(acc.expect("n >= 2"), S::from_f64(1.0 / n_pairs)))
}

/// Graph form of the frame-score penalty. The weight alpha depends on the
/// prediction, so gradients flow through it: alpha = exp(ln10 * (y_hat - y_max)).
pub fn g_qualitynet_penalty<S: Scalar>(
    tape: &mut Tape<S>,
    y_hat: Var,
    q: Var,
    y_max: f64,
) -> Var {
    let shifted = tape.add_scalar(y_hat, S::from_f64(-y_max));
    let scaled = tape.scale(shifted, S::from_f64(std::f64::consts::LN_10));
    let alpha = tape.exp(scaled);
    let resid = tape.sub_from_scalar_var(q, y_hat);
    let sq = tape.mul(resid, resid);
    let sum = tape.sum_all(sq);
    tape.mul(alpha, sum)
}

/// Graph form of loss_emb: h_full is T x D, h_slice is len x D.
pub fn g_loss_emb<S: Scalar>(
    tape: &mut Tape<S>,
    h_full: Var,
    h_slice: Var,
    s: &SliceSpec,
) -> Var {
    let (r0, r1) = s.rows();
    let rows = tape.row_slice(h_full, r0, r1);
    let diff = tape.sub(rows, h_slice);
    let sq = tape.mul(diff, diff);
    let sum = tape.sum_all(sq);
    tape.scale(sum, S::from_f64(s.normalizer()))
}

/// Graph form of loss_scores: q_full is T x 1, q_slice is len x 1.
pub fn g_loss_scores<S: Scalar>(
    tape: &mut Tape<S>,
    q_full: Var,
    q_slice: Var,
    s: &SliceSpec,
) -> Var {
    let (r0, r1) = s.rows();
    let rows = tape.row_slice(q_full, r0, r1);
    let diff = tape.sub(rows, q_slice);
    let a = tape.abs(diff);
    let sum = tape.sum_all(a);
    tape.scale(sum, S::from_f64(s.normalizer()))
}

/// Per-utterance graph pieces a batch loss is assembled from.
pub struct UttLossVars {
    pub y_hat: Var,
    pub label: f64,
    /// (full h rows vs standalone slice h, full q vs slice q, spec)
    pub slice: Option<(Var, Var, Var, Var, SliceSpec)>,
}

/// Scalar breakdown of one training step, already weighted into `total`.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub l_mos: f64,
    pub l_con: f64,
    pub l_emb: f64,
    pub l_scores: f64,
    pub l_qnet: f64,
    pub total: f64,
}

/// Assembles L = mean(L_mos) + L_con + lambda_emb * mean(L_emb)
/// + lambda_scores * mean(L_scores) [+ lambda_qnet * mean(penalty)] on the
/// tape and reports the unweighted per-term means.
pub fn g_batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    utts: &[UttLossVars],
    q_vars: &[Var],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown), LossError> {
    weights.validate()?;
    if utts.len() < 2 {
        return Err(LossError::BatchTooSmall(utts.len()));
    }
    let inv_n = S::from_f64(1.0 / utts.len() as f64);

    let mut mos_acc: Option<Var> = None;
    for u in utts {
        let l = g_loss_mos(tape, u.y_hat, u.label);
        mos_acc = Some(match mos_acc {
            None => l,
            Some(a) => tape.add(a, l),
        });
    }
    let l_mos = tape.scale(mos_acc.expect("non-empty"), inv_n);

    let y_hat_vars: Vec<Var> = utts.iter().map(|u| u.y_hat).collect();
    let labels: Vec<f64> = utts.iter().map(|u| u.label).collect();
    let l_con = g_loss_contrastive(tape, &y_hat_vars, &labels, weights.contrastive_margin)?;

    let mut total = tape.add(l_mos, l_con);

    let mut emb_val = 0.0;
    let mut scores_val = 0.0;
    if weights.uses_slices() {
        let mut emb_acc: Option<Var> = None;
        let mut scores_acc: Option<Var> = None;
        for u in utts {
            let (h_full, h_slice, q_full, q_slice, spec) =
                u.slice.as_ref().expect("slice vars required when weighted");
            let le = g_loss_emb(tape, *h_full, *h_slice, spec);
            let ls = g_loss_scores(tape, *q_full, *q_slice, spec);
            emb_acc = Some(match emb_acc {
                None => le,
                Some(a) => tape.add(a, le),
            });
            scores_acc = Some(match scores_acc {
                None => ls,
                Some(a) => tape.add(a, ls),
            });
        }
        let l_emb = tape.scale(emb_acc.expect("non-empty"), inv_n);
        let l_scores = tape.scale(scores_acc.expect("non-empty"), inv_n);
        emb_val = tape.scalar_value(l_emb).to_f64();
        scores_val = tape.scalar_value(l_scores).to_f64();
        if weights.lambda_emb > 0.0 {
            let w = tape.scale(l_emb, S::from_f64(weights.lambda_emb));
            total = tape.add(total, w);
        }
        if weights.lambda_scores > 0.0 {
            let w = tape.scale(l_scores, S::from_f64(weights.lambda_scores));
            total = tape.add(total, w);
        }
    }

    let mut qnet_val = 0.0;
    if weights.lambda_qnet > 0.0 {
        assert_eq!(
            q_vars.len(),
            utts.len(),
            "frame-score vars required when lambda_qnet > 0"
        );
        let mut acc: Option<Var> = None;
        for (u, &q) in utts.iter().zip(q_vars) {
            let p = g_qualitynet_penalty(tape, u.y_hat, q, weights.y_max);
            acc = Some(match acc {
                None => p,
                Some(a) => tape.add(a, p),
            });
        }
        let l_qnet = tape.scale(acc.expect("non-empty"), inv_n);
        qnet_val = tape.scalar_value(l_qnet).to_f64();
        let w = tape.scale(l_qnet, S::from_f64(weights.lambda_qnet));
        total = tape.add(total, w);
    }

    let breakdown = LossBreakdown {
        l_mos: tape.scalar_value(l_mos).to_f64(),
        l_con: tape.scalar_value(l_con).to_f64(),
        l_emb: emb_val,
        l_scores: scores_val,
        l_qnet: qnet_val,
        total: tape.scalar_value(total).to_f64(),
    };
    Ok((total, breakdown))
}
