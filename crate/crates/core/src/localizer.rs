//! Frame-score localization: false-alarm-calibrated thresholding, majority
//! smoothing, short-run pruning, and segment extraction, plus supervised
//! change-point threshold tuning against labeled events.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, EventList};
use crate::metrics::{
    intersection_eval, threshold_candidates, DetectionReport, EvalConfig, MetricError,
};
use crate::model::{forward, ArchConfig, FrameScores, ModelError, ModelParams};
use crate::signal::{preprocess, SignalError, Waveform};

#[derive(Debug, Error)]
pub enum LocalizerError {
    #[error("empty score sequence")]
    EmptyScores,
    #[error("invalid false-alarm rate {0} (must lie in [0, 1))")]
    BadFar(f64),
    #[error("invalid detection config: {0}")]
    BadConfig(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("signal error: {0}")]
    Signal(#[from] SignalError),
    #[error("metric error: {0}")]
    Metric(#[from] MetricError),
    #[error("event error: {0}")]
    Event(#[from] crate::events::EventError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    /// Fraction of frames allowed below threshold on nominal input.
    #[serde(default = "default_far")]
    pub target_far: f64,
    #[serde(default = "default_smooth_window")]
    pub smooth_window_s: f64,
    #[serde(default = "default_min_duration")]
    pub min_duration_s: f64,
    /// Fixed threshold; when absent the threshold is calibrated from the
    /// scores being detected on.
    #[serde(default)]
    pub threshold: Option<f64>,
}

fn default_far() -> f64 {
    0.01
}
fn default_smooth_window() -> f64 {
    0.2
}
fn default_min_duration() -> f64 {
    0.1
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            target_far: default_far(),
            smooth_window_s: default_smooth_window(),
            min_duration_s: default_min_duration(),
            threshold: None,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), LocalizerError> {
        if !(self.target_far >= 0.0 && self.target_far < 1.0) {
            return Err(LocalizerError::BadFar(self.target_far));
        }
        if !(self.smooth_window_s >= 0.0 && self.smooth_window_s.is_finite()) {
            return Err(LocalizerError::BadConfig(format!(
                "smooth_window_s = {}",
                self.smooth_window_s
            )));
        }
        if !(self.min_duration_s >= 0.0 && self.min_duration_s.is_finite()) {
            return Err(LocalizerError::BadConfig(format!(
                "min_duration_s = {}",
                self.min_duration_s
            )));
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(LocalizerError::BadConfig(format!("threshold = {t}")));
            }
        }
        Ok(())
    }
}

/// Threshold calibrated so that at most `far * n` frames fall strictly below
/// it: the k-th smallest score with k = floor(far * n) + 1, clamped to n.
///
/// With distinct scores exactly floor(far * n) frames are flagged, so the
/// achieved rate lies in [far - 1/n, far].
pub fn select_threshold(scores: &[f32], far: f64) -> Result<f64, LocalizerError> {
    if scores.is_empty() {
        return Err(LocalizerError::EmptyScores);
    }
    if !(far >= 0.0 && far < 1.0) {
        return Err(LocalizerError::BadFar(far));
    }
    let n = scores.len();
    let k = ((far * n as f64).floor() as usize + 1).min(n);
    let mut sorted: Vec<f32> = scores.to_vec();
    sorted.sort_by(f32::total_cmp);
    Ok(f64::from(sorted[k - 1]))
}

/// Frame-level alarm mask: true where the score is strictly below the
/// threshold.
pub fn binarize(scores: &[f32], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&q| f64::from(q) < threshold).collect()
}

/// Majority vote over a centered window, indices clamped at the edges so
/// boundary frames reuse the edge value. Ties count as alarms.
pub fn smooth_mask(mask: &[bool], window: usize) -> Vec<bool> {
    assert!(window >= 1, "window must be at least 1");
    let n = mask.len();
    let half = window / 2;
    (0..n)
        .map(|t| {
            let mut ones = 0usize;
            for off in 0..window {
                let idx = (t + off).saturating_sub(half).min(n - 1);
                if mask[idx] {
                    ones += 1;
                }
            }
            ones * 2 >= window
        })
        .collect()
}

/// Centered window length in frames: round(seconds * fps), bumped to the
/// next odd number, never below 1.
pub fn smooth_window_frames(seconds: f64, fps: u32) -> usize {
    let w = (seconds * f64::from(fps)).round() as usize;
    let w = w.max(1);
    if w % 2 == 0 {
        w + 1
    } else {
        w
    }
}

/// Minimum run length in frames: round(seconds * fps), never below 1.
pub fn min_duration_frames(seconds: f64, fps: u32) -> usize {
    ((seconds * f64::from(fps)).round() as usize).max(1)
}

/// Maximal runs of true frames as inclusive (start, end) index pairs.
pub fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len() - 1));
    }
    out
}

/// Zeroes maximal runs shorter than `min_frames`; runs of exactly
/// `min_frames` survive.
pub fn prune_short_runs(mask: &mut [bool], min_frames: usize) {
    for (s, e) in runs(mask) {
        if e - s + 1 < min_frames {
            for m in &mut mask[s..=e] {
                *m = false;
            }
        }
    }
}

/// Converts the mask's runs to time segments: a run over frames
/// [start, end] spans (start / fps, (end + 1) / fps) seconds.
pub fn extract_segments(mask: &[bool], fps: u32) -> Vec<(f64, f64)> {
    runs(mask)
        .into_iter()
        .map(|(s, e)| (s as f64 / f64::from(fps), (e + 1) as f64 / f64::from(fps)))
        .collect()
}

/// One detected low-quality segment with the worst frame score it contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub onset_s: f64,
    pub offset_s: f64,
    pub min_frame_score: f64,
}

fn postprocess(mask: Vec<bool>, scores: &FrameScores, cfg: &DetectionConfig) -> Vec<Detection> {
    let window = smooth_window_frames(cfg.smooth_window_s, scores.fps);
    let mut mask = smooth_mask(&mask, window);
    prune_short_runs(&mut mask, min_duration_frames(cfg.min_duration_s, scores.fps));
    let fps = f64::from(scores.fps);
    runs(&mask)
        .into_iter()
        .map(|(s, e)| {
            let min = scores.scores[s..=e]
                .iter()
                .cloned()
                .fold(f32::INFINITY, f32::min);
            Detection {
                onset_s: s as f64 / fps,
                offset_s: (e + 1) as f64 / fps,
                min_frame_score: f64::from(min),
            }
        })
        .collect()
}

/// Full localization from existing frame scores: threshold (fixed or
/// calibrated), binarize, smooth, prune, extract.
pub fn detect_from_scores(
    scores: &FrameScores,
    cfg: &DetectionConfig,
) -> Result<Vec<Detection>, LocalizerError> {
    cfg.validate()?;
    let threshold = match cfg.threshold {
        Some(t) => t,
        None => select_threshold(&scores.scores, cfg.target_far)?,
    };
    Ok(postprocess(
        binarize(&scores.scores, threshold),
        scores,
        cfg,
    ))
}

/// Preprocesses a raw waveform, scores it with the model, and localizes.
pub fn detect(
    params: &ModelParams<f32>,
    arch: &ArchConfig,
    w: &Waveform,
    cfg: &DetectionConfig,
) -> Result<Vec<Detection>, LocalizerError> {
    let prepped = preprocess(w)?;
    let out = forward(params, arch, &prepped)?;
    detect_from_scores(&out.scores, cfg)
}

pub fn detections_to_events(
    utt_id: String,
    detections: &[Detection],
) -> Result<EventList, LocalizerError> {
    let events = detections
        .iter()
        .map(|d| Event::new(d.onset_s, d.offset_s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EventList::from_unsorted(utt_id, events)?)
}

/// Exhaustive change-point threshold search: candidate thresholds are the
/// midpoints between adjacent distinct pooled scores plus sentinels beyond
/// both extremes; every candidate runs the full detection pipeline and is
/// scored with intersection-based F1. Ties resolve to the smallest
/// threshold.
pub fn tune_threshold(
    frame_scores: &[(String, FrameScores)],
    ground_truth: &[EventList],
    det_cfg: &DetectionConfig,
    eval_cfg: &EvalConfig,
) -> Result<(f64, DetectionReport), LocalizerError> {
    det_cfg.validate()?;
    eval_cfg.validate()?;
    if frame_scores.is_empty() {
        return Err(LocalizerError::EmptyScores);
    }
    let pooled: Vec<f64> = frame_scores
        .iter()
        .flat_map(|(_, fs)| fs.scores.iter().map(|&q| f64::from(q)))
        .collect();
    let mut best: Option<(f64, DetectionReport)> = None;
    for theta in threshold_candidates(&pooled) {
        let cfg = DetectionConfig {
            threshold: Some(theta),
            ..det_cfg.clone()
        };
        let detections = frame_scores
            .iter()
            .map(|(utt_id, fs)| {
                let dets = detect_from_scores(fs, &cfg)?;
                detections_to_events(utt_id.clone(), &dets)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut report = intersection_eval(eval_cfg, &detections, ground_truth)?;
        report.threshold = Some(theta);
        // Strict improvement required: candidates ascend, so ties keep the
        // smallest threshold.
        if best.as_ref().map_or(true, |(_, b)| report.f1 > b.f1) {
            best = Some((theta, report));
        }
    }
    Ok(best.expect("candidate list is never empty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(scores: Vec<f32>) -> FrameScores {
        FrameScores::new(scores, 50).unwrap()
    }

    #[test]
    fn threshold_is_kth_smallest() {
        let scores: Vec<f32> = (1..=100).map(|i| i as f32).collect();
        // k = floor(0.05 * 100) + 1 = 6.
        assert_eq!(select_threshold(&scores, 0.05).unwrap(), 6.0);
        // far = 0 flags nothing: threshold is the minimum, strict < is empty.
        assert_eq!(select_threshold(&scores, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn threshold_achieved_rate_bracket() {
        let n = 100_000usize;
        let scores: Vec<f32> = (0..n).map(|i| 1.0 + i as f32 * 1e-4).collect();
        let far = 0.01;
        let theta = select_threshold(&scores, far).unwrap();
        let flagged = binarize(&scores, theta).iter().filter(|b| **b).count();
        let achieved = flagged as f64 / n as f64;
        assert!(achieved <= far, "{achieved} > {far}");
        assert!(achieved >= far - 1.0 / n as f64, "{achieved} too low");
    }

    #[test]
    fn threshold_rejects_bad_input() {
        assert!(matches!(
            select_threshold(&[], 0.1),
            Err(LocalizerError::EmptyScores)
        ));
        assert!(matches!(
            select_threshold(&[1.0], 1.0),
            Err(LocalizerError::BadFar(_))
        ));
    }

    #[test]
    fn binarize_is_strict() {
        let m = binarize(&[1.0, 2.0, 3.0], 2.0);
        assert_eq!(m, vec![true, false, false]);
    }

    #[test]
    fn smooth_window_sizes() {
        assert_eq!(smooth_window_frames(0.2, 50), 11);
        assert_eq!(smooth_window_frames(0.1, 50), 5);
        assert_eq!(smooth_window_frames(0.0, 50), 1);
        assert_eq!(min_duration_frames(0.1, 50), 5);
    }

    #[test]
    fn smooth_fills_gap_and_drops_blip() {
        // A lone alarm inside a clean stretch disappears; a lone clean frame
        // inside an alarm stretch is filled.
        let mut mask = vec![false; 21];
        mask[10] = true;
        assert!(smooth_mask(&mask, 5).iter().all(|m| !m));
        let mut mask = vec![true; 21];
        mask[10] = false;
        assert!(smooth_mask(&mask, 5).iter().all(|m| *m));
    }

    #[test]
    fn smooth_ties_become_alarms() {
        // Even window of 4: exactly 2 ones is a tie, resolved to alarm.
        let mask = vec![true, true, false, false];
        let sm = smooth_mask(&mask, 4);
        // At t=2 the clamped window covers indices 0..=3: two ones, tie.
        assert!(sm[2]);
    }

    #[test]
    fn smooth_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let window = 2 * rng.gen_range(0..4) + 1;
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let got = smooth_mask(&mask, window);
            let half = window / 2;
            let want: Vec<bool> = (0..n)
                .map(|t| {
                    let mut ones = 0;
                    for off in -(half as isize)..=(half as isize) {
                        let idx = (t as isize + off).clamp(0, n as isize - 1) as usize;
                        if mask[idx] {
                            ones += 1;
                        }
                    }
                    ones * 2 >= window
                })
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn prune_keeps_exact_minimum() {
        let mut mask = vec![false; 20];
        mask[2..7].fill(true); // run of 5
        mask[10..14].fill(true); // run of 4
        prune_short_runs(&mut mask, 5);
        assert!(mask[2..7].iter().all(|m| *m));
        assert!(mask[10..14].iter().all(|m| !m));
    }

    #[test]
    fn segments_use_frame_edges() {
        let mut mask = vec![false; 20];
        mask[5..10].fill(true); // frames 5..=9
        assert_eq!(extract_segments(&mask, 50), vec![(0.1, 0.2)]);
    }

    #[test]
    fn runs_handles_tail() {
        assert_eq!(
            runs(&[true, false, true, true]),
            vec![(0, 0), (2, 3)]
        );
        assert_eq!(runs(&[false, false]), vec![]);
        assert_eq!(runs(&[true]), vec![(0, 0)]);
    }

    #[test]
    fn detect_from_scores_end_to_end() {
        // 100 frames at 4.0, a dip of 8 frames at 2.0 starting at frame 30.
        let mut scores = vec![4.0f32; 100];
        for q in scores[30..38].iter_mut() {
            *q = 2.0;
        }
        let cfg = DetectionConfig {
            threshold: Some(3.0),
            ..DetectionConfig::default()
        };
        let dets = detect_from_scores(&fs(scores), &cfg).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        // Smoothing with an 11-frame window erodes a step edge by 2 frames
        // on each side (5 neighbors needed below threshold).
        assert!(d.onset_s > 0.55 && d.onset_s < 0.70, "onset {}", d.onset_s);
        assert!(d.offset_s > 0.70 && d.offset_s < 0.85, "offset {}", d.offset_s);
        assert_eq!(d.min_frame_score, 2.0);
    }

    #[test]
    fn detect_without_fixed_threshold_calibrates() {
        let mut scores = vec![4.0f32; 200];
        for (i, q) in scores[50..60].iter_mut().enumerate() {
            *q = 1.5 + 0.01 * i as f32;
        }
        let cfg = DetectionConfig {
            target_far: 0.05,
            ..DetectionConfig::default()
        };
        let dets = detect_from_scores(&fs(scores), &cfg).unwrap();
        assert_eq!(dets.len(), 1);
        assert!(dets[0].onset_s >= 0.9 && dets[0].offset_s <= 1.3);
    }

    #[test]
    fn tune_recovers_separating_threshold() {
        // Utterance of 100 frames: frames 20..=39 score 2.0, rest 4.0; the
        // ground truth marks exactly that span.
        let mut scores = vec![4.0f32; 100];
        scores[20..40].fill(2.0);
        let gt = EventList::from_unsorted(
            "u".to_string(),
            vec![Event::new(0.4, 0.8).unwrap()],
        )
        .unwrap();
        let (theta, report) = tune_threshold(
            &[("u".to_string(), fs(scores))],
            &[gt],
            &DetectionConfig::default(),
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(theta, 3.0, "midpoint of the two distinct scores");
        assert_eq!(report.f1, 1.0);
        assert_eq!(report.threshold, Some(3.0));
    }

    #[test]
    fn tune_ties_pick_smallest_threshold() {
        // Constant scores: every candidate yields the same (empty) detection
        // set, so the below-minimum sentinel wins.
        let scores = vec![4.0f32; 30];
        let gt = EventList::empty("u".to_string());
        let (theta, report) = tune_threshold(
            &[("u".to_string(), fs(scores))],
            &[gt],
            &DetectionConfig::default(),
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(theta, 3.0, "sentinel below the single distinct score");
        assert_eq!(report.tp, 0);
    }

    #[test]
    fn config_validation() {
        let bad = DetectionConfig {
            target_far: 1.0,
            ..DetectionConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DetectionConfig {
            threshold: Some(f64::NAN),
            ..DetectionConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
