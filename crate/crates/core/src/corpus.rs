//! Synthetic degradation corpus: harmonic carrier signals with injected
//! artefact segments, ground-truth event lists, and derived MOS labels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{merge_intervals, Event, EventList};
use crate::signal::{Waveform, DEFAULT_SAMPLE_RATE};

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("zero utterances requested")]
    ZeroUtterances,
    #[error("invalid range for {0}")]
    InvalidRange(&'static str),
    #[error("no degradation types configured")]
    NoTypes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationType {
    BurstNoise,
    Clipping,
    Dropout,
    Hum,
}

impl DegradationType {
    pub const ALL: [DegradationType; 4] = [
        DegradationType::BurstNoise,
        DegradationType::Clipping,
        DegradationType::Dropout,
        DegradationType::Hum,
    ];
}

impl fmt::Display for DegradationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DegradationType::BurstNoise => "burst_noise",
            DegradationType::Clipping => "clipping",
            DegradationType::Dropout => "dropout",
            DegradationType::Hum => "hum",
        };
        f.write_str(s)
    }
}

impl FromStr for DegradationType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "burst_noise" => Ok(DegradationType::BurstNoise),
            "clipping" => Ok(DegradationType::Clipping),
            "dropout" => Ok(DegradationType::Dropout),
            "hum" => Ok(DegradationType::Hum),
            other => Err(format!("unknown degradation type: {other}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_utterances: usize,
    /// Utterance duration bounds in seconds, inclusive.
    pub duration_range: (f64, f64),
    pub degradation_types: Vec<DegradationType>,
    /// Severity bounds in [0, 1], inclusive.
    pub severity_range: (f64, f64),
    /// Injected events per utterance, inclusive bounds.
    pub events_per_utt_range: (usize, usize),
    /// Injected event duration bounds in seconds, inclusive.
    #[serde(default = "default_event_duration_range")]
    pub event_duration_range: (f64, f64),
    pub seed: u64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
}

fn default_event_duration_range() -> (f64, f64) {
    (0.25, 1.0)
}

fn default_sample_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_utterances: 8,
            duration_range: (3.0, 5.0),
            degradation_types: DegradationType::ALL.to_vec(),
            severity_range: (0.2, 1.0),
            events_per_utt_range: (0, 3),
            event_duration_range: default_event_duration_range(),
            seed: 0,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_utterances == 0 {
            return Err(CorpusError::ZeroUtterances);
        }
        if self.degradation_types.is_empty() {
            return Err(CorpusError::NoTypes);
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if !ordered(self.duration_range) || self.duration_range.0 <= 0.0 {
            return Err(CorpusError::InvalidRange("duration_range"));
        }
        if !ordered(self.severity_range)
            || self.severity_range.0 < 0.0
            || self.severity_range.1 > 1.0
        {
            return Err(CorpusError::InvalidRange("severity_range"));
        }
        if self.events_per_utt_range.0 > self.events_per_utt_range.1 {
            return Err(CorpusError::InvalidRange("events_per_utt_range"));
        }
        if !ordered(self.event_duration_range) || self.event_duration_range.0 <= 0.0 {
            return Err(CorpusError::InvalidRange("event_duration_range"));
        }
        if self.event_duration_range.1 > self.duration_range.0 {
            return Err(CorpusError::InvalidRange("event_duration_range"));
        }
        Ok(())
    }
}

/// One merged degradation segment with its generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Degradation {
    pub onset_s: f64,
    pub offset_s: f64,
    pub kind: DegradationType,
    pub severity: f64,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub utt_id: String,
    pub waveform: Waveform,
    pub mos: f64,
    pub system_id: String,
    pub events: EventList,
    pub degradations: Vec<Degradation>,
}

/// MOS label: clamp(5 - 4 * sum(severity_i * duration_i) / duration, 1, 5)
/// over the merged degradation segments.
pub fn mos_label(degradations: &[Degradation], duration_s: f64) -> f64 {
    let weighted: f64 = degradations
        .iter()
        .map(|d| d.severity * (d.offset_s - d.onset_s))
        .sum();
    (5.0 - 4.0 * weighted / duration_s).clamp(1.0, 5.0)
}

/// Deterministic per-utterance generation; the stream seed is
/// `cfg.seed + index`, so any subset can be generated independently.
pub fn generate_utterance(cfg: &CorpusConfig, index: usize) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index as u64));
    let utt_id = format!("utt_{index:05}");

    // Draw order is part of the determinism contract: duration, carrier
    // parameters, event count, profile, then per-event parameters.
    let duration_s = rng.gen_range(cfg.duration_range.0..=cfg.duration_range.1);
    let n = (duration_s * f64::from(cfg.sample_rate)).round() as usize;
    let mut samples = carrier(&mut rng, n, cfg.sample_rate);

    let n_events = rng.gen_range(cfg.events_per_utt_range.0..=cfg.events_per_utt_range.1);
    let (system_id, kind, sev_range) = profile(&mut rng, cfg, n_events);

    let mut intervals = Vec::with_capacity(n_events);
    let mut severities = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        let max_dur = cfg.event_duration_range.1.min(duration_s);
        let dur = rng.gen_range(cfg.event_duration_range.0..=max_dur);
        let onset = rng.gen_range(0.0..=(duration_s - dur));
        intervals.push((onset, onset + dur));
        severities.push(rng.gen_range(sev_range.0..=sev_range.1));
    }

    let mut degradations = Vec::new();
    for ((on, off), members) in merge_intervals(&intervals) {
        let severity = members
            .iter()
            .map(|&i| severities[i])
            .fold(f64::NEG_INFINITY, f64::max);
        degradations.push(Degradation {
            onset_s: on,
            offset_s: off,
            kind,
            severity,
        });
    }

    for d in &degradations {
        apply_degradation(&mut samples, cfg.sample_rate, d, &mut rng);
    }
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }

    let mos = mos_label(&degradations, duration_s);
    let events = EventList::new(
        utt_id.clone(),
        degradations
            .iter()
            .map(|d| Event::new(d.onset_s, d.offset_s).unwrap())
            .collect(),
    )
    .expect("merged intervals are disjoint");

    Utterance {
        waveform: Waveform::new(samples, cfg.sample_rate).unwrap(),
        utt_id,
        mos,
        system_id,
        events,
        degradations,
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<Utterance>, CorpusError> {
    cfg.validate()?;
    Ok((0..cfg.n_utterances)
        .map(|i| generate_utterance(cfg, i))
        .collect())
}

/// Harmonic carrier: randomized f0 with three decaying harmonics, a slow
/// amplitude envelope, and a light noise floor.
fn carrier(rng: &mut ChaCha8Rng, n: usize, sample_rate: u32) -> Vec<f32> {
    let f0 = rng.gen_range(100.0..250.0);
    let amps = [
        0.45 * rng.gen_range(0.8..1.2),
        0.20 * rng.gen_range(0.8..1.2),
        0.10 * rng.gen_range(0.8..1.2),
    ];
    let env_rate = rng.gen_range(0.5..2.0);
    let env_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let sr = f64::from(sample_rate);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let env = 0.75 + 0.2 * (std::f64::consts::TAU * env_rate * t + env_phase).sin();
        let mut s = 0.0;
        for (h, amp) in amps.iter().enumerate() {
            s += amp * (std::f64::consts::TAU * f0 * (h + 1) as f64 * t).sin();
        }
        let noise = rng.gen_range(-1.0..1.0) * 0.005;
        out.push((env * s + noise) as f32);
    }
    out
}

/// System assignment: clean utterances form one system; degraded utterances
/// are grouped by degradation type and severity tier, and their events draw
/// severities from the tier's half of the configured range.
fn profile(
    rng: &mut ChaCha8Rng,
    cfg: &CorpusConfig,
    n_events: usize,
) -> (String, DegradationType, (f64, f64)) {
    let kind = cfg.degradation_types[rng.gen_range(0..cfg.degradation_types.len())];
    let (lo, hi) = cfg.severity_range;
    let mid = 0.5 * (lo + hi);
    let high_tier = rng.gen_bool(0.5);
    if n_events == 0 {
        return ("clean".to_string(), kind, (lo, hi));
    }
    let (tier, range) = if high_tier {
        ("high", (mid, hi))
    } else {
        ("low", (lo, mid))
    };
    (format!("{kind}-{tier}"), kind, range)
}

fn apply_degradation(
    samples: &mut [f32],
    sample_rate: u32,
    d: &Degradation,
    rng: &mut ChaCha8Rng,
) {
    let sr = f64::from(sample_rate);
    let start = (d.onset_s * sr).floor().max(0.0) as usize;
    let end = ((d.offset_s * sr).ceil() as usize).min(samples.len());
    if start >= end {
        return;
    }
    let v = d.severity;
    match d.kind {
        DegradationType::BurstNoise => {
            let amp = (0.1 + 0.4 * v) as f32;
            for s in &mut samples[start..end] {
                *s += amp * rng.gen_range(-1.0f32..1.0);
            }
        }
        DegradationType::Clipping => {
            let peak = samples[start..end]
                .iter()
                .fold(0f32, |m, &s| m.max(s.abs()))
                .max(1e-3);
            let gain = (1.0 + 9.0 * v) as f32;
            let ceiling = peak * (1.0 - 0.7 * v as f32).max(0.05);
            for s in &mut samples[start..end] {
                *s = (*s * gain).clamp(-ceiling, ceiling);
            }
        }
        DegradationType::Dropout => {
            let factor = (1.0 - v) as f32;
            for s in &mut samples[start..end] {
                *s *= factor;
            }
        }
        DegradationType::Hum => {
            let amp = 0.08 + 0.42 * v;
            for (i, s) in samples[start..end].iter_mut().enumerate() {
                let t = (start + i) as f64 / sr;
                *s += (amp * (std::f64::consts::TAU * 50.0 * t).sin()) as f32;
            }
        }
    }
}
