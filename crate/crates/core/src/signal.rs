//! Waveform container, 16-bit mono WAV I/O, and the preprocessing chain:
//! RMS loudness equalization followed by mean/std normalization.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 16000;
pub const DEFAULT_TARGET_DBFS: f64 = -18.0;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("missing {0} chunk")]
    MissingChunk(&'static str),
    #[error("non-mono: {0} channels")]
    NonMono(u16),
    #[error("unsupported encoding: format {format}, {bits} bits")]
    UnsupportedEncoding { format: u16, bits: u16 },
    #[error("silent input")]
    SilentInput,
    #[error("zero variance")]
    ZeroVariance,
    #[error("empty waveform")]
    Empty,
    #[error("non-finite sample")]
    NonFinite,
}

/// Mono audio; samples live in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, SignalError> {
        if samples.is_empty() {
            return Err(SignalError::Empty);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(SignalError::NonFinite);
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Root-mean-square amplitude, accumulated in f64.
    pub fn rms(&self) -> f64 {
        let sum: f64 = self.samples.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
        (sum / self.samples.len() as f64).sqrt()
    }
}

/// Reads a PCM 16-bit mono WAV; int16 values are scaled by 1/32768.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform, SignalError> {
    let bytes = fs::read(path)?;
    parse_wav(&bytes)
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform, SignalError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(SignalError::NotWave);
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(SignalError::NotWave);
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(SignalError::NotWave);
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // RIFF chunks are word-aligned; odd sizes carry one pad byte.
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or(SignalError::MissingChunk("fmt "))?;
    if channels != 1 {
        return Err(SignalError::NonMono(channels));
    }
    if format != 1 || bits != 16 {
        return Err(SignalError::UnsupportedEncoding { format, bits });
    }
    let data = data.ok_or(SignalError::MissingChunk("data"))?;
    let samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|c| f32::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
        .collect();
    Waveform::new(samples, rate)
}

/// Writes a PCM 16-bit mono WAV; samples are clamped to [-1, 1] and rounded
/// to round(s * 32768), so 0.5 round-trips to exactly 16384.
pub fn save_waveform(path: impl AsRef<Path>, w: &Waveform) -> Result<(), SignalError> {
    let mut bytes = Vec::with_capacity(44 + 2 * w.samples.len());
    let data_len = (2 * w.samples.len()) as u32;
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes());
    bytes.extend_from_slice(&w.sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(2 * w.sample_rate).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes());
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (f64::from(s).clamp(-1.0, 1.0) * 32768.0).round();
        let q = q.clamp(-32768.0, 32767.0) as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Scales the signal so its RMS sits at `target_dbfs` (10^(dBFS/20) linear).
pub fn loudness_equalize(w: &Waveform, target_dbfs: f64) -> Result<Waveform, SignalError> {
    let rms = w.rms();
    if rms <= 0.0 {
        return Err(SignalError::SilentInput);
    }
    let factor = 10f64.powf(target_dbfs / 20.0) / rms;
    let samples = w.samples.iter().map(|&s| (f64::from(s) * factor) as f32).collect();
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Shifts to zero mean and scales to unit population standard deviation.
pub fn mean_std_normalize(w: &Waveform) -> Result<Waveform, SignalError> {
    let n = w.samples.len() as f64;
    let mean: f64 = w.samples.iter().map(|&s| f64::from(s)).sum::<f64>() / n;
    let var: f64 = w
        .samples
        .iter()
        .map(|&s| {
            let d = f64::from(s) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        return Err(SignalError::ZeroVariance);
    }
    let std = var.sqrt();
    let samples = w
        .samples
        .iter()
        .map(|&s| ((f64::from(s) - mean) / std) as f32)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Full input chain: loudness equalization to -18 dBFS, then mean/std
/// normalization. Model forward passes consume this output.
pub fn preprocess(w: &Waveform) -> Result<Waveform, SignalError> {
    mean_std_normalize(&loudness_equalize(w, DEFAULT_TARGET_DBFS)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(n: usize, freq: f64, amp: f64, sr: u32) -> Waveform {
        let samples = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(sr)).sin()) as f32)
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = sine(16000, 220.0, 0.5, 16000);
        save_waveform(&path, &w).unwrap();
        let r = load_waveform(&path).unwrap();
        assert_eq!(r.sample_rate, 16000);
        assert_eq!(r.samples.len(), 16000);
        for (a, b) in w.samples.iter().zip(&r.samples) {
            assert!((a - b).abs() < 1.0 / 32768.0 + 1e-7);
        }
    }

    #[test]
    fn one_second_wav_has_16000_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        save_waveform(&path, &sine(16000, 100.0, 0.3, 16000)).unwrap();
        assert_eq!(load_waveform(&path).unwrap().len(), 16000);
    }

    #[test]
    fn int16_16384_is_half() {
        let mut bytes = Vec::new();
        let w = Waveform::new(vec![0.5], 16000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.wav");
        save_waveform(&path, &w).unwrap();
        bytes.extend_from_slice(&fs::read(&path).unwrap());
        let i16val = i16::from_le_bytes([bytes[44], bytes[45]]);
        assert_eq!(i16val, 16384);
        let r = load_waveform(&path).unwrap();
        assert!((r.samples[0] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn stereo_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&40u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&64000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_waveform(&path), Err(SignalError::NonMono(2))));
    }

    #[test]
    fn loudness_hits_target_rms() {
        let w = sine(16000, 440.0, 0.9, 16000);
        let out = loudness_equalize(&w, -18.0).unwrap();
        let target = 10f64.powf(-18.0 / 20.0);
        assert!((out.rms() - target).abs() < 1e-6);
    }

    #[test]
    fn loudness_identity_when_already_at_target() {
        let w = sine(16000, 440.0, 0.9, 16000);
        let once = loudness_equalize(&w, -18.0).unwrap();
        let twice = loudness_equalize(&once, -18.0).unwrap();
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn loudness_full_scale_sine_factor() {
        // RMS of a full-scale sine is 1/sqrt(2); the -18 dBFS factor is
        // 10^(-0.9) * sqrt(2) = 0.17815 applied to the peak.
        let w = sine(160000, 100.0, 1.0, 16000);
        let out = loudness_equalize(&w, -18.0).unwrap();
        let peak = out.samples.iter().fold(0f32, |m, &s| m.max(s.abs()));
        let expect = 10f64.powf(-18.0 / 20.0) * 2f64.sqrt();
        assert!((f64::from(peak) - expect).abs() < 1e-3, "peak {peak} vs {expect}");
    }

    #[test]
    fn silent_input_errors() {
        let w = Waveform::new(vec![0.0; 100], 16000).unwrap();
        assert!(matches!(
            loudness_equalize(&w, -18.0),
            Err(SignalError::SilentInput)
        ));
    }

    #[test]
    fn normalize_two_points() {
        let w = Waveform::new(vec![0.0, 2.0], 16000).unwrap();
        let out = mean_std_normalize(&w).unwrap();
        assert!((out.samples[0] + 1.0).abs() < 1e-6);
        assert!((out.samples[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_constant_errors() {
        let w = Waveform::new(vec![0.5; 64], 16000).unwrap();
        assert!(matches!(
            mean_std_normalize(&w),
            Err(SignalError::ZeroVariance)
        ));
    }

    #[test]
    fn normalize_idempotent() {
        let w = sine(4000, 330.0, 0.7, 16000);
        let once = mean_std_normalize(&w).unwrap();
        let twice = mean_std_normalize(&once).unwrap();
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            assert!((a - b).abs() < 1e-6);
        }
        let mean: f64 = once.samples.iter().map(|&s| f64::from(s)).sum::<f64>()
            / once.samples.len() as f64;
        assert!(mean.abs() < 1e-6);
    }
}
