//! On-disk formats: corpus manifests, event tables, frame-score tables with
//! an fps header line, detection tables, and utterance-score tables. All
//! writes are atomic (temp file then rename) and floats round-trip exactly
//! through their shortest decimal form.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DegradationType, Utterance};
use crate::events::{merge_intervals, Event, EventError, EventList};
use crate::model::FrameScores;
use crate::signal::{load_waveform, save_waveform, SignalError, Waveform};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("signal error: {0}")]
    Signal(#[from] SignalError),
    #[error("event error: {0}")]
    Event(#[from] EventError),
    #[error("frame-score file missing '# fps=' header line")]
    MissingFpsHeader,
    #[error("invalid fps header: {0:?}")]
    BadFpsHeader(String),
    #[error("frame indices for {utt_id} are not contiguous from zero")]
    NonContiguousFrames { utt_id: String },
    #[error("empty table in {0}")]
    EmptyTable(PathBuf),
}

/// Writes bytes to a temp file beside the target, then renames into place.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), FormatError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), FormatError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T, FormatError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub mos: f64,
    pub system_id: String,
}

fn csv_to_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    Ok(w.into_inner().expect("vec sink never fails"))
}

fn csv_from_bytes<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>, FormatError> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(Into::into)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<(), FormatError> {
    atomic_write(path, &csv_to_bytes(rows)?)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>, FormatError> {
    csv_from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub utt_id: String,
    pub onset_s: f64,
    pub offset_s: f64,
    #[serde(rename = "type")]
    pub kind: DegradationType,
    pub severity: f64,
}

pub fn write_events(path: impl AsRef<Path>, rows: &[EventRow]) -> Result<(), FormatError> {
    atomic_write(path, &csv_to_bytes(rows)?)
}

pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<EventRow>, FormatError> {
    csv_from_bytes(&fs::read(path)?)
}

/// Groups event rows by utterance and merges overlapping or touching spans
/// into one ground-truth interval each, preserving first-seen utterance
/// order.
pub fn ground_truth_from_rows(rows: &[EventRow]) -> Result<Vec<EventList>, FormatError> {
    let mut order: Vec<String> = Vec::new();
    let mut spans: std::collections::BTreeMap<String, Vec<(f64, f64)>> =
        std::collections::BTreeMap::new();
    for row in rows {
        if !spans.contains_key(&row.utt_id) {
            order.push(row.utt_id.clone());
        }
        spans
            .entry(row.utt_id.clone())
            .or_default()
            .push((row.onset_s, row.offset_s));
    }
    order
        .into_iter()
        .map(|utt_id| {
            let merged = merge_intervals(&spans[&utt_id]);
            let events = merged
                .into_iter()
                .map(|((a, b), _)| Event::new(a, b))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(EventList::from_unsorted(utt_id, events)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameScoreRow {
    utt_id: String,
    frame_idx: usize,
    score: f32,
}

/// Frame-score table: a `# fps=N` header line followed by CSV rows
/// `utt_id,frame_idx,score` with contiguous zero-based frame indices per
/// utterance.
pub fn write_frame_scores(
    path: impl AsRef<Path>,
    scores: &[(String, FrameScores)],
) -> Result<(), FormatError> {
    let fps = scores.first().map_or(crate::FPS, |(_, fs)| fs.fps);
    let rows: Vec<FrameScoreRow> = scores
        .iter()
        .flat_map(|(utt_id, fs)| {
            fs.scores.iter().enumerate().map(move |(i, &q)| FrameScoreRow {
                utt_id: utt_id.clone(),
                frame_idx: i,
                score: q,
            })
        })
        .collect();
    let mut bytes = format!("# fps={fps}\n").into_bytes();
    bytes.extend(csv_to_bytes(&rows)?);
    atomic_write(path, &bytes)
}

pub fn read_frame_scores(
    path: impl AsRef<Path>,
) -> Result<(u32, Vec<(String, FrameScores)>), FormatError> {
    let text = fs::read_to_string(&path)?;
    let (header, rest) = text.split_once('\n').ok_or(FormatError::MissingFpsHeader)?;
    let fps: u32 = header
        .strip_prefix("# fps=")
        .ok_or(FormatError::MissingFpsHeader)?
        .trim()
        .parse()
        .map_err(|_| FormatError::BadFpsHeader(header.to_string()))?;
    let rows: Vec<FrameScoreRow> = csv_from_bytes(rest.as_bytes())?;
    let mut out: Vec<(String, Vec<f32>)> = Vec::new();
    for row in rows {
        match out.last_mut() {
            Some((utt, scores)) if *utt == row.utt_id => {
                if row.frame_idx != scores.len() {
                    return Err(FormatError::NonContiguousFrames { utt_id: row.utt_id });
                }
                scores.push(row.score);
            }
            _ => {
                if row.frame_idx != 0 {
                    return Err(FormatError::NonContiguousFrames { utt_id: row.utt_id });
                }
                out.push((row.utt_id, vec![row.score]));
            }
        }
    }
    let out = out
        .into_iter()
        .map(|(utt, scores)| {
            let fs = FrameScores::new(scores, fps)
                .expect("groups are built non-empty");
            (utt, fs)
        })
        .collect();
    Ok((fps, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub utt_id: String,
    pub onset_s: f64,
    pub offset_s: f64,
    pub min_frame_score: f64,
}

pub fn write_detections(path: impl AsRef<Path>, rows: &[DetectionRow]) -> Result<(), FormatError> {
    atomic_write(path, &csv_to_bytes(rows)?)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRow>, FormatError> {
    csv_from_bytes(&fs::read(path)?)
}

/// Detections grouped per utterance in first-seen order, for evaluation.
pub fn detections_to_event_lists(rows: &[DetectionRow]) -> Result<Vec<EventList>, FormatError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_utt: std::collections::BTreeMap<String, Vec<Event>> =
        std::collections::BTreeMap::new();
    for row in rows {
        if !by_utt.contains_key(&row.utt_id) {
            order.push(row.utt_id.clone());
        }
        by_utt
            .entry(row.utt_id.clone())
            .or_default()
            .push(Event::new(row.onset_s, row.offset_s)?);
    }
    order
        .into_iter()
        .map(|utt_id| {
            let events = by_utt.remove(&utt_id).expect("inserted above");
            Ok(EventList::from_unsorted(utt_id, events)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityRow {
    pub utt_id: String,
    pub volatility: f64,
}

pub fn write_volatility(path: impl AsRef<Path>, rows: &[VolatilityRow]) -> Result<(), FormatError> {
    atomic_write(path, &csv_to_bytes(rows)?)
}

pub fn read_volatility(path: impl AsRef<Path>) -> Result<Vec<VolatilityRow>, FormatError> {
    csv_from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UttScoreRow {
    pub utt_id: String,
    pub score: f64,
}

pub fn write_utt_scores(path: impl AsRef<Path>, rows: &[UttScoreRow]) -> Result<(), FormatError> {
    atomic_write(path, &csv_to_bytes(rows)?)
}

pub fn read_utt_scores(path: impl AsRef<Path>) -> Result<Vec<UttScoreRow>, FormatError> {
    csv_from_bytes(&fs::read(path)?)
}

/// Writes a generated corpus under `dir`: waveforms in `wav/`, a manifest
/// with paths relative to `dir`, and the raw degradation events.
pub fn write_corpus(dir: impl AsRef<Path>, utts: &[Utterance]) -> Result<(), FormatError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("wav"))?;
    let mut manifest = Vec::with_capacity(utts.len());
    let mut events = Vec::new();
    for u in utts {
        let rel = format!("wav/{}.wav", u.utt_id);
        save_waveform(dir.join(&rel), &u.waveform)?;
        manifest.push(ManifestRow {
            path: rel,
            mos: u.mos,
            system_id: u.system_id.clone(),
        });
        for d in &u.degradations {
            events.push(EventRow {
                utt_id: u.utt_id.clone(),
                onset_s: d.onset_s,
                offset_s: d.offset_s,
                kind: d.kind,
                severity: d.severity,
            });
        }
    }
    write_manifest(dir.join("manifest.csv"), &manifest)?;
    write_events(dir.join("events.csv"), &events)?;
    Ok(())
}

/// One manifest entry resolved to audio: the utterance id is the file stem.
pub struct LoadedUtterance {
    pub utt_id: String,
    pub waveform: Waveform,
    pub mos: f64,
    pub system_id: String,
}

/// Loads every waveform referenced by a manifest, resolving relative paths
/// against the manifest's directory.
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<Vec<LoadedUtterance>, FormatError> {
    let manifest_path = manifest_path.as_ref();
    let rows = read_manifest(manifest_path)?;
    if rows.is_empty() {
        return Err(FormatError::EmptyTable(manifest_path.to_path_buf()));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(""));
    rows.into_iter()
        .map(|row| {
            let path = base.join(&row.path);
            let utt_id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| row.path.clone());
            Ok(LoadedUtterance {
                utt_id,
                waveform: load_waveform(&path)?,
                mos: row.mos,
                system_id: row.system_id,
            })
        })
        .collect()
}
