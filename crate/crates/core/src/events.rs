//! Time-interval event lists: ground-truth degradation segments and detector
//! output share one representation.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EventError {
    #[error("event has onset {onset} >= offset {offset}")]
    Unordered { onset: f64, offset: f64 },
    #[error("events overlap at {at}")]
    Overlapping { at: f64 },
    #[error("event [{onset}, {offset}] outside [0, {duration}]")]
    OutOfBounds {
        onset: f64,
        offset: f64,
        duration: f64,
    },
    #[error("non-finite event boundary")]
    NonFinite,
}

/// Half-open-in-spirit interval in seconds; boundaries are exact reals and
/// intersections are measured by length, so open vs closed never matters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub onset_s: f64,
    pub offset_s: f64,
}

impl Event {
    pub fn new(onset_s: f64, offset_s: f64) -> Result<Self, EventError> {
        if !onset_s.is_finite() || !offset_s.is_finite() {
            return Err(EventError::NonFinite);
        }
        if onset_s >= offset_s {
            return Err(EventError::Unordered {
                onset: onset_s,
                offset: offset_s,
            });
        }
        Ok(Event { onset_s, offset_s })
    }

    pub fn duration(&self) -> f64 {
        self.offset_s - self.onset_s
    }

    /// Length of the overlap with `other`, zero when disjoint.
    pub fn intersection_len(&self, other: &Event) -> f64 {
        (self.offset_s.min(other.offset_s) - self.onset_s.max(other.onset_s)).max(0.0)
    }
}

/// Sorted, non-overlapping events of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EventList {
    pub utt_id: String,
    events: Vec<Event>,
}

impl EventList {
    pub fn empty(utt_id: impl Into<String>) -> Self {
        EventList {
            utt_id: utt_id.into(),
            events: Vec::new(),
        }
    }

    /// Validates ordering and disjointness; touching events (offset equal to
    /// the next onset) are allowed.
    pub fn new(utt_id: impl Into<String>, events: Vec<Event>) -> Result<Self, EventError> {
        for w in events.windows(2) {
            if w[1].onset_s < w[0].onset_s {
                return Err(EventError::Overlapping { at: w[1].onset_s });
            }
            if w[1].onset_s < w[0].offset_s {
                return Err(EventError::Overlapping { at: w[1].onset_s });
            }
        }
        Ok(EventList {
            utt_id: utt_id.into(),
            events,
        })
    }

    /// Sorts by onset, then validates.
    pub fn from_unsorted(
        utt_id: impl Into<String>,
        mut events: Vec<Event>,
    ) -> Result<Self, EventError> {
        events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
        Self::new(utt_id, events)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.events.iter().map(Event::duration).sum()
    }

    pub fn check_within(&self, duration_s: f64) -> Result<(), EventError> {
        for e in &self.events {
            if e.onset_s < 0.0 || e.offset_s > duration_s {
                return Err(EventError::OutOfBounds {
                    onset: e.onset_s,
                    offset: e.offset_s,
                    duration: duration_s,
                });
            }
        }
        Ok(())
    }

    /// Frame mask covering the events: frame t spans [t/fps, (t+1)/fps).
    pub fn to_mask(&self, fps: u32, n_frames: usize) -> Vec<bool> {
        let fps = f64::from(fps);
        let mut mask = vec![false; n_frames];
        for e in &self.events {
            let start = (e.onset_s * fps).floor().max(0.0) as usize;
            let end = ((e.offset_s * fps).ceil() as usize).min(n_frames);
            for m in mask.iter_mut().take(end).skip(start.min(n_frames)) {
                *m = true;
            }
        }
        mask
    }
}

/// Merges overlapping or touching intervals into maximal disjoint ones.
/// Returns for each merged interval the indices of the inputs it absorbed.
pub fn merge_intervals(intervals: &[(f64, f64)]) -> Vec<((f64, f64), Vec<usize>)> {
    let mut order: Vec<usize> = (0..intervals.len()).collect();
    order.sort_by(|&a, &b| intervals[a].0.total_cmp(&intervals[b].0));
    let mut merged: Vec<((f64, f64), Vec<usize>)> = Vec::new();
    for idx in order {
        let (on, off) = intervals[idx];
        match merged.last_mut() {
            Some(((_, last_off), members)) if on <= *last_off => {
                *last_off = last_off.max(off);
                members.push(idx);
            }
            _ => merged.push(((on, off), vec![idx])),
        }
    }
    merged
}
