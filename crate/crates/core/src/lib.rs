//! Frame-level speech quality assessment: synthetic corpora, an
//! utterance-supervised scoring model with slice consistency training,
//! threshold-calibrated localization of low-quality segments, and
//! intersection-based evaluation.

pub mod corpus;
pub mod events;
pub mod formats;
pub mod localizer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod signal;
pub mod trainer;

/// Frame rate of all frame-level artifacts (20 ms frames).
pub const FPS: u32 = 50;

/// Samples consumed per frame by the feature extractor at 16 kHz.
pub const FRAME_STRIDE: usize = 320;
