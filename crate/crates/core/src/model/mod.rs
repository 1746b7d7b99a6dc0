//! Encoder-decoder quality model: strided convolutional feature extractor
//! with strictly local context, a small transformer encoder with
//! convolutional relative positional encoding, pooled-norm L2 embedding
//! normalization, and a linear or bidirectional-recurrent frame decoder with
//! scores squashed into (1, 5).

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{gradient_check, GradCheckError, GradCheckReport};
pub use graph::{
    decode_graph, encode_graph, extract_graph, forward_graph, inject_params,
    l2_normalize_graph, slice_branch_graph, DecoderVars, ForwardVars, ParamVars,
};
pub use params::{
    ArchConfig, DecoderParams, DecoderVariant, EncoderLayerParams, LstmParams, ModelParams,
    CONV_STRIDES,
};

use ndarray::Array2;
use thiserror::Error;

use crate::signal::Waveform;
use crate::{FPS, FRAME_STRIDE};
use framequal_tape::{Scalar, Tape};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shorter than one frame ({0} samples, need {FRAME_STRIDE})")]
    TooShort(usize),
    #[error("unsupported sample rate {0}, expected 16000")]
    BadSampleRate(u32),
    #[error("pooled embedding norm below 1e-12")]
    ZeroEmbedding,
    #[error("architecture invalid: {0}")]
    BadArch(String),
    #[error("empty frame sequence")]
    EmptyFrames,
}

/// Per-frame latent matrix (T x D) at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub frames: Array2<f32>,
    pub fps: u32,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

/// Per-frame quality scores, strictly inside (1, 5) by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    pub scores: Vec<f32>,
    pub fps: u32,
}

impl FrameScores {
    pub fn new(scores: Vec<f32>, fps: u32) -> Result<Self, ModelError> {
        if scores.is_empty() {
            return Err(ModelError::EmptyFrames);
        }
        Ok(FrameScores { scores, fps })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Mean of the frame scores: the utterance-level prediction.
pub fn time_pool(q: &FrameScores) -> f64 {
    q.scores.iter().map(|&s| f64::from(s)).sum::<f64>() / q.scores.len() as f64
}

pub struct ForwardOutput {
    pub scores: FrameScores,
    pub y_hat: f32,
    pub embeddings: EmbeddingSequence,
}

/// Number of frames produced for an input of `n` samples.
pub fn n_frames(n: usize) -> usize {
    n / FRAME_STRIDE
}

/// Converts a preprocessed waveform into the model's input column matrix,
/// truncated to a whole number of frames.
pub fn input_matrix<S: Scalar>(w: &Waveform) -> Result<Array2<S>, ModelError> {
    if w.sample_rate != 16000 {
        return Err(ModelError::BadSampleRate(w.sample_rate));
    }
    let t = n_frames(w.samples.len());
    if t == 0 {
        return Err(ModelError::TooShort(w.samples.len()));
    }
    let n = t * FRAME_STRIDE;
    let col: Vec<S> = w.samples[..n]
        .iter()
        .map(|&s| S::from_f64(f64::from(s)))
        .collect();
    Ok(Array2::from_shape_vec((n, 1), col).expect("column shape"))
}

/// Full inference pass on one waveform; builds and drops a private tape.
pub fn forward(
    params: &ModelParams<f32>,
    arch: &ArchConfig,
    w: &Waveform,
) -> Result<ForwardOutput, ModelError> {
    let input = input_matrix::<f32>(w)?;
    let mut tape: Tape<f32> = Tape::new();
    let pv = inject_params(&mut tape, params);
    let fwd = forward_graph(&mut tape, &pv, arch, input)?;
    let h = tape.value(fwd.h_norm).clone();
    let q: Vec<f32> = tape.value(fwd.q).iter().cloned().collect();
    let y_hat = tape.scalar_value(fwd.y_hat);
    Ok(ForwardOutput {
        scores: FrameScores { scores: q, fps: FPS },
        y_hat,
        embeddings: EmbeddingSequence { frames: h, fps: FPS },
    })
}
