//! Training loop: Adam with per-step linear learning-rate decay, slice
//! consistency branches, per-epoch dev metrics, best-checkpoint selection,
//! and versioned JSON checkpoints.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Utterance;
use crate::formats::LoadedUtterance;
use crate::losses::{
    g_batch_loss, sample_slice, LossError, LossWeights, UttLossVars,
};
use crate::metrics::{spearman, volatility};
use crate::model::{
    forward_graph, inject_params, slice_branch_graph, ArchConfig, DecoderVariant, ModelError,
    ModelParams,
};
use crate::signal::{preprocess, SignalError, Waveform};
use crate::FPS;
use framequal_tape::{Tape, Var};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("signal error: {0}")]
    Signal(#[from] SignalError),
    #[error("loss error: {0}")]
    Loss(#[from] LossError),
    #[error("non-finite loss at step {step}: training diverged")]
    Diverged { step: u64 },
    #[error("total_steps is zero")]
    ZeroSteps,
    #[error("lr schedule queried outside [0, total_steps]")]
    StepOutOfRange,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupted checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("incompatible checkpoint version {found}, expected {expected}")]
    IncompatibleVersion { found: u32, expected: u32 },
    #[error("checkpoint contains non-finite parameters")]
    NonFinite,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr_start")]
    pub lr_start: f64,
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_decoder")]
    pub decoder_variant: DecoderVariant,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_slice_min")]
    pub slice_min_s: f64,
    #[serde(default = "default_slice_max")]
    pub slice_max_s: f64,
}

fn default_epochs() -> usize {
    100
}
fn default_lr_start() -> f64 {
    1e-4
}
fn default_lr_end() -> f64 {
    1e-6
}
fn default_batch_size() -> usize {
    8
}
fn default_decoder() -> DecoderVariant {
    DecoderVariant::Linear
}
fn default_slice_min() -> f64 {
    0.2
}
fn default_slice_max() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            lr_start: default_lr_start(),
            lr_end: default_lr_end(),
            batch_size: default_batch_size(),
            weights: LossWeights::default(),
            decoder_variant: default_decoder(),
            seed: 0,
            slice_min_s: default_slice_min(),
            slice_max_s: default_slice_max(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::EmptySplit("epochs"));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(TrainError::StepOutOfRange);
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// lr(step) = lr_start + (lr_end - lr_start) * step / total_steps, computed
/// in lerp form so both endpoints are exact.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::ZeroSteps);
    }
    if step > total_steps {
        return Err(TrainError::StepOutOfRange);
    }
    let frac = step as f64 / total_steps as f64;
    Ok((1.0 - frac) * cfg.lr_start + frac * cfg.lr_end)
}

/// One step log line; keys match the JSON-lines training log schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_mos: f64,
    pub l_con: f64,
    pub l_emb: f64,
    pub l_scores: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub dev_srcc: f64,
    pub dev_mean_volatility: f64,
    pub mean_total_loss: f64,
}

pub struct TrainOutput {
    pub final_params: ModelParams<f32>,
    pub best_params: ModelParams<f32>,
    pub best_epoch: usize,
    pub best_dev_srcc: f64,
    pub history: Vec<EpochStats>,
    pub steps: Vec<StepLog>,
    /// Number of slice branches built; stays 0 when both consistency weights
    /// are zero (the consistency cost is opt-in).
    pub slice_branches: u64,
}

struct Adam {
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    t: u64,
}

impl Adam {
    fn new(params: &ModelParams<f32>) -> Self {
        let zeros: Vec<Array2<f32>> = params
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams<f32>, grads: &[Option<Array2<f32>>], lr: f64) {
        self.t += 1;
        let b1 = ADAM_BETA1 as f32;
        let b2 = ADAM_BETA2 as f32;
        let eps = ADAM_EPS as f32;
        let bc1 = 1.0 - (ADAM_BETA1.powi(self.t as i32)) as f32;
        let bc2 = 1.0 - (ADAM_BETA2.powi(self.t as i32)) as f32;
        let lr = lr as f32;
        for ((idx, (_, tensor)), grad) in params.tensors_mut().into_iter().enumerate().zip(grads) {
            let Some(g) = grad else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(tensor)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Minimal supervised example: audio plus its utterance-level label.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub waveform: Waveform,
    pub mos: f64,
}

impl From<&Utterance> for TrainExample {
    fn from(u: &Utterance) -> Self {
        TrainExample {
            waveform: u.waveform.clone(),
            mos: u.mos,
        }
    }
}

impl From<&LoadedUtterance> for TrainExample {
    fn from(u: &LoadedUtterance) -> Self {
        TrainExample {
            waveform: u.waveform.clone(),
            mos: u.mos,
        }
    }
}

struct PreppedUtt {
    input: Array2<f32>,
    t_frames: usize,
    label: f64,
}

fn prep(examples: &[TrainExample]) -> Result<Vec<PreppedUtt>, TrainError> {
    examples
        .iter()
        .map(|e| {
            let w = preprocess(&e.waveform)?;
            let input = crate::model::input_matrix::<f32>(&w)?;
            let t_frames = input.nrows() / crate::FRAME_STRIDE;
            Ok(PreppedUtt {
                input,
                t_frames,
                label: e.mos,
            })
        })
        .collect()
}

/// Full-context plus optional slice forward for one utterance on the shared
/// step tape.
fn utt_step_graph(
    tape: &mut Tape<f32>,
    pv: &crate::model::ParamVars,
    arch: &ArchConfig,
    u: &PreppedUtt,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    slice_branches: &mut u64,
) -> Result<(UttLossVars, Var), TrainError> {
    let fwd = forward_graph(tape, pv, arch, u.input.clone())?;
    let slice = if cfg.weights.uses_slices() {
        let spec = sample_slice(u.t_frames, FPS, cfg.slice_min_s, cfg.slice_max_s, rng)?;
        let (r0, r1) = spec.rows();
        let (h_slice, q_slice) = slice_branch_graph(tape, pv, arch, fwd.z, r0, r1)?;
        *slice_branches += 1;
        Some((fwd.h_norm, h_slice, fwd.q, q_slice, spec))
    } else {
        None
    };
    Ok((
        UttLossVars {
            y_hat: fwd.y_hat,
            label: u.label,
            slice,
        },
        fwd.q,
    ))
}

/// Dev-split pass: utterance predictions and frame scores, no gradients.
fn dev_eval(
    params: &ModelParams<f32>,
    arch: &ArchConfig,
    dev: &[PreppedUtt],
) -> Result<(f64, f64), TrainError> {
    let mut preds = Vec::with_capacity(dev.len());
    let mut labels = Vec::with_capacity(dev.len());
    let mut vol_sum = 0.0;
    let mut vol_n = 0usize;
    for u in dev {
        let mut tape: Tape<f32> = Tape::new();
        let pv = inject_params(&mut tape, params);
        let fwd = forward_graph(&mut tape, &pv, arch, u.input.clone())?;
        preds.push(f64::from(tape.scalar_value(fwd.y_hat)));
        labels.push(u.label);
        let q: Vec<f32> = tape.value(fwd.q).iter().cloned().collect();
        if let Ok(v) = volatility(&q, FPS) {
            vol_sum += v;
            vol_n += 1;
        }
    }
    // Degenerate rank correlations (constant predictions early in training)
    // count as zero rather than aborting the run.
    let srcc = spearman(&preds, &labels).unwrap_or(0.0);
    let mean_vol = if vol_n > 0 { vol_sum / vol_n as f64 } else { 0.0 };
    Ok((srcc, mean_vol))
}

pub fn train(
    train_set: &[TrainExample],
    dev_set: &[TrainExample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if dev_set.is_empty() {
        return Err(TrainError::EmptySplit("dev"));
    }
    let mut arch = arch.clone();
    arch.decoder = cfg.decoder_variant;

    let train_prepped = prep(train_set)?;
    let dev_prepped = prep(dev_set)?;

    let mut params = ModelParams::<f32>::init(&arch, cfg.seed)?;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

    let batch_size = cfg.batch_size.max(2).min(train_prepped.len());
    let n_batches = train_prepped.len().div_ceil(batch_size);
    let total_steps = (cfg.epochs * n_batches) as u64;

    let mut steps = Vec::new();
    let mut history = Vec::new();
    let mut slice_branches = 0u64;
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_prepped.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        for chunk in order.chunks(batch_size) {
            // A trailing chunk of one utterance cannot form contrastive
            // pairs; fold it into a synthetic pair with the first utterance.
            let indices: Vec<usize> = if chunk.len() >= 2 {
                chunk.to_vec()
            } else {
                vec![chunk[0], order[0]]
            };
            let lr = lr_at(step, total_steps, cfg)?;
            let mut tape: Tape<f32> = Tape::new();
            let pv = inject_params(&mut tape, &params);
            let mut utt_vars = Vec::with_capacity(indices.len());
            let mut q_vars = Vec::with_capacity(indices.len());
            for &i in &indices {
                let (uv, q) = utt_step_graph(
                    &mut tape,
                    &pv,
                    &arch,
                    &train_prepped[i],
                    cfg,
                    &mut rng,
                    &mut slice_branches,
                )?;
                utt_vars.push(uv);
                q_vars.push(q);
            }
            let (total, breakdown) = g_batch_loss(&mut tape, &utt_vars, &q_vars, &cfg.weights)?;
            if !breakdown.total.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            let mut grads = tape.backward_scalar(total);
            let ordered = pv.ordered();
            let grad_list: Vec<Option<Array2<f32>>> =
                ordered.iter().map(|v| grads.take(*v)).collect();
            drop(tape);
            adam.step(&mut params, &grad_list, lr);

            steps.push(StepLog {
                step,
                l_mos: breakdown.l_mos,
                l_con: breakdown.l_con,
                l_emb: breakdown.l_emb,
                l_scores: breakdown.l_scores,
                total: breakdown.total,
                lr,
            });
            epoch_loss += breakdown.total;
            step += 1;
        }

        let (dev_srcc, dev_mean_volatility) = dev_eval(&params, &arch, &dev_prepped)?;
        history.push(EpochStats {
            epoch,
            dev_srcc,
            dev_mean_volatility,
            mean_total_loss: epoch_loss / n_batches as f64,
        });
        let improved = best.as_ref().map_or(true, |(s, _, _)| dev_srcc > *s);
        if improved {
            best = Some((dev_srcc, epoch, params.clone()));
        }
    }

    let (best_dev_srcc, best_epoch, best_params) = best.expect("epochs >= 1");
    Ok(TrainOutput {
        final_params: params,
        best_params,
        best_epoch,
        best_dev_srcc,
        history,
        steps,
        slice_branches,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: ArchConfig,
    pub step: u64,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn new(arch: ArchConfig, step: u64, params: ModelParams<f32>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch,
            step,
            params,
        }
    }
}

/// Atomic JSON write: temp file in the target directory, then rename.
pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = serde_json::to_vec(ck)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::IncompatibleVersion {
            found: ck.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if !ck.params.all_finite() {
        return Err(CheckpointError::NonFinite);
    }
    Ok(ck)
}
