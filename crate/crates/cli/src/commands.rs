//! Command bodies. Errors split into two classes: `Usage` (bad flags,
//! invalid configs, unreadable or malformed inputs, unwritable output
//! directories) exits 2, `Runtime` (failures while computing or persisting
//! results) exits 1.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use framequal_core::corpus::{generate_corpus, CorpusConfig, DegradationType};
use framequal_core::formats::{
    self, DetectionRow, UttScoreRow, VolatilityRow,
};
use framequal_core::localizer::{
    detect_from_scores, select_threshold, tune_threshold, DetectionConfig,
};
use framequal_core::metrics::{intersection_eval, volatility, EvalConfig};
use framequal_core::model::{forward, ArchConfig, DecoderVariant, FrameScores};
use framequal_core::signal::preprocess;
use framequal_core::trainer::{
    load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, TrainExample,
};

use crate::{DetectArgs, EvalArgs, GenArgs, ScoreArgs, TrainArgs, TuneArgs};

pub enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Every run drops one of these beside its outputs; reruns with identical
/// inputs reproduce all other outputs bitwise, while `wall_clock_s` is
/// explicitly excluded from determinism comparisons.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<String>,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    toolkit_version: &'static str,
    wall_clock_s: f64,
}

struct Run {
    started: Instant,
    command: String,
    config_path: Option<String>,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Run {
    fn new(command: &str) -> Self {
        Run {
            started: Instant::now(),
            command: command.to_string(),
            config_path: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &str) {
        self.inputs.push(path.to_string());
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_string_lossy().into_owned());
    }

    fn finish(self, out_dir: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command,
            config_path: self.config_path,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            toolkit_version: env!("CARGO_PKG_VERSION"),
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        formats::write_json(out_dir.join("run_manifest.json"), &manifest).map_err(runtime)
    }
}

/// Creating the output directory up front makes permission problems a
/// usage error rather than a mid-run failure.
fn ensure_out_dir(path: &str) -> Result<&Path, CliError> {
    let dir = Path::new(path);
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {path}: {e}")))?;
    Ok(dir)
}

fn load_toml<T: for<'de> Deserialize<'de>>(path: &str) -> Result<T, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| usage(format!("cannot read {path}: {e}")))?;
    toml::from_str(&text).map_err(|e| usage(format!("{path}: {e}")))
}

fn apply<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

pub fn run_gen(args: GenArgs) -> Result<(), CliError> {
    let mut run = Run::new("gen");
    let mut cfg: CorpusConfig = match &args.config {
        Some(path) => load_toml(path)?,
        None => CorpusConfig::default(),
    };
    run.config_path = args.config.clone();
    apply(&mut cfg.seed, args.seed);
    apply(&mut cfg.n_utterances, args.n_utterances);
    apply(&mut cfg.duration_range, args.duration_range);
    apply(&mut cfg.severity_range, args.severity_range);
    apply(&mut cfg.events_per_utt_range, args.events_per_utt_range);
    apply(&mut cfg.event_duration_range, args.event_duration_range);
    if let Some(types) = &args.degradation_types {
        cfg.degradation_types = types
            .split(',')
            .map(|t| t.trim().parse::<DegradationType>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    run.seed = Some(cfg.seed);

    let out = ensure_out_dir(&args.out)?;
    let utts = generate_corpus(&cfg).map_err(runtime)?;
    formats::write_corpus(out, &utts).map_err(runtime)?;
    for name in ["manifest.csv", "events.csv"] {
        run.output(&out.join(name));
    }
    run.finish(out)
}

/// Training config file layout: top-level `[train]` and `[arch]` tables,
/// both optional.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFileConfig {
    train: TrainConfig,
    arch: ArchConfig,
}

pub fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let mut run = Run::new("train");
    let mut cfg: TrainFileConfig = match &args.config {
        Some(path) => load_toml(path)?,
        None => TrainFileConfig::default(),
    };
    run.config_path = args.config.clone();
    apply(&mut cfg.train.seed, args.seed);
    apply(&mut cfg.train.epochs, args.epochs);
    apply(&mut cfg.train.batch_size, args.batch_size);
    apply(&mut cfg.train.lr_start, args.lr_start);
    apply(&mut cfg.train.lr_end, args.lr_end);
    apply(&mut cfg.train.weights.lambda_emb, args.lambda_emb);
    apply(&mut cfg.train.weights.lambda_scores, args.lambda_scores);
    apply(&mut cfg.train.weights.lambda_qnet, args.lambda_qnet);
    apply(&mut cfg.train.slice_min_s, args.slice_min_s);
    apply(&mut cfg.train.slice_max_s, args.slice_max_s);
    if let Some(decoder) = &args.decoder {
        cfg.train.decoder_variant = match decoder.as_str() {
            "linear" => DecoderVariant::Linear,
            "recurrent" => DecoderVariant::Recurrent,
            other => return Err(usage(format!("unknown decoder: {other}"))),
        };
    }
    cfg.train.validate().map_err(usage)?;
    cfg.arch.validate().map_err(usage)?;
    run.seed = Some(cfg.train.seed);
    run.input(&args.corpus);
    run.input(&args.dev);

    let train_set: Vec<TrainExample> = formats::load_corpus(&args.corpus)
        .map_err(usage)?
        .iter()
        .map(Into::into)
        .collect();
    let dev_set: Vec<TrainExample> = formats::load_corpus(&args.dev)
        .map_err(usage)?
        .iter()
        .map(Into::into)
        .collect();

    let out = ensure_out_dir(&args.out)?;
    let result = train(&train_set, &dev_set, &cfg.arch, &cfg.train).map_err(runtime)?;

    let mut arch = cfg.arch.clone();
    arch.decoder = cfg.train.decoder_variant;
    let steps_per_epoch = (result.steps.len() / result.history.len()) as u64;
    let best = Checkpoint::new(
        arch.clone(),
        (result.best_epoch as u64 + 1) * steps_per_epoch,
        result.best_params,
    );
    let final_ck = Checkpoint::new(arch, result.steps.len() as u64, result.final_params);

    let ck_path = out.join("checkpoint.json");
    save_checkpoint(&ck_path, &best).map_err(runtime)?;
    run.output(&ck_path);
    let final_path = out.join("final.json");
    save_checkpoint(&final_path, &final_ck).map_err(runtime)?;
    run.output(&final_path);

    let mut log = String::new();
    for step in &result.steps {
        log.push_str(&serde_json::to_string(step).map_err(runtime)?);
        log.push('\n');
    }
    let log_path = out.join("train_log.jsonl");
    formats::atomic_write(&log_path, log.as_bytes()).map_err(runtime)?;
    run.output(&log_path);

    let history_path = out.join("history.json");
    formats::write_json(&history_path, &result.history).map_err(runtime)?;
    run.output(&history_path);
    run.finish(out)
}

pub fn run_score(args: ScoreArgs) -> Result<(), CliError> {
    let mut run = Run::new("score");
    run.input(&args.checkpoint);
    run.input(&args.manifest);
    let ck = load_checkpoint(&args.checkpoint).map_err(usage)?;
    let utts = formats::load_corpus(&args.manifest).map_err(usage)?;
    let out = ensure_out_dir(&args.out)?;

    let mut frame_rows: Vec<(String, FrameScores)> = Vec::with_capacity(utts.len());
    let mut utt_rows = Vec::with_capacity(utts.len());
    let mut vol_rows = Vec::new();
    for u in &utts {
        let w = preprocess(&u.waveform).map_err(runtime)?;
        let fwd = forward(&ck.params, &ck.arch, &w).map_err(runtime)?;
        utt_rows.push(UttScoreRow {
            utt_id: u.utt_id.clone(),
            score: f64::from(fwd.y_hat),
        });
        // Volatility is undefined below three frames; such rows are omitted.
        if let Ok(v) = volatility(&fwd.scores.scores, fwd.scores.fps) {
            vol_rows.push(VolatilityRow {
                utt_id: u.utt_id.clone(),
                volatility: v,
            });
        }
        frame_rows.push((u.utt_id.clone(), fwd.scores));
    }

    let frame_path = out.join("frame_scores.csv");
    formats::write_frame_scores(&frame_path, &frame_rows).map_err(runtime)?;
    run.output(&frame_path);
    let utt_path = out.join("utt_scores.csv");
    formats::write_utt_scores(&utt_path, &utt_rows).map_err(runtime)?;
    run.output(&utt_path);
    let vol_path = out.join("volatility.csv");
    formats::write_volatility(&vol_path, &vol_rows).map_err(runtime)?;
    run.output(&vol_path);
    run.finish(out)
}

#[derive(Serialize)]
struct ThresholdReport {
    threshold: f64,
    target_far: Option<f64>,
    n_reference_frames: Option<usize>,
}

pub fn run_detect(args: DetectArgs) -> Result<(), CliError> {
    let mut run = Run::new("detect");
    let mut cfg: DetectionConfig = match &args.config {
        Some(path) => load_toml(path)?,
        None => DetectionConfig::default(),
    };
    run.config_path = args.config.clone();
    apply(&mut cfg.target_far, args.target_far);
    apply(&mut cfg.smooth_window_s, args.smooth_window_s);
    apply(&mut cfg.min_duration_s, args.min_duration_s);
    if args.threshold.is_some() {
        cfg.threshold = args.threshold;
    }
    cfg.validate().map_err(usage)?;
    run.input(&args.scores);

    let (_, scores) = formats::read_frame_scores(&args.scores).map_err(usage)?;
    let report = match cfg.threshold {
        Some(t) => ThresholdReport {
            threshold: t,
            target_far: None,
            n_reference_frames: None,
        },
        None => {
            let reference = args.reference.as_ref().ok_or_else(|| {
                usage("either --threshold or --reference is required for calibration")
            })?;
            run.input(reference);
            let (_, ref_scores) = formats::read_frame_scores(reference).map_err(usage)?;
            let pooled: Vec<f32> = ref_scores
                .iter()
                .flat_map(|(_, fs)| fs.scores.iter().copied())
                .collect();
            if pooled.is_empty() {
                return Err(usage("reference score table is empty"));
            }
            let t = select_threshold(&pooled, cfg.target_far).map_err(usage)?;
            ThresholdReport {
                threshold: t,
                target_far: Some(cfg.target_far),
                n_reference_frames: Some(pooled.len()),
            }
        }
    };
    cfg.threshold = Some(report.threshold);

    let out = ensure_out_dir(&args.out)?;
    let mut rows = Vec::new();
    for (utt_id, fs) in &scores {
        for d in detect_from_scores(fs, &cfg).map_err(runtime)? {
            rows.push(DetectionRow {
                utt_id: utt_id.clone(),
                onset_s: d.onset_s,
                offset_s: d.offset_s,
                min_frame_score: d.min_frame_score,
            });
        }
    }
    let det_path = out.join("detections.csv");
    formats::write_detections(&det_path, &rows).map_err(runtime)?;
    run.output(&det_path);
    let threshold_path = out.join("threshold.json");
    formats::write_json(&threshold_path, &report).map_err(runtime)?;
    run.output(&threshold_path);
    run.finish(out)
}

pub fn run_tune(args: TuneArgs) -> Result<(), CliError> {
    let mut run = Run::new("tune");
    let mut cfg: DetectionConfig = match &args.config {
        Some(path) => load_toml(path)?,
        None => DetectionConfig::default(),
    };
    run.config_path = args.config.clone();
    apply(&mut cfg.smooth_window_s, args.smooth_window_s);
    apply(&mut cfg.min_duration_s, args.min_duration_s);
    // Tuning sweeps thresholds itself; a fixed one would be ignored.
    cfg.threshold = None;
    cfg.validate().map_err(usage)?;
    let eval_cfg = EvalConfig {
        rho_dtc: args.rho.0,
        rho_gtc: args.rho.1,
    };
    eval_cfg.validate().map_err(usage)?;
    run.input(&args.scores);
    run.input(&args.events);

    let (_, scores) = formats::read_frame_scores(&args.scores).map_err(usage)?;
    let rows = formats::read_events(&args.events).map_err(usage)?;
    let gt = formats::ground_truth_from_rows(&rows).map_err(usage)?;
    if scores.is_empty() {
        return Err(usage("frame-score table is empty"));
    }

    let out = ensure_out_dir(&args.out)?;
    let (_, report) = tune_threshold(&scores, &gt, &cfg, &eval_cfg).map_err(runtime)?;
    let tuned_path = out.join("tuned.json");
    formats::write_json(&tuned_path, &report).map_err(runtime)?;
    run.output(&tuned_path);
    run.finish(out)
}

pub fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut run = Run::new("eval");
    run.input(&args.detections);
    run.input(&args.events);
    let det_rows = formats::read_detections(&args.detections).map_err(usage)?;
    let detections = formats::detections_to_event_lists(&det_rows).map_err(usage)?;
    let gt_rows = formats::read_events(&args.events).map_err(usage)?;
    let gt = formats::ground_truth_from_rows(&gt_rows).map_err(usage)?;

    let mut reports = Vec::with_capacity(args.rho.len());
    for &(rho_dtc, rho_gtc) in &args.rho {
        let cfg = EvalConfig { rho_dtc, rho_gtc };
        cfg.validate().map_err(usage)?;
        let mut report = intersection_eval(&cfg, &detections, &gt).map_err(runtime)?;
        report.threshold = args.threshold;
        reports.push(report);
    }

    let out = ensure_out_dir(&args.out)?;
    let report_path = out.join("eval_report.json");
    formats::write_json(&report_path, &reports).map_err(runtime)?;
    run.output(&report_path);
    run.finish(out)
}
