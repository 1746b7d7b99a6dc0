//! `framequal`: reproducible pipelines for synthetic-corpus generation,
//! model training, frame scoring, low-quality-segment detection, threshold
//! tuning, and intersection-based evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::CliError;

#[derive(Parser)]
#[command(name = "framequal", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic degraded-speech corpus.
    Gen(GenArgs),
    /// Train a quality model on a generated corpus.
    Train(TrainArgs),
    /// Score utterances with a trained checkpoint.
    Score(ScoreArgs),
    /// Localize low-quality segments in frame scores.
    Detect(DetectArgs),
    /// Tune the detection threshold against labeled events.
    Tune(TuneArgs),
    /// Evaluate detections against ground-truth events.
    Eval(EvalArgs),
}

/// Comma-separated pair, e.g. "3.0,5.0".
fn parse_f64_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn parse_usize_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for WAVs, manifest.csv, and events.csv.
    #[arg(long)]
    out: String,
    /// TOML file with corpus-generation keys.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_utterances: Option<usize>,
    /// Utterance duration bounds in seconds, as "LO,HI".
    #[arg(long, value_parser = parse_f64_pair)]
    duration_range: Option<(f64, f64)>,
    /// Severity bounds in [0,1], as "LO,HI".
    #[arg(long, value_parser = parse_f64_pair)]
    severity_range: Option<(f64, f64)>,
    /// Events per utterance, as "LO,HI".
    #[arg(long, value_parser = parse_usize_pair)]
    events_per_utt_range: Option<(usize, usize)>,
    /// Event duration bounds in seconds, as "LO,HI".
    #[arg(long, value_parser = parse_f64_pair)]
    event_duration_range: Option<(f64, f64)>,
    /// Comma-separated subset of burst_noise,clipping,dropout,hum.
    #[arg(long)]
    degradation_types: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest CSV of the training split.
    #[arg(long)]
    corpus: String,
    /// Manifest CSV of the dev split.
    #[arg(long)]
    dev: String,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: String,
    /// TOML file with [train] and [arch] sections.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    lambda_emb: Option<f64>,
    #[arg(long)]
    lambda_scores: Option<f64>,
    #[arg(long)]
    lambda_qnet: Option<f64>,
    /// Decoder head: "linear" or "recurrent".
    #[arg(long)]
    decoder: Option<String>,
    #[arg(long)]
    slice_min_s: Option<f64>,
    #[arg(long)]
    slice_max_s: Option<f64>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Trained checkpoint JSON.
    #[arg(long)]
    checkpoint: String,
    /// Manifest CSV listing the WAVs to score.
    #[arg(long)]
    manifest: String,
    /// Output directory for frame_scores.csv, utt_scores.csv,
    /// volatility.csv.
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct DetectArgs {
    /// Frame-score table to detect on.
    #[arg(long)]
    scores: String,
    /// Frame-score table of nominal (clean) audio used to calibrate the
    /// threshold; required unless --threshold is given.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    out: String,
    /// TOML file with detection keys.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    target_far: Option<f64>,
    #[arg(long)]
    smooth_window_s: Option<f64>,
    #[arg(long)]
    min_duration_s: Option<f64>,
    /// Fixed threshold; skips calibration.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct TuneArgs {
    /// Frame-score table of the dev split.
    #[arg(long)]
    scores: String,
    /// Ground-truth events CSV of the dev split.
    #[arg(long)]
    events: String,
    #[arg(long)]
    out: String,
    /// TOML file with detection keys.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    smooth_window_s: Option<f64>,
    #[arg(long)]
    min_duration_s: Option<f64>,
    /// Tolerance pair "RHO_DTC,RHO_GTC" the tuning optimizes for.
    #[arg(long, value_parser = parse_f64_pair, default_value = "0.7,0.3")]
    rho: (f64, f64),
}

#[derive(Args)]
struct EvalArgs {
    /// Detections CSV to evaluate.
    #[arg(long)]
    detections: String,
    /// Ground-truth events CSV.
    #[arg(long)]
    events: String,
    #[arg(long)]
    out: String,
    /// Tolerance pair "RHO_DTC,RHO_GTC"; repeat for multiple reports.
    #[arg(long, value_parser = parse_f64_pair, default_values = ["0.7,0.3"])]
    rho: Vec<(f64, f64)>,
    /// Threshold to record in the reports (informational).
    #[arg(long)]
    threshold: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => commands::run_gen(args),
        Cmd::Train(args) => commands::run_train(args),
        Cmd::Score(args) => commands::run_score(args),
        Cmd::Detect(args) => commands::run_detect(args),
        Cmd::Tune(args) => commands::run_tune(args),
        Cmd::Eval(args) => commands::run_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
