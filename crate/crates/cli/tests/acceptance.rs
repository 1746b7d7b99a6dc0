//! Acceptance suite: ten checks covering gradient correctness, the
//! consistency-loss fixed points, the volatility and detection-precision
//! trends of consistency-regularized training, threshold calibration,
//! evaluation oracles, tuned-threshold optimality, and end-to-end CLI
//! determinism. Each test prints one `ACCEPTANCE <n> PASS/FAIL` line.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use framequal_core::corpus::{generate_corpus, CorpusConfig, DegradationType};
use framequal_core::events::{Event, EventList};
use framequal_core::formats::{load_corpus, write_corpus, LoadedUtterance};
use framequal_core::localizer::{
    detect_from_scores, detections_to_events, select_threshold, tune_threshold, DetectionConfig,
};
use framequal_core::losses::{
    g_batch_loss, loss_emb, loss_scores, LossWeights, SliceSpec, UttLossVars,
};
use framequal_core::metrics::{intersection_eval, spearman, volatility, EvalConfig};
use framequal_core::model::{
    forward, forward_graph, gradient_check, input_matrix, slice_branch_graph, ArchConfig,
    DecoderVariant, FrameScores, ModelParams,
};
use framequal_core::signal::{preprocess, Waveform};
use framequal_core::trainer::{train, TrainConfig, TrainExample};
use framequal_core::FPS;

fn report(n: usize, ok: bool, detail: impl AsRef<str>) -> bool {
    println!(
        "ACCEPTANCE {n:2} {}: {}",
        if ok { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    ok
}

// Shared two-model fixture for the trend criteria: one corpus, two trainings
// that differ only in the consistency weights, frame scores for every dev and
// test utterance.

struct ScoredUtt {
    scores: FrameScores,
    y_hat: f64,
}

struct TrainedModel {
    params: ModelParams<f32>,
    dev: BTreeMap<String, ScoredUtt>,
    test: BTreeMap<String, ScoredUtt>,
}

struct Fixture {
    arch: ArchConfig,
    model_a: TrainedModel,
    model_b: TrainedModel,
    dev_events: Vec<EventList>,
    test_events: Vec<EventList>,
    test_mos: BTreeMap<String, f64>,
    wall_s: f64,
}

fn trend_corpus_cfg(n_utterances: usize, seed: u64) -> CorpusConfig {
    // Noise bursts give the unregularized model plenty of frame-to-frame
    // jitter to expose; severity well above the floor keeps labels learnable.
    CorpusConfig {
        n_utterances,
        degradation_types: vec![DegradationType::BurstNoise],
        severity_range: (0.5, 1.0),
        events_per_utt_range: (1, 4),
        seed,
        ..CorpusConfig::default()
    }
}

fn trend_arch() -> ArchConfig {
    ArchConfig {
        conv_channels: [8, 12, 16],
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 32,
        pos_kernel: 9,
        decoder: DecoderVariant::Linear,
        rnn_hidden: 8,
    }
}

fn trend_train_cfg(lambda: f64) -> TrainConfig {
    TrainConfig {
        epochs: 8,
        lr_start: 3e-3,
        lr_end: 1e-5,
        batch_size: 8,
        weights: LossWeights {
            lambda_emb: lambda,
            lambda_scores: lambda,
            ..LossWeights::default()
        },
        decoder_variant: DecoderVariant::Linear,
        seed: 1,
        slice_min_s: 0.1,
        slice_max_s: 0.4,
    }
}

fn score_split(
    params: &ModelParams<f32>,
    arch: &ArchConfig,
    utts: &[LoadedUtterance],
) -> BTreeMap<String, ScoredUtt> {
    utts.iter()
        .map(|u| {
            let w = preprocess(&u.waveform).expect("preprocess");
            let out = forward(params, arch, &w).expect("forward");
            let scored = ScoredUtt {
                scores: out.scores,
                y_hat: f64::from(out.y_hat),
            };
            (u.utt_id.clone(), scored)
        })
        .collect()
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let started = Instant::now();
        let dir = TempDir::new().expect("tempdir");
        let arch = trend_arch();

        // Corpora take the same disk round trip as the CLI so the trained
        // models see identical (PCM-quantized) waveforms.
        let gen_split = |name: &str, n: usize, seed: u64| {
            let utts = generate_corpus(&trend_corpus_cfg(n, seed)).expect("generate corpus");
            let sub = dir.path().join(name);
            write_corpus(&sub, &utts).expect("write corpus");
            let loaded = load_corpus(sub.join("manifest.csv")).expect("load corpus");
            (utts, loaded)
        };
        let (_, train_loaded) = gen_split("train", 500, 100);
        let (dev_utts, dev_loaded) = gen_split("dev", 100, 200);
        let (test_utts, test_loaded) = gen_split("test", 100, 300);

        let train_set: Vec<TrainExample> = train_loaded.iter().map(Into::into).collect();
        let dev_set: Vec<TrainExample> = dev_loaded.iter().map(Into::into).collect();

        let train_one = |lambda: f64| {
            let out =
                train(&train_set, &dev_set, &arch, &trend_train_cfg(lambda)).expect("train");
            TrainedModel {
                dev: score_split(&out.best_params, &arch, &dev_loaded),
                test: score_split(&out.best_params, &arch, &test_loaded),
                params: out.best_params,
            }
        };
        let model_a = train_one(0.0);
        let model_b = train_one(1.0);

        Fixture {
            arch,
            model_a,
            model_b,
            dev_events: dev_utts.iter().map(|u| u.events.clone()).collect(),
            test_events: test_utts.iter().map(|u| u.events.clone()).collect(),
            test_mos: test_loaded
                .iter()
                .map(|u| (u.utt_id.clone(), u.mos))
                .collect(),
            wall_s: started.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn acceptance_01_gradient_correctness() {
    let started = Instant::now();
    let arch = ArchConfig {
        conv_channels: [4, 6, 8],
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 16,
        pos_kernel: 5,
        decoder: DecoderVariant::Linear,
        rnn_hidden: 4,
    };
    let params = ModelParams::<f64>::init(&arch, 11).expect("init");
    assert!(params.n_params() <= 50_000);

    // Two short utterances with fixed slices, so the full objective is a
    // deterministic function of the parameters.
    let mk_input = |n: usize, f0: f64, f1: f64| {
        let samples: Vec<f32> = (0..n)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                (0.5 * (2.0 * PI * f0 * t).sin() + 0.2 * (2.0 * PI * f1 * t + 1.3).sin()) as f32
            })
            .collect();
        let w = preprocess(&Waveform::new(samples, 16_000).expect("waveform")).expect("preprocess");
        input_matrix::<f64>(&w).expect("input")
    };
    let cases = [
        (mk_input(5_760, 220.0, 700.0), 3.2, SliceSpec::new(3, 12)),
        (mk_input(7_200, 150.0, 940.0), 4.1, SliceSpec::new(5, 18)),
    ];
    let weights = LossWeights {
        lambda_emb: 1.0,
        lambda_scores: 1.0,
        lambda_qnet: 0.5,
        ..LossWeights::default()
    };

    let arch_ref = arch.clone();
    let fd = gradient_check(
        &params,
        move |tape, pv| {
            let mut utts = Vec::new();
            let mut q_vars = Vec::new();
            for (input, label, spec) in &cases {
                let fwd = forward_graph(tape, pv, &arch_ref, input.clone())?;
                let (r0, r1) = spec.rows();
                let (h_slice, q_slice) = slice_branch_graph(tape, pv, &arch_ref, fwd.z, r0, r1)?;
                utts.push(UttLossVars {
                    y_hat: fwd.y_hat,
                    label: *label,
                    slice: Some((fwd.h_norm, h_slice, fwd.q, q_slice, *spec)),
                });
                q_vars.push(fwd.q);
            }
            let (total, _) = g_batch_loss(tape, &utts, &q_vars, &weights).expect("batch loss");
            Ok(total)
        },
        240,
        17,
    )
    .expect("gradient check");

    let elapsed = started.elapsed().as_secs_f64();
    let ok = fd.max_rel_err < 1e-4 && elapsed < 60.0;
    assert!(report(
        1,
        ok,
        format!(
            "full-objective gradients vs central differences: max rel err {:.3e} over {} coords in {elapsed:.1}s",
            fd.max_rel_err, fd.n_checked
        )
    ));
}

#[test]
fn acceptance_02_consistency_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = SliceSpec::new(3, 9);
    let (t, d) = (14, 5);
    let h = Array2::from_shape_fn((t, d), |_| rng.gen_range(-1.0..1.0));
    let q: Vec<f64> = (0..t).map(|_| rng.gen_range(1.0..5.0)).collect();
    let (r0, r1) = spec.rows();
    let h_slice = h.slice(s![r0..r1, ..]).to_owned();
    let q_slice = q[r0..r1].to_vec();

    let zero_emb = loss_emb(&h, &h_slice, &spec).expect("emb");
    let zero_scores = loss_scores(&q, &q_slice, &spec).expect("scores");

    let eps = 3e-4;
    let denom = (spec.end - spec.m) as f64;
    let mut h_pert = h_slice.clone();
    h_pert[(2, 1)] += eps;
    let emb_err = (loss_emb(&h, &h_pert, &spec).expect("emb") - eps * eps / denom).abs();
    let mut q_pert = q_slice.clone();
    q_pert[4] += eps;
    let scores_err = (loss_scores(&q, &q_pert, &spec).expect("scores") - eps / denom).abs();

    let ok = zero_emb == 0.0 && zero_scores == 0.0 && emb_err < 1e-9 && scores_err < 1e-9;
    assert!(report(
        2,
        ok,
        format!(
            "consistency losses are exactly zero at fixed points; one-frame eps perturbation matches closed form (emb off by {emb_err:.3e}, scores by {scores_err:.3e})"
        )
    ));
}

#[test]
fn acceptance_03_volatility_trend() {
    let fx = fixture();
    let mean_vol = |m: &TrainedModel| {
        let vols: Vec<f64> = m
            .test
            .values()
            .map(|s| volatility(&s.scores.scores, s.scores.fps).expect("volatility"))
            .collect();
        vols.iter().sum::<f64>() / vols.len() as f64
    };
    let vol_a = mean_vol(&fx.model_a);
    let vol_b = mean_vol(&fx.model_b);
    let ok = vol_b <= 0.5 * vol_a && fx.wall_s <= 30.0 * 60.0;
    assert!(report(
        3,
        ok,
        format!(
            "consistency training at least halves mean test volatility: {vol_b:.4} vs {vol_a:.4} (ratio {:.3}), fixture built in {:.0}s",
            vol_b / vol_a,
            fx.wall_s
        )
    ));
}

#[test]
fn acceptance_04_detection_precision_trend() {
    let fx = fixture();
    let eval_cfg = EvalConfig {
        rho_dtc: 0.7,
        rho_gtc: 0.3,
    };
    let run = |m: &TrainedModel| {
        let dev_scores: Vec<(String, FrameScores)> = m
            .dev
            .iter()
            .map(|(id, s)| (id.clone(), s.scores.clone()))
            .collect();
        let (theta, _) = tune_threshold(
            &dev_scores,
            &fx.dev_events,
            &DetectionConfig::default(),
            &eval_cfg,
        )
        .expect("tune");
        let det_cfg = DetectionConfig {
            threshold: Some(theta),
            ..DetectionConfig::default()
        };
        let mut n_dets = 0usize;
        let det_lists: Vec<EventList> = m
            .test
            .iter()
            .map(|(id, s)| {
                let dets = detect_from_scores(&s.scores, &det_cfg).expect("detect");
                n_dets += dets.len();
                detections_to_events(id.clone(), &dets).expect("events")
            })
            .collect();
        let rep = intersection_eval(&eval_cfg, &det_lists, &fx.test_events).expect("eval");
        (n_dets, rep.precision)
    };
    let (n_a, prec_a) = run(&fx.model_a);
    let (n_b, prec_b) = run(&fx.model_b);
    let ok = prec_b >= prec_a && n_a > 0 && n_b > 0;
    assert!(report(
        4,
        ok,
        format!(
            "dev-tuned detection at rho (0.7, 0.3): regularized precision {prec_b:.4} >= baseline {prec_a:.4}; {n_b} and {n_a} detections"
        )
    ));
}

#[test]
fn acceptance_05_utterance_srcc() {
    let fx = fixture();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (id, s) in &fx.model_b.test {
        preds.push(s.y_hat);
        labels.push(fx.test_mos[id]);
    }
    let srcc = spearman(&preds, &labels).expect("srcc");
    let ok = srcc >= 0.8;
    assert!(report(
        5,
        ok,
        format!("regularized model reaches utterance SRCC {srcc:.4} >= 0.8 on the test split")
    ));
}

// Quadratic reference for the intersection counts: sums every pairwise
// overlap with no sorting or pruning shortcuts.
fn oracle_counts(cfg: &EvalConfig, dets: &[(f64, f64)], gts: &[(f64, f64)]) -> (usize, usize, usize) {
    let inter =
        |a: (f64, f64), b: (f64, f64)| -> f64 { (a.1.min(b.1) - a.0.max(b.0)).max(0.0) };
    let relevant: Vec<bool> = dets
        .iter()
        .map(|&d| {
            let covered: f64 = gts.iter().map(|&g| inter(d, g)).sum();
            covered / (d.1 - d.0) >= cfg.rho_dtc
        })
        .collect();
    let tp = gts
        .iter()
        .filter(|&&g| {
            let covered: f64 = dets
                .iter()
                .zip(&relevant)
                .filter(|&(_, &r)| r)
                .map(|(&d, _)| inter(d, g))
                .sum();
            covered / (g.1 - g.0) >= cfg.rho_gtc
        })
        .count();
    let fp = relevant.iter().filter(|&&r| !r).count();
    (tp, fp, gts.len() - tp)
}

fn random_intervals(rng: &mut ChaCha8Rng, max_n: usize) -> Vec<(f64, f64)> {
    let n = rng.gen_range(0..=max_n);
    let mut cursor = 0.0f64;
    let mut out = Vec::new();
    for _ in 0..n {
        cursor += rng.gen_range(0.05..1.5);
        let len = rng.gen_range(0.1..2.0);
        out.push((cursor, cursor + len));
        cursor += len;
    }
    out
}

#[test]
fn acceptance_06_intersection_eval_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n_instances = 200;
    let mut agreed = 0;
    for case in 0..n_instances {
        // Every fifth instance lands its overlap ratios exactly on the
        // thresholds (dyadic lengths, so the quotients are exact).
        let (cfg, dets, gts) = if case % 5 == 0 {
            let cfg = EvalConfig {
                rho_dtc: 0.5,
                rho_gtc: 0.25,
            };
            let shift = f64::from(rng.gen_range(0..8u8)) * 0.5;
            let gt_len = if case % 10 == 0 { 4.0 } else { 8.0 };
            (
                cfg,
                vec![(shift, shift + 2.0)],
                vec![(shift + 1.0, shift + 1.0 + gt_len)],
            )
        } else {
            let cfg = EvalConfig {
                rho_dtc: rng.gen_range(0.05..1.0),
                rho_gtc: rng.gen_range(0.05..1.0),
            };
            let dets = random_intervals(&mut rng, 6);
            let gts = random_intervals(&mut rng, 5);
            (cfg, dets, gts)
        };
        let to_list = |iv: &[(f64, f64)]| {
            let events = iv
                .iter()
                .map(|&(a, b)| Event::new(a, b).expect("event"))
                .collect();
            EventList::new("u", events).expect("list")
        };
        let rep = intersection_eval(&cfg, &[to_list(&dets)], &[to_list(&gts)]).expect("eval");
        let (tp, fp, fn_) = oracle_counts(&cfg, &dets, &gts);
        if rep.tp == tp && rep.fp == fp && rep.fn_ == fn_ {
            agreed += 1;
        }
    }
    let ok = agreed == n_instances;
    assert!(report(
        6,
        ok,
        format!(
            "intersection evaluation matches the quadratic oracle on {agreed}/{n_instances} randomized instances, boundary ratios included"
        )
    ));
}

#[test]
fn acceptance_07_threshold_calibration() {
    let fx = fixture();
    // Clean reference: same synthesis settings, zero injected events.
    let cfg = CorpusConfig {
        n_utterances: 700,
        events_per_utt_range: (0, 0),
        seed: 400,
        ..trend_corpus_cfg(700, 400)
    };
    let utts = generate_corpus(&cfg).expect("corpus");
    let mut pooled: Vec<f32> = Vec::new();
    for u in &utts {
        let w = preprocess(&u.waveform).expect("preprocess");
        let out = forward(&fx.model_b.params, &fx.arch, &w).expect("forward");
        pooled.extend_from_slice(&out.scores.scores);
    }
    let n = pooled.len();
    let target = 0.01;
    let theta = select_threshold(&pooled, target).expect("threshold");
    let below = pooled.iter().filter(|&&v| f64::from(v) < theta).count();
    let achieved = below as f64 / n as f64;
    let ok = n >= 100_000 && achieved <= target && achieved >= target - 1.0 / n as f64;
    assert!(report(
        7,
        ok,
        format!(
            "calibration on {n} pooled clean frames: achieved rate {achieved:.6} within [{:.6}, {target}]",
            target - 1.0 / n as f64
        )
    ));
}

#[test]
fn acceptance_08_volatility_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // Direct reference: two-pass population std of log returns, scaled by
    // sqrt(frames / fps).
    let direct = |scores: &[f32], fps: u32| {
        let r: Vec<f64> = scores
            .windows(2)
            .map(|w| (f64::from(w[1]) / f64::from(w[0])).ln())
            .collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / r.len() as f64;
        (scores.len() as f64 / f64::from(fps)).sqrt() * var.sqrt()
    };
    let mut max_diff = 0.0f64;
    for _ in 0..100 {
        let t = rng.gen_range(3..400);
        let scores: Vec<f32> = (0..t).map(|_| rng.gen_range(1.0f32..5.0)).collect();
        let mine = volatility(&scores, FPS).expect("volatility");
        max_diff = max_diff.max((mine - direct(&scores, FPS)).abs());
    }
    // Constant-ratio sequences built from exactly representable floats: every
    // log return shares one bit pattern, so the variance must be exactly 0.
    let geometrics: [Vec<f32>; 3] = [
        (0..30).map(|t| 2.0f32.powi(t)).collect(),
        (0..24).map(|t| 3.0 * 0.5f32.powi(t)).collect(),
        (0..20).map(|t| 1.25 * 2.0f32.powi(t)).collect(),
    ];
    let geo_zero = geometrics
        .iter()
        .all(|g| volatility(g, FPS).expect("volatility") == 0.0);
    let ok = max_diff <= 1e-9 && geo_zero;
    assert!(report(
        8,
        ok,
        format!(
            "volatility agrees with a direct reference within {max_diff:.3e} on 100 sequences; geometric sequences give exactly 0"
        )
    ));
}

#[test]
fn acceptance_09_tuned_threshold_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let det_cfg = DetectionConfig::default();
    let eval_cfg = EvalConfig {
        rho_dtc: 0.7,
        rho_gtc: 0.3,
    };
    let mut failures = 0;
    let mut worst_gap = 0.0f64;
    for _ in 0..20 {
        // Small dev set whose scores dip inside the ground-truth events.
        let mut frame_scores = Vec::new();
        let mut gt = Vec::new();
        for u in 0..rng.gen_range(3..=5) {
            let t = rng.gen_range(80..160);
            let mut scores: Vec<f32> = (0..t).map(|_| rng.gen_range(2.8f32..4.6)).collect();
            let mut events = Vec::new();
            let mut cursor = 0usize;
            for _ in 0..rng.gen_range(0..3u32) {
                let start = cursor + rng.gen_range(5..25);
                let len = rng.gen_range(6..20);
                if start + len + 5 >= t {
                    break;
                }
                let depth = rng.gen_range(1.1f32..2.6);
                for v in &mut scores[start..start + len] {
                    *v = depth + rng.gen_range(-0.05f32..0.05);
                }
                let fps = f64::from(FPS);
                events.push(
                    Event::new(start as f64 / fps, (start + len) as f64 / fps).expect("event"),
                );
                cursor = start + len;
            }
            let id = format!("u{u}");
            gt.push(EventList::new(id.clone(), events).expect("gt"));
            frame_scores.push((id, FrameScores::new(scores, FPS).expect("scores")));
        }
        let (_, tuned) = tune_threshold(&frame_scores, &gt, &det_cfg, &eval_cfg).expect("tune");

        let pooled: Vec<f64> = frame_scores
            .iter()
            .flat_map(|(_, s)| s.scores.iter().map(|&v| f64::from(v)))
            .collect();
        let lo = pooled.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut best_grid = 0.0f64;
        for i in 0..10_000 {
            let theta = lo + (hi - lo) * i as f64 / 9_999.0;
            let cfg = DetectionConfig {
                threshold: Some(theta),
                ..DetectionConfig::default()
            };
            let lists: Vec<EventList> = frame_scores
                .iter()
                .map(|(id, scores)| {
                    let dets = detect_from_scores(scores, &cfg).expect("detect");
                    detections_to_events(id.clone(), &dets).expect("events")
                })
                .collect();
            let rep = intersection_eval(&eval_cfg, &lists, &gt).expect("eval");
            best_grid = best_grid.max(rep.f1);
        }
        if tuned.f1 < best_grid {
            failures += 1;
            worst_gap = worst_gap.max(best_grid - tuned.f1);
        }
    }
    let ok = failures == 0;
    assert!(report(
        9,
        ok,
        format!(
            "tuned threshold F1 >= best of a 10000-point uniform grid on 20/20 dev sets ({failures} failures, worst gap {worst_gap:.3e})"
        )
    ));
}

#[test]
fn acceptance_10_cli_determinism() {
    let bin = env!("CARGO_BIN_EXE_framequal");
    let root = TempDir::new().expect("tempdir");
    let arch_toml = root.path().join("arch.toml");
    fs::write(
        &arch_toml,
        "[arch]\nconv_channels = [4, 6, 8]\nd_model = 8\nn_heads = 2\nn_layers = 1\nffn_dim = 16\npos_kernel = 5\nrnn_hidden = 4\n",
    )
    .expect("write config");

    let work = root.path().join("work");
    let run_pipeline = |dir: &Path| {
        let p = |tail: &str| dir.join(tail).to_str().expect("utf8 path").to_owned();
        let steps: Vec<Vec<String>> = vec![
            vec!["gen", "--out", &p("corpus"), "--seed", "5", "--n-utterances", "6"],
            vec![
                "train",
                "--corpus",
                &p("corpus/manifest.csv"),
                "--dev",
                &p("corpus/manifest.csv"),
                "--out",
                &p("model"),
                "--config",
                arch_toml.to_str().expect("utf8 path"),
                "--epochs",
                "1",
                "--batch-size",
                "4",
                "--seed",
                "5",
                "--lambda-emb",
                "1",
                "--lambda-scores",
                "1",
            ],
            vec![
                "score",
                "--checkpoint",
                &p("model/checkpoint.json"),
                "--manifest",
                &p("corpus/manifest.csv"),
                "--out",
                &p("scores"),
            ],
            vec![
                "detect",
                "--scores",
                &p("scores/frame_scores.csv"),
                "--reference",
                &p("scores/frame_scores.csv"),
                "--out",
                &p("det"),
            ],
            vec![
                "eval",
                "--detections",
                &p("det/detections.csv"),
                "--events",
                &p("corpus/events.csv"),
                "--out",
                &p("ev"),
                "--rho",
                "0.7,0.3",
            ],
        ]
        .into_iter()
        .map(|v| v.into_iter().map(str::to_owned).collect())
        .collect();
        for args in steps {
            let out = Command::new(bin).args(&args).output().expect("run step");
            assert!(
                out.status.success(),
                "step {args:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
    };

    fn snapshot(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("read dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                snapshot(base, &path, out);
            } else {
                let rel = path
                    .strip_prefix(base)
                    .expect("relative")
                    .to_str()
                    .expect("utf8 path")
                    .to_owned();
                out.insert(rel, fs::read(&path).expect("read file"));
            }
        }
    }

    // Same directory both times, so every recorded path is identical and the
    // only legitimate difference is the manifests' wall-clock field.
    fs::create_dir_all(&work).expect("mkdir");
    run_pipeline(&work);
    let mut first = BTreeMap::new();
    snapshot(&work, &work, &mut first);
    fs::remove_dir_all(&work).expect("rm");
    fs::create_dir_all(&work).expect("mkdir");
    run_pipeline(&work);
    let mut second = BTreeMap::new();
    snapshot(&work, &work, &mut second);

    let same_names = first.keys().eq(second.keys());
    let strip_wall = |bytes: &[u8]| {
        let mut v: serde_json::Value = serde_json::from_slice(bytes).expect("manifest json");
        v.as_object_mut().expect("object").remove("wall_clock_s");
        v
    };
    let mut mismatched: Vec<String> = Vec::new();
    for (rel, bytes) in &first {
        let Some(other) = second.get(rel) else {
            continue;
        };
        let equal = if rel.ends_with("run_manifest.json") {
            strip_wall(bytes) == strip_wall(other)
        } else {
            bytes == other
        };
        if !equal {
            mismatched.push(rel.clone());
        }
    }
    let ok = same_names && mismatched.is_empty() && !first.is_empty();
    assert!(report(
        10,
        ok,
        format!(
            "two identical gen/train/score/detect/eval runs match on all {} output files{}",
            first.len(),
            if mismatched.is_empty() {
                String::new()
            } else {
                format!("; mismatches: {mismatched:?}")
            }
        )
    ));
}
