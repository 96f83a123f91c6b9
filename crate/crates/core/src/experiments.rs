//! The component ablation and the input-length scalability sweep.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::{RunConfig, Toggles};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, InstanceScore, KACC, METRIC_NAMES};
use crate::ndcore::Tape;
use crate::pipeline::{evaluate, predict_all, train, train_grounder, Model, TrainReport};
use crate::synthbench::{generate_with_questions, Dataset, QaInstance, Split, SynthConfig, NUM_CHANNELS};
use crate::tms::global_uniform;

/// Ablation arms in reporting order: (name, toggles).
pub const ARMS: [(&str, Toggles); 4] = [
    (
        "base",
        Toggles {
            ftc: false,
            tg: false,
            pi: false,
        },
    ),
    (
        "+FTC",
        Toggles {
            ftc: true,
            tg: false,
            pi: false,
        },
    ),
    (
        "+FTC+TG",
        Toggles {
            ftc: true,
            tg: true,
            pi: false,
        },
    ),
    (
        "+FTC+TG+PI",
        Toggles {
            ftc: true,
            tg: true,
            pi: true,
        },
    ),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: &'static str,
    /// `all` or `sparse` (brief-event questions only).
    pub subset: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Debug)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub ftc_model: Model,
    pub frame_model: Model,
    pub ftc_log: TrainReport,
    pub frame_log: TrainReport,
}

impl Ablation {
    pub fn get(&self, arm: &str, subset: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && r.subset == subset && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,subset,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.2}", r.arm, r.subset, r.metric, r.value);
        }
        s
    }
}

/// Config of one arm: the base config with the arm's toggles.
pub fn arm_config(cfg: &RunConfig, toggles: Toggles) -> RunConfig {
    RunConfig { toggles, ..cfg.clone() }
}

/// Trains a model for `cfg.toggles.ftc` (and its grounder when FTC is on).
pub fn train_model(
    cfg: &RunConfig,
    ds: &Dataset,
    on_step: impl FnMut(&crate::pipeline::TrainLogRow),
) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(cfg, ds.tokenizer.clone(), NUM_CHANNELS)?;
    let report = train(&mut model, ds, cfg, on_step)?;
    if let Some(e) = report.failure {
        return Err(e);
    }
    if cfg.toggles.ftc {
        train_grounder(&mut model, ds, cfg)?;
    }
    Ok((model, report))
}

fn mean(scores: &[&InstanceScore], metric: &str) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| s.value(metric)).sum::<f64>() / scores.len() as f64
}

/// Scores one arm on the test split.
pub fn evaluate_arm(model: &Model, cfg: &RunConfig, ds: &Dataset, qas: &[&QaInstance]) -> Result<EvalReport> {
    let preds = predict_all(model, cfg, ds, qas)?;
    let map = preds.into_iter().map(|p| (p.id, p.answer)).collect();
    evaluate(&map, qas)
}

/// Trains the frame-token model and the FTC model with identical seeds and
/// data, then evaluates the four arms on the test split.
pub fn run_ablation(cfg: &RunConfig, ds: &Dataset, mut progress: impl FnMut(&str)) -> Result<Ablation> {
    let qas = ds.split(Split::Test);
    if qas.is_empty() {
        return Err(Error::EmptyDataset);
    }
    progress("training frame-token model");
    let (frame_model, frame_log) = train_model(&arm_config(cfg, ARMS[0].1), ds, |_| {})?;
    progress("training FTC model");
    let (ftc_model, ftc_log) = train_model(&arm_config(cfg, ARMS[3].1), ds, |_| {})?;
    let mut rows = Vec::new();
    for (arm, toggles) in ARMS {
        progress(&format!("evaluating {arm}"));
        let model = if toggles.ftc { &ftc_model } else { &frame_model };
        let report = evaluate_arm(model, &arm_config(cfg, toggles), ds, &qas)?;
        let sparse_ids: std::collections::HashSet<&str> = qas
            .iter()
            .filter(|q| q.qtype.is_sparse())
            .map(|q| q.id.as_str())
            .collect();
        let all: Vec<&InstanceScore> = report.instances.iter().collect();
        let sparse: Vec<&InstanceScore> = all
            .iter()
            .copied()
            .filter(|s| sparse_ids.contains(s.id.as_str()))
            .collect();
        for (subset, group) in [("all", &all), ("sparse", &sparse)] {
            for metric in METRIC_NAMES {
                rows.push(AblationRow {
                    arm,
                    subset,
                    metric,
                    value: (mean(group, metric) * 100.0).round() / 100.0,
                });
            }
        }
    }
    Ok(Ablation {
        rows,
        ftc_model,
        frame_model,
        ftc_log,
        frame_log,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    /// `ftc` or `frames`.
    pub mode: &'static str,
    pub frames: usize,
    pub visual_tokens: usize,
    /// Bytes held by the tape after encoding and one answer pass.
    pub arena_bytes: usize,
    /// Mean wall-clock time per video to encode and answer every question.
    pub runtime_ms: f64,
    pub kacc: f64,
}

pub const BENCH_HEADER: &str = "mode,frames,visual_tokens,arena_bytes,runtime_ms,kacc";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.3},{:.2}",
            r.mode, r.frames, r.visual_tokens, r.arena_bytes, r.runtime_ms, r.kacc
        );
    }
    s
}

/// Long-video generator settings: 64-frame episodes up to `source_frames`.
pub fn long_video_config(cfg: &RunConfig) -> Result<SynthConfig> {
    let episode = 64;
    if !cfg.bench.source_frames.is_multiple_of(episode) {
        return Err(Error::Config(format!(
            "bench.source_frames must be a multiple of {episode}"
        )));
    }
    Ok(SynthConfig {
        episodes_per_video: cfg.bench.source_frames / episode,
        episode_frames: episode,
        test_videos: cfg.bench.videos,
        ..cfg.synth.clone()
    })
}

/// Sweeps the input frame count for both models. Each point subsamples the
/// long videos evenly, encodes every frame kept and answers every question
/// from the full sequence.
pub fn run_bench(cfg: &RunConfig, ftc_model: &Model, frame_model: &Model) -> Result<Vec<BenchRow>> {
    let long = long_video_config(cfg)?;
    long.validate()?;
    let videos = (0..cfg.bench.videos)
        .map(|i| generate_with_questions(&long, Split::Test, i))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (mode, model) in [("ftc", ftc_model), ("frames", frame_model)] {
        let p_t = model.encoder.config().p_t;
        for &t in &cfg.bench.frames {
            let mut tokens = 0;
            let mut arena = 0;
            let mut hits = 0usize;
            let mut asked = 0usize;
            let mut elapsed = 0.0;
            for (stitched, qas) in &videos {
                let mut frames = global_uniform(stitched.video.num_frames(), t)?;
                frames.truncate(frames.len() / p_t * p_t);
                let clip = stitched.video.select(&frames)?;
                let start = Instant::now();
                let mut tape = Tape::new();
                let (rep, seq) = model.sequence(&mut tape, &clip)?;
                for (i, qa) in qas.iter().enumerate() {
                    let q = model.tokenizer.encode(&qa.question)?;
                    let a = model
                        .answerer
                        .answer(&model.store, &seq, &mut tape, &q, &model.tokenizer)?;
                    if i == 0 {
                        arena = tape.activation_bytes();
                    }
                    hits += crate::metrics::keyword_accuracy(&a, &qa.keywords)? as usize;
                    asked += 1;
                }
                elapsed += start.elapsed().as_secs_f64() * 1e3;
                tokens = rep.token_count();
            }
            rows.push(BenchRow {
                mode,
                frames: t,
                visual_tokens: tokens,
                arena_bytes: arena,
                runtime_ms: elapsed / videos.len().max(1) as f64,
                kacc: 100.0 * hits as f64 / asked.max(1) as f64,
            });
        }
    }
    Ok(rows)
}

/// Convenience for callers that only need the K-ACC of a report.
pub fn kacc(report: &EvalReport) -> f64 {
    report.get("all", KACC).unwrap_or(0.0)
}
