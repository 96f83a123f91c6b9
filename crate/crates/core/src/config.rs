//! Run configuration as flat `section.key=value` lines.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::answerer::{AnswererConfig, LossWeights};
use crate::error::{Error, Result};
use crate::ftc::FtcConfig;
use crate::ndcore::AdamW;
use crate::synthbench::SynthConfig;
use crate::tms::{GrounderMode, SamplingPolicy};

#[derive(Clone, Debug, PartialEq)]
pub struct TmsConfig {
    /// Total frame budget K of the resampled clip.
    pub budget: usize,
    /// Window half-width w in frames.
    pub window: usize,
    /// Anchor jitter bound for the noisy oracle grounder.
    pub noise_delta: usize,
    /// Units merged into grounded intervals by the learned grounder.
    pub top_m: usize,
    pub grounder: GrounderMode,
    /// Policy used for every window when the instructor is disabled.
    pub policy_fixed: SamplingPolicy,
    pub instructor_dim: usize,
    pub instructor_hidden: usize,
    pub grounder_lr: f64,
    pub grounder_epochs: usize,
}

impl Default for TmsConfig {
    fn default() -> Self {
        Self {
            budget: 6,
            window: 8,
            noise_delta: 4,
            top_m: 2,
            grounder: GrounderMode::Learned,
            policy_fixed: SamplingPolicy::Uniform,
            instructor_dim: 16,
            instructor_hidden: 32,
            grounder_lr: 0.05,
            grounder_epochs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    /// Gradient norm cap per step; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of the steps spent warming the rate up before cosine decay.
    pub warmup: f64,
    /// Probability of dropping each question word during training.
    pub word_dropout: f64,
    /// Probability that a training clip is padded out with evenly spaced
    /// frames from the whole video.
    pub long_context_rate: f64,
    /// Largest number of evenly spaced frames such a clip adds.
    pub long_context_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr: 3e-3,
            weight_decay: AdamW::DEFAULT_WEIGHT_DECAY,
            batch_size: 2,
            grad_accum: 8,
            epochs: 3,
            grad_clip: 1.0,
            warmup: 0.05,
            word_dropout: 0.25,
            long_context_rate: 0.25,
            long_context_frames: 64,
        }
    }
}

impl TrainConfig {
    /// Samples per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsConfig {
    /// Decimal places kept in reports.
    pub decimals: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { decimals: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub frames: Vec<usize>,
    /// Long videos used for the K-ACC column.
    pub videos: usize,
    /// Frames of each long video; the grid is subsampled from it.
    pub source_frames: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            frames: vec![64, 128, 256, 512, 1024],
            videos: 8,
            source_frames: 1024,
        }
    }
}

/// Pipeline components switched by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    /// Temporal consolidation with timestamps; off means per-frame patch tokens.
    pub ftc: bool,
    /// Grounded windows; off means evenly spaced frames over the whole video.
    pub tg: bool,
    /// Policy instructor; off means `tms.policy_fixed` in every window.
    pub pi: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            ftc: true,
            tg: true,
            pi: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub toggles: Toggles,
    pub ftc: FtcConfig,
    /// Spatial patch of the per-frame tokenizer used when FTC is off.
    pub frame_patch: usize,
    pub tms: TmsConfig,
    pub answerer: AnswererConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub metrics: MetricsConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: SynthConfig::default().seed,
            out: None,
            toggles: Toggles::default(),
            ftc: FtcConfig::default(),
            frame_patch: 2,
            tms: TmsConfig::default(),
            answerer: AnswererConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            metrics: MetricsConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "run.seed" => {
                self.seed = parse(key, v)?;
                self.synth.seed = self.seed;
            }
            "run.out" => self.out = Some(PathBuf::from(v)),
            "run.ftc" => self.toggles.ftc = parse(key, v)?,
            "run.tg" => self.toggles.tg = parse(key, v)?,
            "run.pi" => self.toggles.pi = parse(key, v)?,
            "ftc.p_t" => self.ftc.p_t = parse(key, v)?,
            "ftc.p_s" => self.ftc.p_s = parse(key, v)?,
            "ftc.channels" => self.ftc.channels = parse_list(key, v)?,
            "ftc.embed_dim" => self.ftc.embed_dim = parse(key, v)?,
            "ftc.mask_fraction" => self.ftc.mask_fraction = parse(key, v)?,
            "ftc.sample_fraction" => self.ftc.sample_fraction = parse(key, v)?,
            "ftc.retriever_hidden" => self.ftc.retriever_hidden = parse(key, v)?,
            "ftc.frame_patch" => self.frame_patch = parse(key, v)?,
            "tms.budget" => self.tms.budget = parse(key, v)?,
            "tms.window" => self.tms.window = parse(key, v)?,
            "tms.noise_delta" => self.tms.noise_delta = parse(key, v)?,
            "tms.top_m" => self.tms.top_m = parse(key, v)?,
            "tms.grounder" => self.tms.grounder = v.parse()?,
            "tms.policy_fixed" => {
                self.tms.policy_fixed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))?
            }
            "tms.instructor_dim" => self.tms.instructor_dim = parse(key, v)?,
            "tms.instructor_hidden" => self.tms.instructor_hidden = parse(key, v)?,
            "tms.grounder_lr" => self.tms.grounder_lr = parse(key, v)?,
            "tms.grounder_epochs" => self.tms.grounder_epochs = parse(key, v)?,
            "answerer.dim" => self.answerer.dim = parse(key, v)?,
            "answerer.hidden" => self.answerer.hidden = parse(key, v)?,
            "answerer.max_len" => self.answerer.max_len = parse(key, v)?,
            "answerer.heads" => self.answerer.heads = parse(key, v)?,
            "answerer.max_slots" => self.answerer.max_slots = parse(key, v)?,
            "answerer.lambda_ret" => self.train.weights.ret = parse(key, v)?,
            "answerer.lambda_policy" => self.train.weights.policy = parse(key, v)?,
            "answerer.lr" => self.train.lr = parse(key, v)?,
            "answerer.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "answerer.batch_size" => self.train.batch_size = parse(key, v)?,
            "answerer.grad_accum" => self.train.grad_accum = parse(key, v)?,
            "answerer.epochs" => self.train.epochs = parse(key, v)?,
            "answerer.grad_clip" => self.train.grad_clip = parse(key, v)?,
            "answerer.warmup" => self.train.warmup = parse(key, v)?,
            "answerer.word_dropout" => self.train.word_dropout = parse(key, v)?,
            "answerer.long_context_rate" => self.train.long_context_rate = parse(key, v)?,
            "answerer.long_context_frames" => self.train.long_context_frames = parse(key, v)?,
            "synthbench.train_videos" => self.synth.train_videos = parse(key, v)?,
            "synthbench.val_videos" => self.synth.val_videos = parse(key, v)?,
            "synthbench.test_videos" => self.synth.test_videos = parse(key, v)?,
            "synthbench.episodes_per_video" => self.synth.episodes_per_video = parse(key, v)?,
            "synthbench.episode_frames" => self.synth.episode_frames = parse(key, v)?,
            "synthbench.height" => self.synth.height = parse(key, v)?,
            "synthbench.width" => self.synth.width = parse(key, v)?,
            "synthbench.fps" => self.synth.fps = parse(key, v)?,
            "synthbench.amplitude" => self.synth.amplitude = parse(key, v)?,
            "synthbench.noise" => self.synth.noise = parse(key, v)?,
            "synthbench.event_min_frames" => self.synth.event_min_frames = parse(key, v)?,
            "synthbench.event_max_frames" => self.synth.event_max_frames = parse(key, v)?,
            "synthbench.out_of_template_rate" => self.synth.out_of_template_rate = parse(key, v)?,
            "metrics.decimals" => self.metrics.decimals = parse(key, v)?,
            "bench.frames" => self.bench.frames = parse_list(key, v)?,
            "bench.videos" => self.bench.videos = parse(key, v)?,
            "bench.source_frames" => self.bench.source_frames = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let out = self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.out", out),
            ("run.ftc", self.toggles.ftc.to_string()),
            ("run.tg", self.toggles.tg.to_string()),
            ("run.pi", self.toggles.pi.to_string()),
            ("ftc.p_t", self.ftc.p_t.to_string()),
            ("ftc.p_s", self.ftc.p_s.to_string()),
            ("ftc.channels", join(&self.ftc.channels)),
            ("ftc.embed_dim", self.ftc.embed_dim.to_string()),
            ("ftc.mask_fraction", self.ftc.mask_fraction.to_string()),
            ("ftc.sample_fraction", self.ftc.sample_fraction.to_string()),
            ("ftc.retriever_hidden", self.ftc.retriever_hidden.to_string()),
            ("ftc.frame_patch", self.frame_patch.to_string()),
            ("tms.budget", self.tms.budget.to_string()),
            ("tms.window", self.tms.window.to_string()),
            ("tms.noise_delta", self.tms.noise_delta.to_string()),
            ("tms.top_m", self.tms.top_m.to_string()),
            ("tms.grounder", self.tms.grounder.to_string()),
            ("tms.policy_fixed", self.tms.policy_fixed.to_string()),
            ("tms.instructor_dim", self.tms.instructor_dim.to_string()),
            ("tms.instructor_hidden", self.tms.instructor_hidden.to_string()),
            ("tms.grounder_lr", self.tms.grounder_lr.to_string()),
            ("tms.grounder_epochs", self.tms.grounder_epochs.to_string()),
            ("answerer.dim", self.answerer.dim.to_string()),
            ("answerer.hidden", self.answerer.hidden.to_string()),
            ("answerer.max_len", self.answerer.max_len.to_string()),
            ("answerer.heads", self.answerer.heads.to_string()),
            ("answerer.max_slots", self.answerer.max_slots.to_string()),
            ("answerer.lambda_ret", self.train.weights.ret.to_string()),
            ("answerer.lambda_policy", self.train.weights.policy.to_string()),
            ("answerer.lr", self.train.lr.to_string()),
            ("answerer.weight_decay", self.train.weight_decay.to_string()),
            ("answerer.batch_size", self.train.batch_size.to_string()),
            ("answerer.grad_accum", self.train.grad_accum.to_string()),
            ("answerer.epochs", self.train.epochs.to_string()),
            ("answerer.grad_clip", self.train.grad_clip.to_string()),
            ("answerer.warmup", self.train.warmup.to_string()),
            ("answerer.word_dropout", self.train.word_dropout.to_string()),
            ("answerer.long_context_rate", self.train.long_context_rate.to_string()),
            (
                "answerer.long_context_frames",
                self.train.long_context_frames.to_string(),
            ),
            ("synthbench.train_videos", self.synth.train_videos.to_string()),
            ("synthbench.val_videos", self.synth.val_videos.to_string()),
            ("synthbench.test_videos", self.synth.test_videos.to_string()),
            (
                "synthbench.episodes_per_video",
                self.synth.episodes_per_video.to_string(),
            ),
            ("synthbench.episode_frames", self.synth.episode_frames.to_string()),
            ("synthbench.height", self.synth.height.to_string()),
            ("synthbench.width", self.synth.width.to_string()),
            ("synthbench.fps", self.synth.fps.to_string()),
            ("synthbench.amplitude", self.synth.amplitude.to_string()),
            ("synthbench.noise", self.synth.noise.to_string()),
            ("synthbench.event_min_frames", self.synth.event_min_frames.to_string()),
            ("synthbench.event_max_frames", self.synth.event_max_frames.to_string()),
            (
                "synthbench.out_of_template_rate",
                self.synth.out_of_template_rate.to_string(),
            ),
            ("metrics.decimals", self.metrics.decimals.to_string()),
            ("bench.frames", join(&self.bench.frames)),
            ("bench.videos", self.bench.videos.to_string()),
            ("bench.source_frames", self.bench.source_frames.to_string()),
        ]
    }

    /// Parses config text over the defaults. Blank lines and `#` comments are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected section.key=value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// The resolved configuration, one key per line; parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, v)| !(*k == "run.out" && v.is_empty()))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Checks every section and returns the first problem.
    pub fn validate(&self) -> Result<()> {
        self.ftc.validate()?;
        self.frame_config().validate()?;
        self.answerer.validate()?;
        self.train.weights.validate()?;
        self.synth.validate()?;
        let t = &self.tms;
        if t.budget == 0 || t.top_m == 0 || t.instructor_dim == 0 || t.instructor_hidden == 0 {
            return Err(Error::Config("tms sizes must be positive".into()));
        }
        let tr = &self.train;
        if !(tr.grad_clip >= 0.0)
            || !(0.0..1.0).contains(&tr.warmup)
            || !(0.0..1.0).contains(&tr.word_dropout)
            || !(0.0..=1.0).contains(&tr.long_context_rate)
        {
            return Err(Error::Config(
                "answerer.grad_clip must be ≥ 0, answerer.warmup and answerer.word_dropout in [0, 1), answerer.long_context_rate in [0, 1]".into(),
            ));
        }
        if tr.batch_size == 0 || tr.grad_accum == 0 || !(tr.lr > 0.0) || tr.weight_decay < 0.0 {
            return Err(Error::Config(
                "training schedule must have positive sizes and learning rate".into(),
            ));
        }
        if !(t.grounder_lr > 0.0) {
            return Err(Error::Config("tms.grounder_lr must be positive".into()));
        }
        let b = &self.bench;
        if b.frames.is_empty() || b.frames.iter().any(|&f| f == 0 || f > b.source_frames) {
            return Err(Error::Config(format!(
                "bench.frames must lie in 1..={}",
                b.source_frames
            )));
        }
        Ok(())
    }

    /// Encoder settings for the active model: the FTC stack, or per-frame
    /// patches of `frame_patch` pixels when FTC is off.
    pub fn encoder_config(&self) -> FtcConfig {
        if self.toggles.ftc {
            self.ftc.clone()
        } else {
            self.frame_config()
        }
    }

    pub fn frame_config(&self) -> FtcConfig {
        FtcConfig {
            p_t: 1,
            p_s: self.frame_patch,
            ..self.ftc.clone()
        }
    }

    /// Loss weights for the active model; the retrieval term belongs to FTC.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ret: if self.toggles.ftc { self.train.weights.ret } else { 0.0 },
            ..self.train.weights
        }
    }

    /// Policy applied in every window, or `None` when the instructor decides.
    pub fn fixed_policy(&self) -> Option<SamplingPolicy> {
        (!self.toggles.pi).then_some(self.tms.policy_fixed)
    }
}
