//! Seeded synthetic long-video QA benchmark.
//!
//! Each video stitches short episodes rendered as 6-channel frames:
//!
//! | channel | content |
//! |---------|---------|
//! | 0 | scene background (noise plus the global lighting offset) |
//! | 1 | fluid event, lit in the quadrant naming the fluid |
//! | 2 | motion event, lit in the quadrant naming the direction |
//! | 3 | instrument event, lit in the quadrant naming the instrument |
//! | 4 | two-frame transition marker |
//! | 5 | scope depth level, which rises (advancing) or falls (withdrawing) at the marker |
//!
//! The lighting offset is added to every channel. Sparse events last a few
//! frames and appear once per video, so evenly spaced sampling usually
//! misses them.

mod io;
mod oracle;

pub(crate) use io::parse_kv;
pub use io::{load_dataset, save_dataset};
pub use oracle::oracle_answer;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::tms::SamplingPolicy;
use crate::tokenizer::Tokenizer;
use crate::video::VideoTensor;

pub const NUM_CHANNELS: usize = 6;
pub const SCENE_CHANNEL: usize = 0;
pub const MARKER_CHANNEL: usize = 4;
pub const DEPTH_CHANNEL: usize = 5;
pub const LIGHTING_OFFSET: f64 = 0.3;
pub const DEPTH_LEVEL: f64 = 0.5;
/// Frames on each side of the transition marker in its ground-truth interval.
pub const PHASE_MARGIN: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QuestionType {
    Fluid,
    Motion,
    Lighting,
    Instrument,
    PhaseOrder,
}

impl QuestionType {
    pub const ALL: [QuestionType; 5] = [
        Self::Fluid,
        Self::Motion,
        Self::Lighting,
        Self::Instrument,
        Self::PhaseOrder,
    ];
    pub const SPARSE: [QuestionType; 3] = [Self::Fluid, Self::Motion, Self::Instrument];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fluid => "fluid",
            Self::Motion => "motion",
            Self::Lighting => "lighting",
            Self::Instrument => "instrument",
            Self::PhaseOrder => "phase-order",
        }
    }

    /// Brief events that occupy a few frames of the video.
    pub fn is_sparse(self) -> bool {
        Self::SPARSE.contains(&self)
    }

    /// Rendering channel of a sparse event type.
    pub fn channel(self) -> Option<usize> {
        match self {
            Self::Fluid => Some(1),
            Self::Motion => Some(2),
            Self::Instrument => Some(3),
            Self::Lighting | Self::PhaseOrder => None,
        }
    }

    /// Attribute words; for sparse types the index is the lit quadrant.
    pub fn attributes(self) -> &'static [&'static str] {
        match self {
            Self::Fluid => &["blood", "water", "bile", "mucus"],
            Self::Motion => &["left", "right", "up", "down"],
            Self::Instrument => &["forceps", "snare", "clip", "needle"],
            Self::Lighting => &["dim", "normal", "bright"],
            Self::PhaseOrder => &["advancing", "withdrawing"],
        }
    }

    pub fn answer(self, attribute: usize) -> String {
        let a = self.attributes()[attribute];
        match self {
            Self::Fluid => format!("{a} is visible"),
            Self::Motion => format!("the scope moves {a}"),
            Self::Instrument => format!("a {a} is used"),
            Self::Lighting => format!("the lighting is {a}"),
            Self::PhaseOrder => format!("the scope is {a}"),
        }
    }

    /// Question phrasings. Templates 0 and 1 are the in-template bank used
    /// for training; 2 and 3 are held-out paraphrases.
    pub fn templates(self) -> [&'static str; 4] {
        match self {
            Self::Fluid => [
                "what fluid is visible in the video?",
                "which fluid appears during the procedure?",
                "can you tell which fluid shows up?",
                "what kind of fluid is seen?",
            ],
            Self::Motion => [
                "which way does the scope move?",
                "in what direction does the scope move?",
                "where does the scope move during the clip?",
                "tell me the direction the scope moves in",
            ],
            Self::Lighting => [
                "how is the lighting in the video?",
                "what is the lighting level?",
                "describe the lighting of the scene",
                "is the lighting dim normal or bright?",
            ],
            Self::Instrument => [
                "which instrument is used?",
                "what instrument appears in the video?",
                "can you name the instrument that is used?",
                "which tool or instrument shows up?",
            ],
            Self::PhaseOrder => [
                "is the scope advancing or withdrawing after the transition?",
                "after the transition is the scope advancing or withdrawing?",
                "does the scope advance or withdraw once the transition happens?",
                "following the transition does the scope advance or withdraw?",
            ],
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuestionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| Error::Label(format!("unknown question type `{s}`")))
    }
}

/// Sampling policy that best exposes the evidence for a question type.
pub fn derive_policy_label(qtype: QuestionType) -> SamplingPolicy {
    match qtype {
        QuestionType::Fluid | QuestionType::Motion => SamplingPolicy::Gaussian,
        QuestionType::Lighting => SamplingPolicy::Uniform,
        QuestionType::Instrument => SamplingPolicy::Dense,
        QuestionType::PhaseOrder => SamplingPolicy::UShape,
    }
}

/// Parses a type name and returns its label.
pub fn derive_policy_label_str(qtype: &str) -> Result<SamplingPolicy> {
    Ok(derive_policy_label(qtype.parse()?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Self::Train, Self::Val, Self::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateSplit {
    In,
    Out,
}

impl TemplateSplit {
    pub fn name(self) -> &'static str {
        match self {
            Self::In => "in-template",
            Self::Out => "out-of-template",
        }
    }

    pub fn of_template(template: usize) -> Self {
        if template < 2 {
            Self::In
        } else {
            Self::Out
        }
    }
}

impl FromStr for TemplateSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-template" => Ok(Self::In),
            "out-of-template" => Ok(Self::Out),
            _ => Err(Error::Format(format!("unknown template split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaInstance {
    pub id: String,
    pub video: String,
    pub qtype: QuestionType,
    pub question: String,
    pub answer: String,
    pub keywords: Vec<String>,
    /// Ground-truth frame intervals, 1-based inclusive.
    pub intervals: Vec<(usize, usize)>,
    pub policy: SamplingPolicy,
    pub template: usize,
    pub template_split: TemplateSplit,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub episodes_per_video: usize,
    pub episode_frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub event_min_frames: usize,
    pub event_max_frames: usize,
    /// Probability that a val/test question uses a held-out paraphrase.
    pub out_of_template_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_videos: 400,
            val_videos: 40,
            test_videos: 80,
            episodes_per_video: 2,
            episode_frames: 68,
            height: 8,
            width: 8,
            fps: 4.0,
            amplitude: 1.0,
            noise: 0.1,
            event_min_frames: 2,
            event_max_frames: 4,
            out_of_template_rate: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn video_frames(&self) -> usize {
        self.episodes_per_video * self.episode_frames
    }

    pub fn videos(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_videos,
            Split::Val => self.val_videos,
            Split::Test => self.test_videos,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_videos + self.val_videos + self.test_videos == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return bad(format!(
                "frame size {}×{} must be a positive multiple of 4",
                self.height, self.width
            ));
        }
        if self.episodes_per_video == 0 || !self.episode_frames.is_multiple_of(2) {
            return bad(format!(
                "{} episodes of {} frames: need at least one episode with an even frame count",
                self.episodes_per_video, self.episode_frames
            ));
        }
        if self.event_min_frames == 0 || self.event_min_frames > self.event_max_frames {
            return bad(format!(
                "event length range {}..={} is empty",
                self.event_min_frames, self.event_max_frames
            ));
        }
        let per_episode = QuestionType::SPARSE.len().div_ceil(self.episodes_per_video);
        if self.episode_frames < 4 * (per_episode * (self.event_max_frames + 2) + 4) {
            return bad(format!(
                "episodes of {} frames are too short for their events",
                self.episode_frames
            ));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.amplitude > 0.0) || !(self.noise >= 0.0) {
            return bad("amplitude must be positive and noise non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.out_of_template_rate) {
            return bad(format!(
                "out_of_template_rate {} outside [0, 1]",
                self.out_of_template_rate
            ));
        }
        Ok(())
    }
}

/// A sparse event inside an episode or stitched video (1-based, inclusive).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub qtype: QuestionType,
    pub start: usize,
    pub end: usize,
    pub attribute: usize,
}

/// Per-episode rendering parameters decided at the video level.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub event_min_frames: usize,
    pub event_max_frames: usize,
    /// Index into the lighting attributes.
    pub lighting: usize,
    pub event_types: Vec<QuestionType>,
    /// Depth level before and after the marker, and the marker's first frame
    /// when the transition falls in this episode.
    pub depth_before: f64,
    pub depth_after: f64,
    pub marker: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub video: VideoTensor,
    pub events: Vec<Event>,
    pub lighting: usize,
    pub marker: Option<usize>,
}

impl Episode {
    /// Fraction of frames covered by sparse events.
    pub fn event_occupancy(&self) -> f64 {
        let n: usize = self.events.iter().map(|e| e.end - e.start + 1).sum();
        n as f64 / self.video.num_frames() as f64
    }
}

fn lighting_offset(level: usize) -> f64 {
    (level as f64 - 1.0) * LIGHTING_OFFSET
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn generate_episode(seed: u64, spec: &EpisodeSpec) -> Result<Episode> {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    if t == 0 || h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("invalid episode dims {t}×{h}×{w}")));
    }
    if spec.lighting >= QuestionType::Lighting.attributes().len() {
        return Err(Error::Config(format!("lighting level {} out of range", spec.lighting)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // frames kept free of events: the marker pair and one frame around it
    let mut busy = vec![false; t + 2];
    if let Some(m) = spec.marker {
        if m == 0 || m + 1 > t {
            return Err(Error::Config(format!("marker frame {m} outside 1..{t}")));
        }
        busy[m.saturating_sub(1)..=(m + 2).min(t)].fill(true);
    }
    let mut events = Vec::with_capacity(spec.event_types.len());
    for &qtype in &spec.event_types {
        if !qtype.is_sparse() {
            return Err(Error::Config(format!("{qtype} is not an event type")));
        }
        let len = rng.random_range(spec.event_min_frames..=spec.event_max_frames);
        if len + 2 > t {
            return Err(Error::Config(format!("event of {len} frames does not fit {t} frames")));
        }
        let attribute = rng.random_range(0..qtype.attributes().len());
        let mut placed = None;
        for _ in 0..1000 {
            let start = rng.random_range(2..=t - len);
            // one free frame on each side keeps events apart
            if (start - 1..=start + len).all(|f| !busy[f]) {
                placed = Some(start);
                break;
            }
        }
        let start = placed.ok_or_else(|| Error::Config("could not place events; episode too short".into()))?;
        busy[start..start + len].fill(true);
        events.push(Event {
            qtype,
            start,
            end: start + len - 1,
            attribute,
        });
    }
    events.sort_by_key(|e| e.start);

    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let plane = h * w;
    let mut data = vec![0.0; NUM_CHANNELS * t * plane];
    let offset = lighting_offset(spec.lighting);
    for c in 0..NUM_CHANNELS {
        for f in 0..t {
            let frame = f + 1;
            let mut base = offset;
            if c == DEPTH_CHANNEL {
                let after = spec.marker.is_some_and(|m| frame >= m + 2);
                base += if after { spec.depth_after } else { spec.depth_before };
            }
            if c == MARKER_CHANNEL && spec.marker.is_some_and(|m| frame == m || frame == m + 1) {
                base += spec.amplitude;
            }
            let off = (c * t + f) * plane;
            for px in 0..plane {
                data[off + px] = base + noise.sample(&mut rng);
            }
        }
    }
    for e in &events {
        let c = e.qtype.channel().expect("sparse type");
        let (qy, qx) = (e.attribute / 2, e.attribute % 2);
        for f in e.start - 1..e.end {
            for y in qy * h / 2..(qy + 1) * h / 2 {
                for x in qx * w / 2..(qx + 1) * w / 2 {
                    data[((c * t + f) * h + y) * w + x] += spec.amplitude;
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = round_f32(*v));
    Ok(Episode {
        video: VideoTensor::new(Tensor::new(vec![NUM_CHANNELS, t, h, w], data)?, spec.fps)?,
        events,
        lighting: spec.lighting,
        marker: spec.marker,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StitchedVideo {
    pub video: VideoTensor,
    /// Events with frame indices shifted into the stitched timeline.
    pub events: Vec<Event>,
    pub lighting: usize,
    pub marker: Option<usize>,
}

pub fn stitch_episodes(episodes: &[Episode]) -> Result<StitchedVideo> {
    let first = episodes.first().ok_or(Error::EmptyInput)?;
    let video = VideoTensor::concat(&episodes.iter().map(|e| e.video.clone()).collect::<Vec<_>>())?;
    let mut events = Vec::new();
    let mut marker = None;
    let mut offset = 0;
    for ep in episodes {
        events.extend(ep.events.iter().map(|e| Event {
            start: e.start + offset,
            end: e.end + offset,
            ..e.clone()
        }));
        if let Some(m) = ep.marker {
            marker = Some(m + offset);
        }
        offset += ep.video.num_frames();
    }
    Ok(StitchedVideo {
        video,
        events,
        lighting: first.lighting,
        marker,
    })
}

/// Everything a video and its questions are derived from.
#[derive(Clone, Debug)]
struct VideoPlan {
    episodes: Vec<(u64, EpisodeSpec)>,
    advancing: bool,
    marker: usize,
}

fn mix_seed(seed: u64, split: Split, index: usize) -> u64 {
    // SplitMix64 finalizer over (seed, split, index)
    let mut z = seed
        .wrapping_add((split as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn plan_video(cfg: &SynthConfig, seed: u64) -> VideoPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lighting = rng.random_range(0..3);
    let advancing = rng.random_bool(0.5);
    let total = cfg.video_frames();
    let marker = rng.random_range(total / 4..=3 * total / 4);
    let mut types = QuestionType::SPARSE.to_vec();
    types.shuffle(&mut rng);
    let (before, after) = if advancing {
        (-DEPTH_LEVEL, DEPTH_LEVEL)
    } else {
        (DEPTH_LEVEL, -DEPTH_LEVEL)
    };
    let episodes = (0..cfg.episodes_per_video)
        .map(|e| {
            let start = e * cfg.episode_frames;
            let end = start + cfg.episode_frames;
            let local_marker = (marker > start && marker <= end).then(|| marker - start);
            // keep both marker frames inside one episode
            let local_marker = local_marker.map(|m| m.min(cfg.episode_frames - 1));
            let (b, a) = if marker <= start {
                (after, after)
            } else if local_marker.is_some() {
                (before, after)
            } else {
                (before, before)
            };
            let spec = EpisodeSpec {
                frames: cfg.episode_frames,
                height: cfg.height,
                width: cfg.width,
                fps: cfg.fps,
                amplitude: cfg.amplitude,
                noise: cfg.noise,
                event_min_frames: cfg.event_min_frames,
                event_max_frames: cfg.event_max_frames,
                lighting,
                event_types: types
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i % cfg.episodes_per_video == e)
                    .map(|(_, t)| *t)
                    .collect(),
                depth_before: b,
                depth_after: a,
                marker: local_marker,
            };
            (rng.random(), spec)
        })
        .collect();
    let marker = {
        let e = (marker - 1) / cfg.episode_frames;
        let local = (marker - e * cfg.episode_frames).min(cfg.episode_frames - 1);
        e * cfg.episode_frames + local
    };
    VideoPlan {
        episodes,
        advancing,
        marker,
    }
}

fn render_plan(plan: &VideoPlan) -> Result<StitchedVideo> {
    let episodes = plan
        .episodes
        .iter()
        .map(|(s, spec)| generate_episode(*s, spec))
        .collect::<Result<Vec<_>>>()?;
    stitch_episodes(&episodes)
}

/// Generates the stitched video `index` of `split`.
pub fn generate_video(cfg: &SynthConfig, split: Split, index: usize) -> Result<StitchedVideo> {
    render_plan(&plan_video(cfg, mix_seed(cfg.seed, split, index)))
}

/// Video `index` of `split` together with its questions.
pub fn generate_with_questions(
    cfg: &SynthConfig,
    split: Split,
    index: usize,
) -> Result<(StitchedVideo, Vec<QaInstance>)> {
    let plan = plan_video(cfg, mix_seed(cfg.seed, split, index));
    let stitched = render_plan(&plan)?;
    let qas = questions_for(cfg, &stitched, &plan, split, index);
    Ok((stitched, qas))
}

pub fn video_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.name())
}

fn parse_video_id(id: &str) -> Result<(Split, usize)> {
    let (s, i) = id
        .rsplit_once('-')
        .ok_or_else(|| Error::Format(format!("bad video id `{id}`")))?;
    let idx = i.parse().map_err(|_| Error::Format(format!("bad video id `{id}`")))?;
    Ok((s.parse()?, idx))
}

/// Questions for one stitched video, one per question type.
fn questions_for(
    cfg: &SynthConfig,
    stitched: &StitchedVideo,
    plan: &VideoPlan,
    split: Split,
    index: usize,
) -> Vec<QaInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x5151, split, index));
    let total = stitched.video.num_frames();
    let vid = video_id(split, index);
    QuestionType::ALL
        .iter()
        .enumerate()
        .map(|(n, &qtype)| {
            let (attribute, intervals) = match qtype {
                QuestionType::Lighting => (stitched.lighting, vec![(1, total)]),
                QuestionType::PhaseOrder => {
                    let m = plan.marker;
                    let iv = (m.saturating_sub(PHASE_MARGIN).max(1), (m + 1 + PHASE_MARGIN).min(total));
                    (usize::from(!plan.advancing), vec![iv])
                }
                _ => {
                    let e = stitched
                        .events
                        .iter()
                        .find(|e| e.qtype == qtype)
                        .expect("every sparse type is placed once");
                    (e.attribute, vec![(e.start, e.end)])
                }
            };
            let out = split != Split::Train && rng.random_bool(cfg.out_of_template_rate);
            let template = if out { 2 } else { 0 } + rng.random_range(0..2);
            QaInstance {
                id: format!("{vid}-q{n}"),
                video: vid.clone(),
                qtype,
                question: qtype.templates()[template].to_string(),
                answer: qtype.answer(attribute),
                keywords: vec![qtype.attributes()[attribute].to_string()],
                intervals,
                policy: derive_policy_label(qtype),
                template,
                template_split: TemplateSplit::of_template(template),
                split,
            }
        })
        .collect()
}

/// Every phrase the generator can emit, for building the vocabulary.
pub fn phrase_bank() -> Vec<String> {
    let mut out = Vec::new();
    for q in QuestionType::ALL {
        out.extend(q.templates().iter().map(|s| s.to_string()));
        out.extend((0..q.attributes().len()).map(|a| q.answer(a)));
    }
    out
}

pub fn build_tokenizer() -> Result<Tokenizer> {
    let bank = phrase_bank();
    Tokenizer::from_texts(bank.iter().map(String::as_str))
}

#[derive(Clone, Debug)]
enum VideoStore {
    Generated,
    Dir(PathBuf),
}

/// Question set plus access to the videos, which are regenerated from their
/// seeds or read from a dataset directory on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: SynthConfig,
    pub qas: Vec<QaInstance>,
    pub tokenizer: Tokenizer,
    store: VideoStore,
}

impl Dataset {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut qas = Vec::new();
        for split in Split::ALL {
            for i in 0..cfg.videos(split) {
                qas.extend(generate_with_questions(cfg, split, i)?.1);
            }
        }
        qas.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self {
            config: cfg.clone(),
            qas,
            tokenizer: build_tokenizer()?,
            store: VideoStore::Generated,
        })
    }

    pub(crate) fn from_parts(config: SynthConfig, qas: Vec<QaInstance>, tokenizer: Tokenizer, dir: PathBuf) -> Self {
        Self {
            config,
            qas,
            tokenizer,
            store: VideoStore::Dir(dir),
        }
    }

    pub fn video(&self, id: &str) -> Result<VideoTensor> {
        match &self.store {
            VideoStore::Generated => {
                let (split, index) = parse_video_id(id)?;
                Ok(generate_video(&self.config, split, index)?.video)
            }
            VideoStore::Dir(dir) => VideoTensor::load(&dir.join("videos").join(format!("{id}.bin"))),
        }
    }

    pub fn split(&self, split: Split) -> Vec<&QaInstance> {
        self.qas.iter().filter(|q| q.split == split).collect()
    }

    /// Video ids of a split, in order.
    pub fn video_ids(&self, split: Split) -> Vec<String> {
        (0..self.config.videos(split)).map(|i| video_id(split, i)).collect()
    }

    pub fn template_ids(&self, split: Split, ts: TemplateSplit) -> BTreeMap<QuestionType, Vec<usize>> {
        let mut out: BTreeMap<QuestionType, Vec<usize>> = BTreeMap::new();
        for q in self.split(split).into_iter().filter(|q| q.template_split == ts) {
            let e = out.entry(q.qtype).or_default();
            if !e.contains(&q.template) {
                e.push(q.template);
            }
        }
        out.values_mut().for_each(|v| v.sort_unstable());
        out
    }
}
