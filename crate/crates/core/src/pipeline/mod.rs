//! End-to-end model: consolidation encoder, retrieval head, policy
//! instructor, learned grounder and answerer sharing one parameter store,
//! with training, inference and checkpoints.

mod train;

pub use train::{scheduled_lr, train, train_grounder, TrainLogRow, TrainReport, Trainer};

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::answerer::Answerer;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ftc::{interleave_plain, interleave_timestamps, Consolidator, InterleavedSequence, RetrievalHead};
use crate::metrics::{score_instance, EvalReport};
use crate::ndcore::{ParamStore, Tape};
use crate::synthbench::{oracle_answer, Dataset, QaInstance, QuestionType, Split};
use crate::tms::{
    build_windows, global_uniform, ground_noisy, ground_oracle, interval_center, resample, Grounder, GrounderMode,
    PolicyInstructor, SamplingPolicy, TemporalWindow,
};
use crate::tokenizer::Tokenizer;
use crate::video::VideoTensor;

const ENCODER: &str = "enc";
const RETRIEVER: &str = "ret";
const INSTRUCTOR: &str = "pi";
const GROUNDER: &str = "ground";
const ANSWERER: &str = "qa";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub encoder: Consolidator,
    pub retriever: RetrievalHead,
    pub instructor: PolicyInstructor,
    pub grounder: Grounder,
    pub answerer: Answerer,
    /// Configuration the model was built from; fixes its architecture.
    pub config: RunConfig,
}

/// Frames chosen for one question and how they were chosen.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// 1-based frames, padded to a multiple of the encoder's p_t.
    pub frames: Vec<usize>,
    pub windows: Vec<TemporalWindow>,
    pub policies: Vec<SamplingPolicy>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub answer: String,
    pub selection: Selection,
}

fn qa_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a over the instance id, mixed with the run seed
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64 ^ seed, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

impl Model {
    pub fn new(cfg: &RunConfig, tokenizer: Tokenizer, in_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let enc = cfg.encoder_config();
        let v = tokenizer.len();
        let encoder = Consolidator::new(&mut store, ENCODER, in_channels, &enc, &mut rng)?;
        let retriever = RetrievalHead::new(
            &mut store,
            RETRIEVER,
            enc.embed_dim,
            enc.retriever_hidden,
            enc.channels[0],
            &mut rng,
        );
        let instructor = PolicyInstructor::new(
            &mut store,
            INSTRUCTOR,
            v,
            cfg.tms.instructor_dim,
            cfg.tms.instructor_hidden,
            &mut rng,
        );
        let grounder = Grounder::new(&mut store, GROUNDER, v, enc.embed_dim, cfg.tms.top_m, &mut rng);
        let answerer = Answerer::new(&mut store, ANSWERER, &cfg.answerer, v, enc.embed_dim, &mut rng)?;
        Ok(Self {
            store,
            tokenizer,
            encoder,
            retriever,
            instructor,
            grounder,
            answerer,
            config: cfg.clone(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn uses_timestamps(&self) -> bool {
        self.config.toggles.ftc
    }

    /// Fails with a vocabulary error when `tok` differs from the model's.
    pub fn check_vocab(&self, tok: &Tokenizer) -> Result<()> {
        if tok.words() != self.tokenizer.words() {
            let first = tok
                .words()
                .iter()
                .zip(self.tokenizer.words())
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.clone())
                .unwrap_or_else(|| format!("vocabulary of {} words", tok.len()));
            return Err(Error::Vocab(format!(
                "dataset vocabulary differs from the checkpoint at `{first}`"
            )));
        }
        Ok(())
    }

    /// Encodes a clip and lays it out as the answerer's input sequence.
    pub fn sequence(
        &self,
        tape: &mut Tape,
        clip: &VideoTensor,
    ) -> Result<(crate::ftc::ConsolidatedRep, InterleavedSequence)> {
        let rep = self.encoder.encode(clip, &self.store, tape)?;
        let seq = if self.uses_timestamps() {
            interleave_timestamps(&rep, clip.fps(), &self.tokenizer)?
        } else {
            interleave_plain(&rep)?
        };
        Ok((rep, seq))
    }

    /// Windows around the grounded intervals, or none when grounding is off.
    pub fn ground(
        &self,
        cfg: &RunConfig,
        qa: &QaInstance,
        video: &VideoTensor,
        question: &[u32],
    ) -> Result<Vec<TemporalWindow>> {
        if !cfg.toggles.tg || cfg.tms.grounder == GrounderMode::None {
            return Ok(Vec::new());
        }
        let t = video.num_frames();
        let g = match cfg.tms.grounder {
            GrounderMode::Oracle => ground_oracle(&qa.intervals, t)?,
            GrounderMode::NoisyOracle => {
                let mut rng = ChaCha8Rng::seed_from_u64(qa_seed(cfg.seed, &qa.id));
                ground_noisy(&qa.intervals, t, cfg.tms.noise_delta, &mut rng)?
            }
            GrounderMode::Learned => {
                let mut tape = Tape::new();
                let full = video.truncate_to_divisible(self.encoder.config().p_t, self.encoder.config().p_s)?;
                let (_, seq) = self.sequence(&mut tape, &full)?;
                self.grounder
                    .ground(&mut tape, &self.store, &seq, question, &self.tokenizer)?
            }
            GrounderMode::None => unreachable!(),
        };
        build_windows(&g.anchors, cfg.tms.window, t)
    }

    /// Chooses the clip for a question at inference time.
    pub fn select(&self, cfg: &RunConfig, qa: &QaInstance, video: &VideoTensor) -> Result<Selection> {
        let question = self.tokenizer.encode(&qa.question)?;
        let t = video.num_frames();
        let p_t = self.encoder.config().p_t;
        let windows = self.ground(cfg, qa, video, &question)?;
        if windows.is_empty() {
            let mut frames = global_uniform(t, cfg.tms.budget)?;
            let last = *frames.last().expect("budget ≥ 1");
            while frames.len() % p_t != 0 {
                frames.push(last);
            }
            return Ok(Selection {
                frames,
                windows,
                policies: Vec::new(),
            });
        }
        let policies = match cfg.fixed_policy() {
            Some(p) => vec![p; windows.len()],
            None => windows
                .iter()
                .map(|w| {
                    let mut tape = Tape::new();
                    Ok(self
                        .instructor
                        .instruct(&mut tape, &self.store, w, &question, video, None)?
                        .policy)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let rs = resample(t, &windows, &policies, cfg.tms.budget)?;
        Ok(Selection {
            frames: rs.padded_frames(p_t),
            windows,
            policies,
        })
    }

    /// Full inference for one question.
    pub fn predict(&self, cfg: &RunConfig, qa: &QaInstance, video: &VideoTensor) -> Result<Prediction> {
        let selection = self.select(cfg, qa, video)?;
        let clip = video.select(&selection.frames)?;
        let mut tape = Tape::new();
        let (_, seq) = self.sequence(&mut tape, &clip)?;
        let question = self.tokenizer.encode(&qa.question)?;
        let answer = self
            .answerer
            .answer(&self.store, &seq, &mut tape, &question, &self.tokenizer)?;
        Ok(Prediction {
            id: qa.id.clone(),
            answer,
            selection,
        })
    }

    /// Writes `params.ndck`, `vocab.txt`, `config.txt` and `meta.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.store.save(&dir.join("params.ndck"))?;
        self.tokenizer.save(&dir.join("vocab.txt"))?;
        std::fs::write(dir.join("config.txt"), self.config.to_text())?;
        let meta = format!(
            "format={CHECKPOINT_FORMAT}\nin_channels={}\ngrounder_trained={}\nparams={}\n",
            self.encoder.in_channels(),
            self.grounder.trained,
            self.num_params()
        );
        std::fs::write(dir.join("meta.txt"), meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = crate::synthbench::parse_kv(&std::fs::read_to_string(dir.join("meta.txt"))?, "meta.txt")?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Format(format!("meta.txt lacks `{k}`")))
        };
        let format: u32 = get("format")?
            .parse()
            .map_err(|_| Error::Format("bad checkpoint format".into()))?;
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format {format}")));
        }
        let in_channels: usize = get("in_channels")?
            .parse()
            .map_err(|_| Error::Format("bad in_channels".into()))?;
        let trained = get("grounder_trained")? == "true";
        let config = RunConfig::parse(&std::fs::read_to_string(dir.join("config.txt"))?)?;
        let tokenizer = Tokenizer::load(&dir.join("vocab.txt"))?;
        let mut model = Self::new(&config, tokenizer, in_channels)?;
        let saved = ParamStore::load(&dir.join("params.ndck"))?;
        let copied = model.store.copy_matching(&saved)?;
        if copied != model.store.len() || saved.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                saved.len(),
                model.store.len()
            )));
        }
        model.grounder.trained = trained;
        Ok(model)
    }
}

/// Runs `f` over `items` on all available cores; results keep item order.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Predictions for `qas`, computed in parallel.
pub fn predict_all(model: &Model, cfg: &RunConfig, ds: &Dataset, qas: &[&QaInstance]) -> Result<Vec<Prediction>> {
    model.check_vocab(&ds.tokenizer)?;
    par_map(qas, |qa| model.predict(cfg, qa, &ds.video(&qa.video)?))
        .into_iter()
        .collect()
}

/// Answers read off the full video by the generator's pixel rule.
pub fn oracle_predictions(ds: &Dataset, qas: &[&QaInstance]) -> Result<HashMap<String, String>> {
    qas.iter()
        .map(|qa| {
            let v = ds.video(&qa.video)?;
            Ok((qa.id.clone(), oracle_answer(&v, qa.qtype, ds.config.amplitude)?))
        })
        .collect()
}

/// Scores predictions by id; a missing id counts as an empty answer.
pub fn evaluate(preds: &HashMap<String, String>, qas: &[&QaInstance]) -> Result<EvalReport> {
    if qas.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scores = qas
        .iter()
        .map(|qa| {
            let p = preds.get(&qa.id).map_or("", String::as_str);
            score_instance(&qa.id, qa.template_split, p, &qa.answer, &qa.keywords)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(scores))
}

/// Most frequent training answer per question type (ties to the smaller
/// string).
pub fn majority_answers(ds: &Dataset) -> HashMap<QuestionType, String> {
    let mut counts: HashMap<QuestionType, HashMap<&str, usize>> = HashMap::new();
    for q in ds.split(Split::Train) {
        *counts.entry(q.qtype).or_default().entry(&q.answer).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(t, c)| {
            let best = c
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
                .map(|(a, _)| a.to_string())
                .unwrap_or_default();
            (t, best)
        })
        .collect()
}

/// Target unit of a grounding example: the unit holding the interval center.
pub(crate) fn target_unit(qa: &QaInstance, p_t: usize, n_units: usize) -> usize {
    let (s, e) = qa.intervals[0];
    ((interval_center(s, e) - 1) / p_t).min(n_units - 1)
}

pub(crate) fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
