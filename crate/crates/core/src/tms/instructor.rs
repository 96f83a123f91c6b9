use rand::Rng;

use super::{SamplingPolicy, TemporalWindow};
use crate::error::{Error, Result};
use crate::ndcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::video::VideoTensor;

pub const NUM_FEATURES: usize = 3;

/// Window statistics: length relative to the video, temporal variance of the
/// per-frame mean intensity inside the window, and the anchor's relative
/// position within the window.
pub fn window_features(win: &TemporalWindow, frames: &VideoTensor) -> Result<[f64; NUM_FEATURES]> {
    let t = frames.num_frames();
    if win.lo == 0 || win.hi > t || win.lo > win.hi {
        return Err(Error::Feature(format!(
            "window {}..={} outside {t} frames",
            win.lo, win.hi
        )));
    }
    let means: Vec<f64> = win.frames().map(|f| frames.frame_mean(f - 1)).collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / means.len() as f64;
    let offset = (win.anchor - win.lo) as f64 / win.len() as f64;
    Ok([win.len() as f64 / t as f64, var, offset])
}

#[derive(Clone, Debug)]
pub struct Instruction {
    pub policy: SamplingPolicy,
    pub probs: [f64; SamplingPolicy::COUNT],
    pub logits: Var,
    /// Cross-entropy against the supplied label, if any.
    pub loss: Option<Var>,
}

/// Two-layer classifier over the sampling policies from a bag-of-words
/// question embedding and window statistics. Its inputs carry no gradient
/// path into the visual encoder.
#[derive(Clone, Debug)]
pub struct PolicyInstructor {
    emb: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl PolicyInstructor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        emb_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let d_in = emb_dim + NUM_FEATURES;
        Self {
            emb: store.add(format!("{prefix}.emb"), Tensor::randn(&[vocab, emb_dim], 0.3, rng)),
            w1: store.add(
                format!("{prefix}.w1"),
                Tensor::randn(&[d_in, hidden], (1.0 / d_in as f64).sqrt(), rng),
            ),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(
                format!("{prefix}.w2"),
                Tensor::randn(&[hidden, SamplingPolicy::COUNT], (1.0 / hidden as f64).sqrt(), rng),
            ),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[SamplingPolicy::COUNT])),
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{prefix}.{n}`")))
        };
        Ok(Self {
            emb: get("emb")?,
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    pub fn params(&self) -> [ParamId; 5] {
        [self.emb, self.w1, self.b1, self.w2, self.b2]
    }

    /// 1 × K policy logits.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        question: &[u32],
        features: &[f64; NUM_FEATURES],
    ) -> Result<Var> {
        if question.is_empty() {
            return Err(Error::Feature("question has no tokens".into()));
        }
        let e = tape.param(store, self.emb);
        let ids: Vec<usize> = question.iter().map(|&i| i as usize).collect();
        let words = tape.gather_rows(e, &ids)?;
        let bow = tape.mean_rows(words)?;
        let f = tape.input(Tensor::row(features.to_vec()));
        let x = tape.concat_cols(&[bow, f])?;
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let h = tape.linear(x, w1, b1)?;
        let h = tape.silu(h);
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        tape.linear(h, w2, b2)
    }

    pub fn instruct(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        win: &TemporalWindow,
        question: &[u32],
        frames: &VideoTensor,
        label: Option<SamplingPolicy>,
    ) -> Result<Instruction> {
        let feats = window_features(win, frames)?;
        let logits = self.logits(tape, store, question, &feats)?;
        let p = tape.softmax_rows(logits)?;
        let mut probs = [0.0; SamplingPolicy::COUNT];
        probs.copy_from_slice(tape.value(p).data());
        let loss = match label {
            Some(l) => Some(tape.softmax_cross_entropy(logits, &[l.index()])?),
            None => None,
        };
        Ok(Instruction {
            policy: argmax_policy(tape.value(logits).data()),
            probs,
            logits,
            loss,
        })
    }
}

/// Highest-scoring policy, ties toward the lower index.
pub(crate) fn argmax_policy(scores: &[f64]) -> SamplingPolicy {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    SamplingPolicy::ALL[best]
}
