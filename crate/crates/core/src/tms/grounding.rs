use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ftc::{parse_timestamps, InterleavedSequence};
use crate::ndcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::Tokenizer;

/// Center of the inclusive interval `[s, e]`, rounded half up.
pub fn interval_center(s: usize, e: usize) -> usize {
    (s + e).div_ceil(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroundingSource {
    Oracle,
    NoisyOracle,
    Learned,
}

/// How questions are grounded; `None` skips grounding (global sampling).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrounderMode {
    None,
    Oracle,
    NoisyOracle,
    Learned,
}

impl GrounderMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Oracle => "oracle",
            Self::NoisyOracle => "noisy",
            Self::Learned => "learned",
        }
    }
}

impl fmt::Display for GrounderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GrounderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::None, Self::Oracle, Self::NoisyOracle, Self::Learned]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown grounder mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundingResult {
    pub anchors: Vec<usize>,
    pub intervals: Vec<(usize, usize)>,
    pub source: GroundingSource,
}

impl GroundingResult {
    fn from_intervals(intervals: Vec<(usize, usize)>, source: GroundingSource) -> Self {
        Self {
            anchors: intervals.iter().map(|&(s, e)| interval_center(s, e)).collect(),
            intervals,
            source,
        }
    }
}

fn check_intervals(intervals: &[(usize, usize)], num_frames: usize) -> Result<()> {
    for &(s, e) in intervals {
        if s == 0 || s > e || e > num_frames {
            return Err(Error::Config(format!("interval ({s}, {e}) outside 1..={num_frames}")));
        }
    }
    Ok(())
}

pub fn ground_oracle(intervals: &[(usize, usize)], num_frames: usize) -> Result<GroundingResult> {
    check_intervals(intervals, num_frames)?;
    Ok(GroundingResult::from_intervals(
        intervals.to_vec(),
        GroundingSource::Oracle,
    ))
}

/// Each endpoint moved by an independent uniform integer offset in
/// `[-delta, delta]`, clamped to the video and kept ordered.
pub fn ground_noisy<R: Rng + ?Sized>(
    intervals: &[(usize, usize)],
    num_frames: usize,
    delta: usize,
    rng: &mut R,
) -> Result<GroundingResult> {
    check_intervals(intervals, num_frames)?;
    let d = delta as i64;
    let mut jitter = |x: usize| {
        let off = if d == 0 { 0 } else { rng.random_range(-d..=d) };
        (x as i64 + off).clamp(1, num_frames as i64) as usize
    };
    let noisy = intervals
        .iter()
        .map(|&(s, e)| {
            let (a, b) = (jitter(s), jitter(e));
            (a.min(b), a.max(b))
        })
        .collect();
    Ok(GroundingResult::from_intervals(noisy, GroundingSource::NoisyOracle))
}

/// Scores each temporal unit by the dot product of a mean question-word
/// embedding with the unit's mean visual token; the top units, merged when
/// adjacent, become the grounded intervals.
#[derive(Clone, Debug)]
pub struct Grounder {
    emb: ParamId,
    dim: usize,
    pub top_m: usize,
    pub trained: bool,
}

impl Grounder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        dim: usize,
        top_m: usize,
        rng: &mut R,
    ) -> Self {
        let emb = store.add(format!("{prefix}.emb"), Tensor::randn(&[vocab, dim], 0.1, rng));
        Self {
            emb,
            dim,
            top_m,
            trained: false,
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str, top_m: usize, trained: bool) -> Result<Self> {
        let emb = store
            .id(&format!("{prefix}.emb"))
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{prefix}.emb`")))?;
        Ok(Self {
            emb,
            dim: store.value(emb).shape()[1],
            top_m,
            trained,
        })
    }

    pub fn params(&self) -> [ParamId; 1] {
        [self.emb]
    }

    /// Unit scores as a 1 × N' row. Visual tokens are detached.
    pub fn unit_scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &InterleavedSequence,
        question: &[u32],
    ) -> Result<Var> {
        if question.is_empty() {
            return Err(Error::Feature("question has no tokens".into()));
        }
        let (n, d) = tape.value(seq.visual).dims2()?;
        if d != self.dim {
            return Err(Error::shape(format!("grounder dim {} vs token dim {d}", self.dim)));
        }
        let n_units = seq.n_units();
        if n_units == 0 {
            return Err(Error::EmptySequence);
        }
        let tokens = tape.detach(seq.visual);
        let mut avg = vec![0.0; n_units * n];
        for (u, span) in seq.units.iter().enumerate() {
            let rows: Vec<usize> = seq.items[span.visual.clone()]
                .iter()
                .filter_map(|i| match i {
                    crate::ftc::SeqItem::Visual(r) => Some(*r),
                    crate::ftc::SeqItem::Text(_) => None,
                })
                .collect();
            for &r in &rows {
                avg[u * n + r] = 1.0 / rows.len() as f64;
            }
        }
        let avg = tape.input(Tensor::new(vec![n_units, n], avg)?);
        let unit_means = tape.matmul(avg, tokens)?;
        let e = tape.param(store, self.emb);
        let ids: Vec<usize> = question.iter().map(|&i| i as usize).collect();
        let words = tape.gather_rows(e, &ids)?;
        let q = tape.mean_rows(words)?;
        let qt = tape.transpose(q)?;
        let s = tape.matmul(unit_means, qt)?;
        tape.transpose(s)
    }

    /// Softmax cross-entropy of the unit scores against `target_unit`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &InterleavedSequence,
        question: &[u32],
        target_unit: usize,
    ) -> Result<Var> {
        let s = self.unit_scores(tape, store, seq, question)?;
        tape.softmax_cross_entropy(s, &[target_unit])
    }

    pub fn ground(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &InterleavedSequence,
        question: &[u32],
        tok: &Tokenizer,
    ) -> Result<GroundingResult> {
        if !self.trained {
            return Err(Error::UntrainedGrounder);
        }
        if seq.units.iter().any(|u| !u.timestamp.is_empty()) {
            // the sequence must be readable before its units are trusted
            parse_timestamps(seq, tok)?;
        }
        let s = self.unit_scores(tape, store, seq, question)?;
        let scores = tape.value(s).data().to_vec();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut top: Vec<usize> = order.into_iter().take(self.top_m.max(1)).collect();
        top.sort_unstable();
        let mut intervals = Vec::new();
        let mut run_start = top[0];
        let mut prev = top[0];
        let frames =
            |first: usize, last: usize| (seq.unit_start_frames[first] + 1, seq.unit_start_frames[last] + seq.p_t);
        for &u in &top[1..] {
            if u != prev + 1 {
                intervals.push(frames(run_start, prev));
                run_start = u;
            }
            prev = u;
        }
        intervals.push(frames(run_start, prev));
        Ok(GroundingResult::from_intervals(intervals, GroundingSource::Learned))
    }
}
