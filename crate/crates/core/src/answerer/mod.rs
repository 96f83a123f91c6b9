//! Small cross-attention answer decoder and the composite training objective.
//!
//! At decoding step `i` the query state is the bag-of-words question
//! embedding plus the embedding of the previous answer token and a step
//! embedding. It attends over the interleaved sequence, whose rows are token
//! embeddings for text items and projected visual tokens for visual items
//! (with a spatial slot embedding and a first/middle/last unit embedding).
//! An MLP over `[state; context]` gives next-token logits.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ftc::{InterleavedSequence, SeqItem};
use crate::ndcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{Tokenizer, BOS, EOS, PAD, UNK};

#[derive(Clone, Debug, PartialEq)]
pub struct AnswererConfig {
    pub dim: usize,
    pub hidden: usize,
    pub max_len: usize,
    /// Attention heads; `dim` must be a multiple.
    pub heads: usize,
    /// Spatial slot embeddings; must cover the encoder's tokens per unit.
    pub max_slots: usize,
}

impl Default for AnswererConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hidden: 64,
            max_len: 8,
            heads: 4,
            max_slots: 16,
        }
    }
}

impl AnswererConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.max_len == 0 || self.max_slots == 0 || self.heads == 0 {
            return Err(Error::Config(format!("answerer sizes must be positive: {self:?}")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "answerer dim {} is not a multiple of {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ret: f64,
    pub policy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ret: 0.5, policy: 0.5 }
    }
}

impl LossWeights {
    pub fn new(ret: f64, policy: f64) -> Result<Self> {
        let w = Self { ret, policy };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ret >= 0.0 && self.policy >= 0.0 && self.ret.is_finite() && self.policy.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got ({}, {})",
                self.ret, self.policy
            )));
        }
        Ok(())
    }
}

/// `L_QA + λ_ret·L_ret + λ_policy·L_policy` on the tape. A non-finite
/// component is reported by branch name.
pub fn total_loss(tape: &mut Tape, qa: Var, ret: Var, policy: Var, w: LossWeights) -> Result<Var> {
    w.validate()?;
    for (branch, v) in [("qa", qa), ("retrieval", ret), ("policy", policy)] {
        let value = tape.scalar(v);
        if !value.is_finite() {
            return Err(Error::Numeric { branch, value });
        }
    }
    let r = tape.scale(ret, w.ret);
    let p = tape.scale(policy, w.policy);
    let l = tape.add(qa, r)?;
    tape.add(l, p)
}

#[derive(Clone, Debug)]
pub struct Answerer {
    cfg: AnswererConfig,
    vocab: usize,
    visual_dim: usize,
    tok_emb: ParamId,
    vis_w: ParamId,
    vis_b: ParamId,
    slot_emb: ParamId,
    order_emb: ParamId,
    step_emb: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Context rows and the state pieces shared by all decoding steps.
struct Prepared {
    keys: Var,
    values: Var,
    question: Var,
    /// Column-wise maximum of the projected visual rows per spatial slot,
    /// flattened to one 1 × (max_slots · dim) row; unused slots are zero.
    slots: Var,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], (2.0 / (rows + cols) as f64).sqrt(), rng)
}

impl Answerer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AnswererConfig,
        vocab: usize,
        visual_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut add = |n: &str, t: Tensor| store.add(format!("{prefix}.{n}"), t);
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            visual_dim,
            tok_emb: add("tok_emb", Tensor::randn(&[vocab, d], 0.01, rng)),
            vis_w: add("vis_w", glorot(visual_dim, d, rng)),
            vis_b: add("vis_b", Tensor::zeros(&[d])),
            slot_emb: add("slot_emb", Tensor::randn(&[cfg.max_slots, d], 0.1, rng)),
            order_emb: add("order_emb", Tensor::randn(&[3, d], 0.1, rng)),
            step_emb: add("step_emb", Tensor::randn(&[cfg.max_len + 1, d], 0.1, rng)),
            wq: add("wq", glorot(d, d, rng)),
            wk: add("wk", glorot(d, d, rng)),
            wv: add("wv", glorot(d, d, rng)),
            w1: add("w1", glorot((2 + cfg.max_slots) * d, cfg.hidden, rng)),
            b1: add("b1", Tensor::zeros(&[cfg.hidden])),
            w2: add("w2", glorot(cfg.hidden, vocab, rng)),
            b2: add("b2", Tensor::zeros(&[vocab])),
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str, cfg: &AnswererConfig) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{prefix}.{n}`")))
        };
        let tok_emb = get("tok_emb")?;
        let vis_w = get("vis_w")?;
        let shape = |id: ParamId| store.value(id).shape().to_vec();
        if shape(tok_emb)[1] != cfg.dim || shape(get("step_emb")?)[0] != cfg.max_len + 1 {
            return Err(Error::Format(
                "answerer checkpoint does not match the configured sizes".into(),
            ));
        }
        Ok(Self {
            cfg: AnswererConfig {
                max_slots: shape(get("slot_emb")?)[0],
                ..cfg.clone()
            },
            vocab: shape(tok_emb)[0],
            visual_dim: shape(vis_w)[0],
            tok_emb,
            vis_w,
            vis_b: get("vis_b")?,
            slot_emb: get("slot_emb")?,
            order_emb: get("order_emb")?,
            step_emb: get("step_emb")?,
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    pub fn config(&self) -> &AnswererConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.tok_emb,
            self.vis_w,
            self.vis_b,
            self.slot_emb,
            self.order_emb,
            self.step_emb,
            self.wq,
            self.wk,
            self.wv,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.params().iter().map(|&p| store.value(p).len()).sum()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.vocab) {
            Some(i) => Err(Error::Vocab(format!("id {i} outside vocabulary of {}", self.vocab))),
            None => Ok(()),
        }
    }

    fn prepare(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &InterleavedSequence,
        question: &[u32],
    ) -> Result<Prepared> {
        if seq.items.is_empty() || seq.units.is_empty() {
            return Err(Error::EmptyInput);
        }
        if question.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.check_ids(question)?;
        self.check_ids(&seq.text_ids())?;
        let (_, vd) = tape.value(seq.visual).dims2()?;
        if vd != self.visual_dim {
            return Err(Error::shape(format!(
                "visual dim {vd}, answerer expects {}",
                self.visual_dim
            )));
        }
        if seq.n_spatial > self.cfg.max_slots {
            return Err(Error::shape(format!(
                "{} tokens per unit exceed {} slot embeddings",
                seq.n_spatial, self.cfg.max_slots
            )));
        }
        let emb = tape.param(store, self.tok_emb);
        let n_units = seq.units.len();
        let order_of = |u: usize| {
            if u == 0 {
                0
            } else if u + 1 == n_units {
                2
            } else {
                1
            }
        };

        // text rows and visual rows are built separately, then put back in
        // sequence order with one permutation
        let mut text_ids = Vec::new();
        let mut vis_rows = Vec::new();
        let mut vis_slots = Vec::new();
        let mut vis_order = Vec::new();
        let mut placement = Vec::with_capacity(seq.items.len());
        for (u, span) in seq.units.iter().enumerate() {
            for item in &seq.items[span.timestamp.start..span.visual.end] {
                match *item {
                    SeqItem::Text(id) => {
                        placement.push((false, text_ids.len()));
                        text_ids.push(id as usize);
                    }
                    SeqItem::Visual(r) => {
                        placement.push((true, vis_rows.len()));
                        vis_rows.push(r);
                        vis_slots.push(r % seq.n_spatial);
                        vis_order.push(order_of(u));
                    }
                }
            }
        }
        let mut parts = Vec::new();
        let mut content_vis = None;
        let n_text = text_ids.len();
        if n_text > 0 {
            parts.push(tape.gather_rows(emb, &text_ids)?);
        }
        if !vis_rows.is_empty() {
            let x = tape.gather_rows(seq.visual, &vis_rows)?;
            let (w, b) = (tape.param(store, self.vis_w), tape.param(store, self.vis_b));
            let x = tape.linear(x, w, b)?;
            content_vis = Some(x);
            let slots = tape.param(store, self.slot_emb);
            let s = tape.gather_rows(slots, &vis_slots)?;
            let orders = tape.param(store, self.order_emb);
            let o = tape.gather_rows(orders, &vis_order)?;
            let x = tape.add(x, s)?;
            parts.push(tape.add(x, o)?);
        }
        let stacked = tape.concat_rows(&parts)?;
        let perm: Vec<usize> = placement
            .iter()
            .map(|&(vis, i)| if vis { n_text + i } else { i })
            .collect();
        let ctx = tape.gather_rows(stacked, &perm)?;
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let keys = tape.matmul(ctx, wk)?;
        let values = tape.matmul(ctx, wv)?;
        let q_ids: Vec<usize> = question.iter().map(|&i| i as usize).collect();
        let words = tape.gather_rows(emb, &q_ids)?;
        let question = tape.mean_rows(words)?;
        let slots = self.slot_summary(tape, content_vis, &vis_slots)?;
        Ok(Prepared {
            keys,
            values,
            question,
            slots,
        })
    }

    fn slot_summary(&self, tape: &mut Tape, content: Option<Var>, slots: &[usize]) -> Result<Var> {
        let (m, d) = (self.cfg.max_slots, self.cfg.dim);
        let Some(x) = content else {
            return Ok(tape.input(Tensor::zeros(&[1, m * d])));
        };
        let pooled = tape.group_max_rows(x, slots, m)?;
        tape.reshape(pooled, &[1, m * d])
    }

    /// Logits for the steps whose previous tokens are `prev` (row i uses step
    /// embedding i).
    fn step_logits(&self, tape: &mut Tape, store: &ParamStore, p: &Prepared, prev: &[u32]) -> Result<Var> {
        let n = prev.len();
        if n > self.cfg.max_len + 1 {
            return Err(Error::shape(format!(
                "{n} decoding steps exceed max_len {}",
                self.cfg.max_len
            )));
        }
        let emb = tape.param(store, self.tok_emb);
        let ids: Vec<usize> = prev.iter().map(|&i| i as usize).collect();
        let prev_e = tape.gather_rows(emb, &ids)?;
        let steps = tape.param(store, self.step_emb);
        let step_e = tape.gather_rows(steps, &(0..n).collect::<Vec<_>>())?;
        let q = tape.gather_rows(p.question, &vec![0; n])?;
        let state = tape.add(prev_e, step_e)?;
        let state = tape.add(state, q)?;
        let wq = tape.param(store, self.wq);
        let queries = tape.matmul(state, wq)?;
        let dh = self.cfg.dim / self.cfg.heads;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(queries, a, b)?;
            let kh = tape.slice_cols(p.keys, a, b)?;
            let kh = tape.transpose(kh)?;
            let vh = tape.slice_cols(p.values, a, b)?;
            let scores = tape.matmul(qh, kh)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let slots = tape.gather_rows(p.slots, &vec![0; n])?;
        let x = tape.concat_cols(&[state, ctx, slots])?;
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let h = tape.linear(x, w1, b1)?;
        let h = tape.silu(h);
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        tape.linear(h, w2, b2)
    }

    /// Teacher-forced summed cross-entropy over the answer tokens and the
    /// terminating eos. Only answer positions are scored.
    pub fn qa_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &InterleavedSequence,
        question: &[u32],
        answer: &[u32],
    ) -> Result<Var> {
        self.check_ids(answer)?;
        if answer.len() > self.cfg.max_len {
            return Err(Error::Config(format!(
                "answer of {} tokens exceeds max_len {}",
                answer.len(),
                self.cfg.max_len
            )));
        }
        let p = self.prepare(tape, store, seq, question)?;
        let mut prev = vec![BOS];
        prev.extend_from_slice(answer);
        let mut targets: Vec<usize> = answer.iter().map(|&i| i as usize).collect();
        targets.push(EOS as usize);
        let logits = self.step_logits(tape, store, &p, &prev)?;
        tape.softmax_cross_entropy(logits, &targets)
    }

    /// Tokenizes the reference and returns L_QA.
    pub fn qa_loss_text(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tok: &Tokenizer,
        seq: &InterleavedSequence,
        question: &[u32],
        reference: &str,
    ) -> Result<Var> {
        let answer = tok.encode(reference)?;
        self.qa_loss(tape, store, seq, question, &answer)
    }

    /// Greedy decoding; returns the generated ids (without eos) and the
    /// output distribution at every step.
    pub fn decode(
        &self,
        store: &ParamStore,
        seq: &InterleavedSequence,
        tape: &mut Tape,
        question: &[u32],
    ) -> Result<(Vec<u32>, Vec<Vec<f64>>)> {
        let p = self.prepare(tape, store, seq, question)?;
        let mut prev = vec![BOS];
        let mut dists = Vec::new();
        while prev.len() <= self.cfg.max_len {
            let logits = self.step_logits(tape, store, &p, &prev)?;
            let (n, v) = tape.value(logits).dims2()?;
            let row = &tape.value(logits).data()[(n - 1) * v..];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = exp.iter().sum();
            let probs: Vec<f64> = exp.iter().map(|e| e / z).collect();
            if !probs.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric {
                    branch: "decode",
                    value: z,
                });
            }
            let mut best = EOS as usize;
            for (i, &pr) in probs.iter().enumerate() {
                let reserved = [PAD, BOS, UNK].contains(&(i as u32));
                if !reserved && pr > probs[best] {
                    best = i;
                }
            }
            dists.push(probs);
            if best == EOS as usize {
                break;
            }
            prev.push(best as u32);
        }
        prev.remove(0);
        Ok((prev, dists))
    }

    /// Greedy answer string, at most `max_len` tokens.
    pub fn answer(
        &self,
        store: &ParamStore,
        seq: &InterleavedSequence,
        tape: &mut Tape,
        question: &[u32],
        tok: &Tokenizer,
    ) -> Result<String> {
        let (ids, _) = self.decode(store, seq, tape, question)?;
        Ok(tok.decode(&ids))
    }
}
