use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{par_map, shuffled, target_unit, Model, GROUNDER};
use crate::answerer::total_loss;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ftc::retrieval_loss;
use crate::ndcore::{AdamW, Optimizer, ParamStore, Tape, Tensor, Var};
use crate::synthbench::{Dataset, QaInstance, QuestionType, Split};
use crate::tms::{build_windows, global_uniform, ground_oracle, resample, Grounder};
use crate::video::VideoTensor;

/// Mean loss components over the samples of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub qa: f64,
    pub ret: f64,
    pub policy: f64,
    pub total: f64,
}

impl TrainLogRow {
    pub const HEADER: &'static str = "step,L_QA,L_ret,L_policy,total";
}

impl fmt::Display for TrainLogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.step, self.qa, self.ret, self.policy, self.total
        )
    }
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub log: Vec<TrainLogRow>,
    /// Numeric failure that stopped training; the model keeps the parameters
    /// of the last completed step.
    pub failure: Option<Error>,
}

impl TrainReport {
    pub fn log_csv(&self) -> String {
        let mut s = format!("{}\n", TrainLogRow::HEADER);
        for r in &self.log {
            s.push_str(&format!("{r}\n"));
        }
        s
    }
}

/// The three loss branches of one training sample. Frames come from the
/// annotated intervals plus `tms.top_m - 1` random distractor anchors, so the
/// answerer sees windows like a grounder's top units. Every window uses the labelled policy and the
/// instructor is scored against that label.
pub(crate) fn sample_losses(
    model: &Model,
    cfg: &RunConfig,
    qa: &QaInstance,
    video: &VideoTensor,
    rng: &mut ChaCha8Rng,
    tape: &mut Tape,
) -> Result<(Var, Var, Var)> {
    let tok = &model.tokenizer;
    let question = drop_words(&tok.encode(&qa.question)?, cfg.train.word_dropout, rng);
    let answer = tok.encode(&qa.answer)?;
    let t = video.num_frames();
    let mut anchors = ground_oracle(&qa.intervals, t)?.anchors;
    for _ in 1..cfg.tms.top_m {
        anchors.push(rng.random_range(1..=t));
    }
    let windows = build_windows(&anchors, cfg.tms.window, t)?;
    let mut policy_terms = Vec::with_capacity(windows.len());
    for w in &windows {
        let ins = model
            .instructor
            .instruct(tape, &model.store, w, &question, video, Some(qa.policy))?;
        policy_terms.push(ins.loss.expect("label given"));
    }
    let mut l_policy = policy_terms[0];
    for &p in &policy_terms[1..] {
        l_policy = tape.add(l_policy, p)?;
    }
    let l_policy = tape.scale(l_policy, 1.0 / policy_terms.len() as f64);

    let policies = vec![qa.policy; windows.len()];
    let rs = resample(t, &windows, &policies, cfg.tms.budget)?;
    let clip = video.select(&long_context(rs.frames, t, model.encoder.config().p_t, cfg, rng)?)?;
    let (rep, seq) = model.sequence(tape, &clip)?;
    let l_ret = if cfg.loss_weights().ret > 0.0 {
        retrieval_loss(&rep, &model.retriever, model.encoder.config(), &model.store, rng, tape)?.loss
    } else {
        tape.input(Tensor::scalar(0.0))
    };
    let l_qa = model.answerer.qa_loss(tape, &model.store, &seq, &question, &answer)?;
    Ok((l_qa, l_ret, l_policy))
}

/// With probability `train.long_context_rate`, merges the selected frames
/// with evenly spaced frames from the whole video (up to
/// `train.long_context_frames`), so the answerer also learns to find evidence
/// in long inputs. The result is padded to a multiple of `p_t`.
fn long_context(
    mut frames: Vec<usize>,
    t: usize,
    p_t: usize,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let budget = frames.len();
    if rng.random::<f64>() < cfg.train.long_context_rate && cfg.train.long_context_frames > budget {
        let k = rng.random_range(budget..=cfg.train.long_context_frames.min(t));
        frames.extend(global_uniform(t, k)?);
        frames.sort_unstable();
        frames.dedup();
    }
    let last = *frames.last().expect("non-empty selection");
    while !frames.len().is_multiple_of(p_t) {
        frames.push(last);
    }
    Ok(frames)
}

/// Drops each question word with probability `p`, keeping at least one, so
/// no single template word decides the answer.
fn drop_words(ids: &[u32], p: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if p <= 0.0 {
        return ids.to_vec();
    }
    let kept: Vec<u32> = ids.iter().copied().filter(|_| rng.random::<f64>() >= p).collect();
    if kept.is_empty() {
        vec![ids[rng.random_range(0..ids.len())]]
    } else {
        kept
    }
}

fn step_seed(seed: u64, step: usize, i: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Learning rate at `step` of `total`: linear warmup over the first
/// `warmup` fraction, then cosine decay from `base` to `base / 10`.
pub fn scheduled_lr(base: f64, step: usize, total: usize, warmup: f64) -> f64 {
    let warm = (warmup * total as f64).ceil() as usize;
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW over the joint objective with per-step loss logging.
pub struct Trainer {
    opt: AdamW,
    step: usize,
    /// Planned step count for the rate schedule; constant rate when absent.
    total_steps: Option<usize>,
}

impl Trainer {
    /// Constant learning rate.
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            opt: AdamW::new(cfg.train.lr, cfg.train.weight_decay),
            step: 0,
            total_steps: None,
        }
    }

    /// Warmup and cosine decay over `total_steps`.
    pub fn scheduled(cfg: &RunConfig, total_steps: usize) -> Self {
        Self {
            total_steps: Some(total_steps),
            ..Self::new(cfg)
        }
    }

    /// One optimizer step on the mean objective over `batch`. Per-sample
    /// passes run in parallel; gradients are summed in batch order, so the
    /// result does not depend on the thread count.
    pub fn step(
        &mut self,
        model: &mut Model,
        ds: &Dataset,
        cfg: &RunConfig,
        batch: &[&QaInstance],
    ) -> Result<TrainLogRow> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let weights = cfg.loss_weights();
        let step = self.step;
        let m: &Model = model;
        let results = par_map(&batch.iter().enumerate().collect::<Vec<_>>(), |&(i, qa)| {
            let video = ds.video(&qa.video)?;
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, step, i));
            let mut tape = Tape::new();
            let (qa_l, ret_l, pol_l) = sample_losses(m, cfg, qa, &video, &mut rng, &mut tape)?;
            let total = total_loss(&mut tape, qa_l, ret_l, pol_l, weights)?;
            let mut grads = m.store.clone();
            grads.zero_grad();
            tape.backward_into(total, &mut grads, 1.0)?;
            let parts = [
                tape.scalar(qa_l),
                tape.scalar(ret_l),
                tape.scalar(pol_l),
                tape.scalar(total),
            ];
            Ok::<(ParamStore, [f64; 4]), Error>((grads, parts))
        });
        let n = batch.len() as f64;
        let mut sums = [0.0; 4];
        model.store.zero_grad();
        for r in results {
            let (grads, parts) = r?;
            for id in grads.ids() {
                model.store.accumulate_grad(id, grads.grad(id), 1.0 / n);
            }
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
        }
        let norm = model.store.grad_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric {
                branch: "gradient",
                value: norm,
            });
        }
        let clip = cfg.train.grad_clip;
        if clip > 0.0 && norm > clip {
            model.store.scale_grads(clip / norm);
        }
        if let Some(total) = self.total_steps {
            self.opt.lr = scheduled_lr(cfg.train.lr, step, total, cfg.train.warmup);
        }
        self.opt.step(&mut model.store);
        self.step += 1;
        Ok(TrainLogRow {
            step: self.step,
            qa: sums[0] / n,
            ret: sums[1] / n,
            policy: sums[2] / n,
            total: sums[3] / n,
        })
    }
}

/// Trains encoder, retrieval head, instructor and answerer jointly on the
/// train split for `cfg.train.epochs` epochs. `on_step` sees every log row.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    cfg: &RunConfig,
    mut on_step: impl FnMut(&TrainLogRow),
) -> Result<TrainReport> {
    model.check_vocab(&ds.tokenizer)?;
    let qas = ds.split(Split::Train);
    if qas.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = cfg.train.effective_batch();
    let mut trainer = Trainer::scheduled(cfg, cfg.train.epochs * qas.len().div_ceil(batch));
    let mut report = TrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1);
    for _ in 0..cfg.train.epochs {
        let order = shuffled(qas.len(), &mut rng);
        for chunk in order.chunks(batch) {
            let batch: Vec<&QaInstance> = chunk.iter().map(|&i| qas[i]).collect();
            match trainer.step(model, ds, cfg, &batch) {
                Ok(row) => {
                    on_step(&row);
                    report.log.push(row);
                }
                Err(e) if e.is_numeric() => {
                    report.failure = Some(e);
                    return Ok(report);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}

/// Fits the grounder's word embeddings with the rest of the model frozen.
/// Each non-global question teaches the unit holding its interval center.
/// Returns the mean loss of each epoch.
pub fn train_grounder(model: &mut Model, ds: &Dataset, cfg: &RunConfig) -> Result<Vec<f64>> {
    model.check_vocab(&ds.tokenizer)?;
    let ids = ds.video_ids(Split::Train);
    let train_qas = ds.split(Split::Train);
    let (p_t, p_s) = (model.encoder.config().p_t, model.encoder.config().p_s);
    let m: &Model = model;
    // the encoder is frozen, so every video is encoded once
    let encoded = par_map(&ids, |id| {
        let video = ds.video(id)?.truncate_to_divisible(p_t, p_s)?;
        let mut tape = Tape::new();
        let (_, seq) = m.sequence(&mut tape, &video)?;
        Ok::<_, Error>((tape.value(seq.visual).clone(), seq))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let by_video: std::collections::HashMap<&str, usize> =
        ids.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let examples: Vec<&QaInstance> = train_qas
        .into_iter()
        .filter(|q| q.qtype != QuestionType::Lighting)
        .collect();
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let name = format!("{GROUNDER}.emb");
    let gid = model.store.id(&name).expect("grounder registered");
    let mut gs = ParamStore::new();
    gs.add(name.clone(), model.store.value(gid).clone());
    let grounder = Grounder::from_store(&gs, GROUNDER, cfg.tms.top_m, false)?;
    let mut opt = AdamW::new(cfg.tms.grounder_lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6A0D);
    let mut epoch_losses = Vec::with_capacity(cfg.tms.grounder_epochs);
    for _ in 0..cfg.tms.grounder_epochs {
        let mut sum = 0.0;
        for i in shuffled(examples.len(), &mut rng) {
            let qa = examples[i];
            let (tokens, seq) = &encoded[by_video[qa.video.as_str()]];
            let mut tape = Tape::new();
            let mut seq = seq.clone();
            seq.visual = tape.input(tokens.clone());
            let question = model.tokenizer.encode(&qa.question)?;
            let target = target_unit(qa, p_t, seq.n_units());
            let loss = grounder.loss(&mut tape, &gs, &seq, &question, target)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric {
                    branch: "grounding",
                    value,
                });
            }
            sum += value;
            gs.zero_grad();
            tape.backward_into(loss, &mut gs, 1.0)?;
            opt.step(&mut gs);
        }
        epoch_losses.push(sum / examples.len() as f64);
    }
    let learned = gs.value(gs.id(&name).expect("present")).clone();
    *model.store.value_mut(gid) = learned;
    model.grounder.trained = true;
    model.grounder.top_m = cfg.tms.top_m;
    Ok(epoch_losses)
}
