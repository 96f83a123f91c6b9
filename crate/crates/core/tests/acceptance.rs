//! Acceptance harness: one PASS/FAIL line per criterion, exit status 1 if
//! any criterion fails. Every expected value is computed here from first
//! principles rather than read back from the library.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use lvqa_core::answerer::{total_loss, Answerer, AnswererConfig, LossWeights};
use lvqa_core::config::RunConfig;
use lvqa_core::experiments::{run_ablation, run_bench, Ablation};
use lvqa_core::ftc::{interleave_timestamps, parse_timestamps, retrieval_loss, Consolidator, FtcConfig, RetrievalHead};
use lvqa_core::metrics::{bleu4, keyword_accuracy, rouge_l, tokenize};
use lvqa_core::ndcore::check::{max_relative_error, spread_coords};
use lvqa_core::ndcore::{AdamW, Conv3dSpec, Optimizer};
use lvqa_core::pipeline::{train, Model};
use lvqa_core::synthbench::{Dataset, Split, SynthConfig, NUM_CHANNELS};
use lvqa_core::tms::{
    build_windows, ground_oracle, resample, sample_policy_frames, PolicyInstructor, SamplingPolicy, TemporalWindow,
};
use lvqa_core::tokenizer::Tokenizer;
use lvqa_core::video::VideoTensor;
use lvqa_core::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn noise_video(c: usize, t: usize, h: usize, w: usize, fps: f64, seed: u64) -> VideoTensor {
    VideoTensor::new(Tensor::randn(&[c, t, h, w], 1.0, &mut rng(seed)), fps).unwrap()
}

fn ftc_config(p_t: usize, p_s: usize, channels: Vec<usize>) -> FtcConfig {
    FtcConfig {
        p_t,
        p_s,
        embed_dim: *channels.last().unwrap(),
        channels,
        ..FtcConfig::default()
    }
}

// ---------------------------------------------------------------- gradients

/// Worst relative error over every coordinate of every input of a loss built
/// from plain tape inputs.
fn input_grad_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(x.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        let coords: Vec<usize> = (0..x.len()).collect();
        let err = max_relative_error(x, analytic, &coords, 1e-6, |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, y)| t.input(if j == i { probe.clone() } else { y.clone() }))
                .collect();
            let l = build(&mut t, &vs);
            t.scalar(l)
        });
        worst = worst.max(err);
    }
    worst
}

/// Worst relative error over spread coordinates of every parameter in `store`.
fn param_grad_error(store: &ParamStore, loss_of: impl Fn(&ParamStore) -> (Tape, Var)) -> f64 {
    let (tape, l) = loss_of(store);
    let mut grads = store.clone();
    grads.zero_grad();
    tape.backward_into(l, &mut grads, 1.0).unwrap();
    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        let x = store.value(id).clone();
        let err = max_relative_error(&x, grads.grad(id), &spread_coords(x.len(), 10), 1e-6, |probe| {
            let mut s = store.clone();
            *s.value_mut(id) = probe.clone();
            let (t, l) = loss_of(&s);
            t.scalar(l)
        });
        worst = worst.max(err);
    }
    worst
}

/// Reduces any tensor to a scalar with fixed random weights so every output
/// coordinate carries a distinct upstream gradient.
fn project(tape: &mut Tape, x: Var, weights: &Tensor) -> Var {
    let flat = tape.reshape(x, &[weights.len()]).unwrap();
    tape.weighted_sum(flat, weights).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);

        let stride = [
            1 + r.random_range(0..2),
            1 + r.random_range(0..2),
            1 + r.random_range(0..2),
        ];
        let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r);
        let k = Tensor::randn(&[3, 2, 2, 2, 2], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        let out_len = 3 * (0..3).map(|a| (4 - 2) / stride[a] + 1).product::<usize>();
        let wt = Tensor::randn(&[out_len], 1.0, &mut r);
        record(
            "conv3d",
            input_grad_error(&[x, k, b], |t, v| {
                let y = t.conv3d(v[0], v[1], v[2], Conv3dSpec::strided(stride)).unwrap();
                project(t, y, &wt)
            }),
        );

        let x = Tensor::randn(&[3, 4], 2.0, &mut r);
        let wt = Tensor::randn(&[12], 1.0, &mut r);
        record(
            "silu",
            input_grad_error(&[x], |t, v| {
                let y = t.silu(v[0]);
                project(t, y, &wt)
            }),
        );

        let (x, w, b) = (
            Tensor::randn(&[3, 4], 1.0, &mut r),
            Tensor::randn(&[4, 5], 1.0, &mut r),
            Tensor::randn(&[5], 1.0, &mut r),
        );
        let wt = Tensor::randn(&[15], 1.0, &mut r);
        record(
            "linear",
            input_grad_error(&[x, w, b], |t, v| {
                let y = t.linear(v[0], v[1], v[2]).unwrap();
                project(t, y, &wt)
            }),
        );

        let logits = Tensor::randn(&[4, 5], 2.0, &mut r);
        let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
        record(
            "softmax-CE",
            input_grad_error(&[logits], |t, v| t.softmax_cross_entropy(v[0], &targets).unwrap()),
        );

        let (p, q) = (Tensor::randn(&[3, 4], 1.0, &mut r), Tensor::randn(&[3, 4], 1.0, &mut r));
        record("mse", input_grad_error(&[p, q], |t, v| t.mse(v[0], v[1]).unwrap()));

        let mut c = ftc_config(2, 2, vec![4, 4]);
        c.mask_fraction = 0.5;
        let mut store = ParamStore::new();
        let stack = Consolidator::new(&mut store, "s", 2, &c, &mut r).unwrap();
        let head = RetrievalHead::new(&mut store, "g", 4, 6, 4, &mut r);
        let video = noise_video(2, 8, 4, 4, 2.0, seed + 100);
        record(
            "retrieval head",
            param_grad_error(&store, |s| {
                let mut tape = Tape::new();
                let rep = stack.encode(&video, s, &mut tape).unwrap();
                let out = retrieval_loss(&rep, &head, &c, s, &mut rng(seed + 200), &mut tape).unwrap();
                (tape, out.loss)
            }),
        );

        let tok = Tokenizer::from_texts(["what fluid is visible", "blood is visible"]).unwrap();
        let mut store = ParamStore::new();
        let acfg = AnswererConfig {
            dim: 8,
            hidden: 10,
            max_len: 5,
            heads: 2,
            max_slots: 4,
        };
        let enc = ftc_config(1, 2, vec![6]);
        let stack = Consolidator::new(&mut store, "enc", 2, &enc, &mut r).unwrap();
        let ans = Answerer::new(&mut store, "qa", &acfg, tok.len(), 6, &mut r).unwrap();
        let video = noise_video(2, 2, 2, 4, 1.0, seed + 300);
        let q = tok.encode("what fluid is visible").unwrap();
        let a = tok.encode("blood visible").unwrap();
        record(
            "answerer",
            param_grad_error(&store, |s| {
                let mut tape = Tape::new();
                let rep = stack.encode(&video, s, &mut tape).unwrap();
                let seq = interleave_timestamps(&rep, 1.0, &tok).unwrap();
                let l = ans.qa_loss(&mut tape, s, &seq, &q, &a).unwrap();
                (tape, l)
            }),
        );
    }
    let elapsed = start.elapsed();
    let summary = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    let detail = format!(
        "{GRAD_SEEDS} seeds, worst relative error: {summary}; {:.1}s",
        elapsed.as_secs_f64()
    );
    ensure(worst.iter().all(|w| w.1 < GRAD_TOL), || detail.clone())?;
    ensure(elapsed < Duration::from_secs(120), || format!("too slow: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- FTC

fn token_law() -> Outcome {
    let mut r = rng(1);
    for i in 0..50 {
        let (p_t, p_s) = (r.random_range(1..=4), r.random_range(1..=4));
        let (nt, nh, nw) = (r.random_range(1..=6), r.random_range(1..=4), r.random_range(1..=4));
        let (t, h, w) = (nt * p_t, nh * p_s, nw * p_s);
        let c = ftc_config(p_t, p_s, vec![3, 2]);
        let mut store = ParamStore::new();
        let stack = Consolidator::new(&mut store, "s", 1, &c, &mut r).unwrap();
        let mut tape = Tape::new();
        let rep = stack
            .encode(&noise_video(1, t, h, w, 2.0, i), &store, &mut tape)
            .unwrap();
        let expected = (t / p_t) * (h / p_s) * (w / p_s);
        let rows = tape.value(rep.tokens).shape()[0];
        ensure(rows == expected && rep.token_count() == expected, || {
            format!("shape T={t} H={h} W={w} p_t={p_t} p_s={p_s}: {rows} tokens, expected {expected}")
        })?;
    }
    Ok("50 random shapes".into())
}

fn timestamp_round_trip() -> Outcome {
    let tok = Tokenizer::from_texts(std::iter::empty()).unwrap();
    let mut checked = 0;
    for p_t in [1usize, 2, 4] {
        let c = ftc_config(p_t, 1, vec![1]);
        let mut store = ParamStore::new();
        let stack = Consolidator::new(&mut store, "s", 1, &c, &mut rng(0)).unwrap();
        for t in [p_t, 12, 100, 256, 1024] {
            let t = t / p_t * p_t;
            let mut tape = Tape::new();
            let video = VideoTensor::new(Tensor::zeros(&[1, t, 1, 1]), 1.0).unwrap();
            let rep = stack.encode(&video, &store, &mut tape).unwrap();
            for fps in [1u64, 2, 4, 30] {
                let seq = interleave_timestamps(&rep, fps as f64, &tok).unwrap();
                let parsed = parse_timestamps(&seq, &tok).unwrap();
                // unit i starts at frame (i-1)·p_t, i.e. floor((i-1)·p_t / fps) seconds
                let want: Vec<(usize, u64)> = (1..=t / p_t).map(|i| (i, ((i - 1) * p_t) as u64 / fps)).collect();
                ensure(parsed == want, || {
                    format!("p_t={p_t} T={t} fps={fps}: timestamps differ")
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} (p_t, T, fps) combinations, T up to 1024"))
}

fn retrieval_behaviour() -> Outcome {
    let setup = |mask: f64, seed: u64| {
        let mut c = ftc_config(2, 2, vec![4, 4]);
        c.mask_fraction = mask;
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let stack = Consolidator::new(&mut store, "s", 2, &c, &mut r).unwrap();
        let head = RetrievalHead::new(&mut store, "g", 4, 8, 4, &mut r);
        (store, stack, head, c, noise_video(2, 12, 4, 4, 2.0, seed + 100))
    };

    let (store, stack, head, c, v) = setup(0.0, 0);
    let mut tape = Tape::new();
    let rep = stack.encode(&v, &store, &mut tape).unwrap();
    let out = retrieval_loss(&rep, &head, &c, &store, &mut rng(1), &mut tape).unwrap();
    ensure(out.empty && tape.scalar(out.loss) == 0.0, || {
        "empty mask gave a non-zero loss".into()
    })?;

    let mut batches = 0;
    for seed in 0..200u64 {
        let mask = 0.1 + 0.8 * (seed as f64 / 200.0);
        let (store, stack, head, c, v) = setup(mask, seed);
        let mut tape = Tape::new();
        let rep = stack.encode(&v, &store, &mut tape).unwrap();
        let out = retrieval_loss(&rep, &head, &c, &store, &mut rng(seed + 7), &mut tape).unwrap();
        let masked: BTreeSet<usize> = out.masked_units.iter().copied().collect();
        ensure(
            out.sampled.iter().all(|&i| masked.contains(&(i / rep.n_spatial))),
            || format!("batch {seed}: a sampled token lies outside the masked units"),
        )?;
        batches += 1;
    }

    let (mut store, stack, head, c, v) = setup(0.3, 3);
    let mut opt = AdamW::new(1e-2, 0.0);
    let mut last = f64::INFINITY;
    let mut steps = 0;
    while steps < 2000 {
        let mut tape = Tape::new();
        let rep = stack.encode(&v, &store, &mut tape).unwrap();
        let out = retrieval_loss(&rep, &head, &c, &store, &mut rng(4), &mut tape).unwrap();
        last = tape.scalar(out.loss);
        if last < 1e-3 {
            break;
        }
        store.zero_grad();
        tape.backward_into(out.loss, &mut store, 1.0).unwrap();
        opt.step(&mut store);
        steps += 1;
    }
    ensure(last < 1e-3, || format!("fixed batch loss {last:.2e} after 2000 steps"))?;
    Ok(format!(
        "empty mask gives 0; {batches} batches sample only masked units; fixed batch below 1e-3 after {steps} steps"
    ))
}

// ---------------------------------------------------------------- TMS

/// Maximal runs of the set {f ∈ [1,T] : ∃ μ, |f − μ| ≤ w}.
fn brute_runs(anchors: &[usize], w: usize, t: usize) -> Vec<(usize, usize)> {
    let covered: Vec<usize> = (1..=t)
        .filter(|&f| anchors.iter().any(|&mu| f.abs_diff(mu) <= w))
        .collect();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for f in covered {
        match runs.last_mut() {
            Some(last) if last.1 + 1 == f => last.1 = f,
            _ => runs.push((f, f)),
        }
    }
    runs
}

fn window_exactness() -> Outcome {
    let mut r = rng(5);
    let mut merged = 0;
    let mut clamped = 0;
    for _ in 0..1000 {
        let t = r.random_range(1..=400);
        let w = r.random_range(0..=60);
        let anchors: Vec<usize> = (0..r.random_range(1..=4)).map(|_| r.random_range(1..=t)).collect();
        let got: Vec<(usize, usize)> = build_windows(&anchors, w, t)
            .unwrap()
            .iter()
            .map(|x| (x.lo, x.hi))
            .collect();
        let want = brute_runs(&anchors, w, t);
        ensure(got == want, || {
            format!("anchors {anchors:?} w={w} T={t}: {got:?} vs {want:?}")
        })?;
        merged += usize::from(want.len() < anchors.iter().collect::<BTreeSet<_>>().len());
        clamped += usize::from(anchors.iter().any(|&a| a <= w || a + w > t));
    }
    Ok(format!(
        "1000 random (anchors, w, T); {merged} with merging, {clamped} with clamping"
    ))
}

fn mean_distance(frames: &[usize], mu: usize) -> f64 {
    frames.iter().map(|&f| f.abs_diff(mu) as f64).sum::<f64>() / frames.len() as f64
}

fn policy_shapes() -> Outcome {
    let mut r = rng(6);
    let mut violations = Vec::new();
    let mut n = 0;
    while n < 200 {
        let t = r.random_range(40..=600);
        let w = r.random_range(20..=120);
        let mu = r.random_range(1..=t);
        let win = build_windows(&[mu], w, t).unwrap().remove(0);
        if win.len() < 40 {
            continue;
        }
        n += 1;
        let mut sample = |p| {
            let a = sample_policy_frames(&win, p, 8).unwrap();
            if a != sample_policy_frames(&win, p, 8).unwrap() {
                violations.push(format!("{p} not deterministic"));
            }
            a
        };
        let (g, u, d, s) = (
            sample(SamplingPolicy::Gaussian),
            sample(SamplingPolicy::Uniform),
            sample(SamplingPolicy::Dense),
            sample(SamplingPolicy::UShape),
        );
        if mean_distance(&g, mu) >= mean_distance(&u, mu) {
            violations.push(format!("gaussian not closer than uniform in {}..={}", win.lo, win.hi));
        }
        if mean_distance(&s, mu) <= mean_distance(&u, mu) {
            violations.push(format!("ushape not farther than uniform in {}..={}", win.lo, win.hi));
        }
        if !d.windows(2).all(|p| p[1] == p[0] + 1) {
            violations.push(format!("dense not contiguous in {}..={}", win.lo, win.hi));
        }
    }
    ensure(violations.is_empty(), || {
        format!("{} violations, first: {}", violations.len(), violations[0])
    })?;
    Ok("200 windows, 0 violations".into())
}

/// Window around the annotated evidence, as the oracle grounder sees it.
fn oracle_window(intervals: &[(usize, usize)], w: usize, t: usize) -> TemporalWindow {
    let anchors = ground_oracle(intervals, t).unwrap().anchors;
    build_windows(&anchors[..1], w, t).unwrap().remove(0)
}

fn instructor_accuracy() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let ds = Dataset::generate(&cfg.synth).unwrap();
    let tok = &ds.tokenizer;
    let examples = |split| -> Vec<(Vec<u32>, TemporalWindow, VideoTensor, SamplingPolicy)> {
        ds.split(split)
            .into_iter()
            .map(|qa| {
                let v = ds.video(&qa.video).unwrap();
                let w = oracle_window(&qa.intervals, cfg.tms.window, v.num_frames());
                (tok.encode(&qa.question).unwrap(), w, v, qa.policy)
            })
            .collect()
    };
    let (train_set, test_set) = (examples(Split::Train), examples(Split::Test));
    let mut store = ParamStore::new();
    let ins = PolicyInstructor::new(
        &mut store,
        "pi",
        tok.len(),
        cfg.tms.instructor_dim,
        cfg.tms.instructor_hidden,
        &mut rng(7),
    );
    let mut opt = AdamW::new(1e-2, 0.0);
    for _ in 0..3 {
        for (q, w, v, label) in &train_set {
            let mut tape = Tape::new();
            let out = ins.instruct(&mut tape, &store, w, q, v, Some(*label)).unwrap();
            store.zero_grad();
            tape.backward_into(out.loss.unwrap(), &mut store, 1.0).unwrap();
            opt.step(&mut store);
        }
    }
    let correct = test_set
        .iter()
        .filter(|(q, w, v, label)| {
            let mut tape = Tape::new();
            ins.instruct(&mut tape, &store, w, q, v, None).unwrap().policy == *label
        })
        .count();
    let acc = 100.0 * correct as f64 / test_set.len() as f64;
    let elapsed = start.elapsed();
    let detail = format!(
        "{acc:.1}% on {} held-out questions after {} training examples; {:.1}s",
        test_set.len(),
        train_set.len(),
        elapsed.as_secs_f64()
    );
    ensure(acc >= 90.0 && elapsed < Duration::from_secs(60), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- metrics

fn ngrams(x: &[String], n: usize) -> Vec<&[String]> {
    if x.len() < n {
        Vec::new()
    } else {
        (0..=x.len() - n).map(|i| &x[i..i + n]).collect()
    }
}

/// BLEU-4 by clipped counting: each candidate n-gram type counts
/// min(occurrences in candidate, occurrences in reference) by full scans.
fn bleu_oracle(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0f64;
    for n in 1..=4 {
        let cg = ngrams(c, n);
        let rg = ngrams(r, n);
        let mut seen: Vec<&[String]> = Vec::new();
        let mut clipped = 0usize;
        for g in &cg {
            if seen.contains(g) {
                continue;
            }
            seen.push(g);
            let in_c = cg.iter().filter(|x| *x == g).count();
            let in_r = rg.iter().filter(|x| *x == g).count();
            clipped += in_c.min(in_r);
        }
        let p = if clipped > 0 {
            clipped as f64 / cg.len() as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (cg.len() + 1) as f64
        };
        prod *= p;
    }
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    100.0 * bp * prod.powf(0.25)
}

/// Longest common subsequence by exhaustive recursion with memoisation on
/// suffix pairs.
fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    go(a, b, 0, 0, &mut vec![vec![None; b.len()]; a.len()])
}

fn rouge_oracle(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_oracle(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
    100.0 * 2.0 * p * rec / (p + rec)
}

fn metric_oracles() -> Outcome {
    const WORDS: [&str; 8] = ["the", "blood", "polyp", "is", "visible", "left", "moves", "red"];
    let mut r = rng(8);
    let sentence = |r: &mut ChaCha8Rng| -> Vec<String> {
        (0..r.random_range(0..=12))
            .map(|_| WORDS[r.random_range(0..WORDS.len())].to_string())
            .collect()
    };
    for i in 0..1000 {
        let (c, rf) = (sentence(&mut r), sentence(&mut r));
        let (b, bo) = (bleu4(&c, &rf), bleu_oracle(&c, &rf));
        ensure(b == bo, || format!("pair {i}: BLEU-4 {b} vs oracle {bo}"))?;
        let (g, go) = (rouge_l(&c, &rf), rouge_oracle(&c, &rf));
        ensure(g == go, || format!("pair {i}: ROUGE-L {g} vs oracle {go}"))?;
        if !c.is_empty() {
            ensure(bleu4(&c, &c) == 100.0 && rouge_l(&c, &c) == 100.0, || {
                format!("pair {i}: identical strings below 100")
            })?;
        }
    }
    let cases: [(&str, &[&str], u8); 5] = [
        ("The polyp is on the LEFT.", &["left"], 1),
        ("blood is visible", &["blood", "visible"], 1),
        ("blood is visible", &["water"], 0),
        ("moves to the upper left", &["upper left"], 1),
        ("left then upper", &["upper left"], 0),
    ];
    for (answer, keys, want) in cases {
        let got = keyword_accuracy(answer, keys).unwrap();
        ensure(got == want, || {
            format!("K-ACC({answer:?}, {keys:?}) = {got}, expected {want}")
        })?;
    }
    ensure(keyword_accuracy("x", &[] as &[&str]).is_err(), || {
        "empty keyword set accepted".into()
    })?;
    ensure(tokenize("Blood, visible!") == ["blood", "visible"], || {
        "tokenizer normalisation".into()
    })?;
    Ok("1000 random pairs match; identity scores 100; 5 keyword cases".into())
}

// ---------------------------------------------------------------- experiments

fn ablation_trend(ab: &Ablation, elapsed: Duration) -> Outcome {
    let k = |arm| ab.get(arm, "sparse", "K-ACC").unwrap();
    let (base, ftc, tg, full) = (k("base"), k("+FTC"), k("+FTC+TG"), k("+FTC+TG+PI"));
    let detail = format!(
        "sparse K-ACC base {base:.2}, +FTC {ftc:.2}, +FTC+TG {tg:.2}, +FTC+TG+PI {full:.2}; {:.0}s",
        elapsed.as_secs_f64()
    );
    ensure(full - base >= 10.0, || {
        format!("full does not beat the baseline by 10: {detail}")
    })?;
    ensure(base <= tg && tg <= full, || {
        format!("+FTC+TG outside [base, full]: {detail}")
    })?;
    ensure(ftc <= tg, || format!("grounding lowered K-ACC: {detail}"))?;
    ensure(elapsed < Duration::from_secs(1800), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn scalability_trend(cfg: &RunConfig, ab: &Ablation) -> Outcome {
    let rows = run_bench(cfg, &ab.ftc_model, &ab.frame_model).map_err(|e| e.to_string())?;
    let (h, w) = (cfg.synth.height, cfg.synth.width);
    let f = cfg.encoder_config();
    let frame = cfg.frame_config();
    // tokens one frame yields without consolidation, per token of one unit with it
    let ratio = f.p_t * (h / frame.p_s) * (w / frame.p_s) / ((h / f.p_s) * (w / f.p_s));
    let get = |mode: &str, t: usize| rows.iter().find(|r| r.mode == mode && r.frames == t).unwrap();
    for &t in &cfg.bench.frames {
        let (a, b) = (get("ftc", t), get("frames", t));
        ensure(b.visual_tokens == ratio * a.visual_tokens, || {
            format!(
                "T={t}: {} frame tokens vs {} FTC tokens, expected ratio {ratio}",
                b.visual_tokens, a.visual_tokens
            )
        })?;
    }
    let (lo, hi) = (cfg.bench.frames[0], *cfg.bench.frames.last().unwrap());
    let growth = |mode| (get(mode, hi).arena_bytes as f64 - get(mode, lo).arena_bytes as f64) / (hi - lo) as f64;
    let (g_ftc, g_frames) = (growth("ftc"), growth("frames"));
    ensure(g_frames >= f.p_t as f64 * g_ftc, || {
        format!("arena growth {g_frames:.0} B/frame without FTC vs {g_ftc:.0} with it")
    })?;
    let mut pairs = Vec::new();
    for a in rows.iter().filter(|r| r.mode == "ftc") {
        if let Some(b) = rows
            .iter()
            .find(|r| r.mode == "frames" && r.visual_tokens == a.visual_tokens)
        {
            ensure(a.kacc >= b.kacc, || {
                format!(
                    "{} tokens: FTC K-ACC {:.2} below frame-token {:.2}",
                    a.visual_tokens, a.kacc, b.kacc
                )
            })?;
            pairs.push(format!("{} tokens {:.1} vs {:.1}", a.visual_tokens, a.kacc, b.kacc));
        }
    }
    ensure(!pairs.is_empty(), || "no grid points share a token budget".into())?;
    Ok(format!(
        "token ratio {ratio} at every T; arena growth {:.1}x; equal-budget K-ACC {}",
        g_frames / g_ftc,
        pairs.join(", ")
    ))
}

// ---------------------------------------------------------------- joint loss

fn loss_decomposition() -> Outcome {
    let mut cfg = RunConfig {
        synth: SynthConfig {
            train_videos: 8,
            val_videos: 0,
            test_videos: 1,
            ..SynthConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.train.epochs = 1;
    let ds = Dataset::generate(&cfg.synth).unwrap();

    let mut zero = cfg.clone();
    zero.set("answerer.lambda_ret", "0").unwrap();
    zero.set("answerer.lambda_policy", "0").unwrap();
    let mut m = Model::new(&zero, ds.tokenizer.clone(), NUM_CHANNELS).unwrap();
    let log = train(&mut m, &ds, &zero, |_| {}).unwrap().log;
    ensure(!log.is_empty() && log.iter().all(|r| r.total == r.qa), || {
        "logged total differs from L_QA under zero weights".into()
    })?;

    let model = Model::new(&cfg, ds.tokenizer.clone(), NUM_CHANNELS).unwrap();
    let weights = LossWeights::new(0.4, 0.6).unwrap();
    let qa = ds.split(Split::Train)[0];
    let video = ds.video(&qa.video).unwrap();
    let q = model.tokenizer.encode(&qa.question).unwrap();
    let a = model.tokenizer.encode(&qa.answer).unwrap();
    let win = oracle_window(&qa.intervals, cfg.tms.window, video.num_frames());
    let rs = resample(
        video.num_frames(),
        std::slice::from_ref(&win),
        &[qa.policy],
        cfg.tms.budget,
    )
    .unwrap();
    let clip = video.select(&rs.padded_frames(model.encoder.config().p_t)).unwrap();
    let branches = |tape: &mut Tape| {
        let (rep, seq) = model.sequence(tape, &clip).unwrap();
        let l_ret = retrieval_loss(
            &rep,
            &model.retriever,
            model.encoder.config(),
            &model.store,
            &mut rng(9),
            tape,
        )
        .unwrap()
        .loss;
        let l_qa = model.answerer.qa_loss(tape, &model.store, &seq, &q, &a).unwrap();
        let l_pol = model
            .instructor
            .instruct(tape, &model.store, &win, &q, &video, Some(qa.policy))
            .unwrap()
            .loss
            .unwrap();
        [l_qa, l_ret, l_pol]
    };
    let mut tape = Tape::new();
    let [x, y, z] = branches(&mut tape);
    let total = total_loss(&mut tape, x, y, z, weights).unwrap();
    let expected_total = tape.scalar(x) + weights.ret * tape.scalar(y) + weights.policy * tape.scalar(z);
    ensure((tape.scalar(total) - expected_total).abs() < 1e-12, || {
        "total is not the weighted sum".into()
    })?;
    let mut joint = model.store.clone();
    joint.zero_grad();
    tape.backward_into(total, &mut joint, 1.0).unwrap();
    let mut parts = model.store.clone();
    parts.zero_grad();
    for (i, scale) in [1.0, weights.ret, weights.policy].into_iter().enumerate() {
        let mut t = Tape::new();
        let l = branches(&mut t)[i];
        t.backward_into(l, &mut parts, scale).unwrap();
    }
    let mut worst = 0.0f64;
    for id in model.store.ids() {
        for (g, h) in joint.grad(id).data().iter().zip(parts.grad(id).data()) {
            worst = worst.max((g - h).abs());
        }
    }
    ensure(worst < 1e-8, || {
        format!("joint vs summed branch gradients differ by {worst:.2e}")
    })?;
    Ok(format!(
        "zero weights: total == L_QA on {} steps; joint gradient max deviation {worst:.1e}",
        log.len()
    ))
}

fn report(name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL {name}: {detail}");
        }
    }
}

fn main() {
    let mut failures = 0;
    report("gradient suite", gradient_suite(), &mut failures);
    report("token count law", token_law(), &mut failures);
    report("timestamp round trip", timestamp_round_trip(), &mut failures);
    report("retrieval loss behaviour", retrieval_behaviour(), &mut failures);
    report("window construction", window_exactness(), &mut failures);
    report("sampling policy shapes", policy_shapes(), &mut failures);
    report("policy instructor", instructor_accuracy(), &mut failures);
    report("metric oracles", metric_oracles(), &mut failures);

    let cfg = RunConfig::default();
    let start = Instant::now();
    let ablation = Dataset::generate(&cfg.synth).and_then(|ds| run_ablation(&cfg, &ds, |_| {}));
    let elapsed = start.elapsed();
    match &ablation {
        Ok(ab) => {
            report("ablation trend", ablation_trend(ab, elapsed), &mut failures);
            report("scalability trend", scalability_trend(&cfg, ab), &mut failures);
        }
        Err(e) => {
            report("ablation trend", Err(e.to_string()), &mut failures);
            report("scalability trend", Err(format!("no models: {e}")), &mut failures);
        }
    }
    report("loss decomposition", loss_decomposition(), &mut failures);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
