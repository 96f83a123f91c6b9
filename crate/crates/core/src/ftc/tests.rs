use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ndcore::check::{max_relative_error, spread_coords};
use crate::ndcore::{AdamW, Optimizer};

fn video(c: usize, t: usize, h: usize, w: usize, fps: f64, seed: u64) -> VideoTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoTensor::new(Tensor::randn(&[c, t, h, w], 1.0, &mut rng), fps).unwrap()
}

fn cfg(p_t: usize, p_s: usize, channels: Vec<usize>) -> FtcConfig {
    let embed_dim = *channels.last().unwrap();
    FtcConfig {
        p_t,
        p_s,
        channels,
        embed_dim,
        ..FtcConfig::default()
    }
}

fn tok() -> Tokenizer {
    Tokenizer::from_texts(std::iter::empty()).unwrap()
}

#[test]
fn block_count_example() {
    let g = partition_blocks(&video(1, 8, 16, 16, 4.0, 0), &cfg(2, 8, vec![4])).unwrap();
    assert_eq!(g.len(), 16);
    assert_eq!(g.blocks.shape(), &[16, 1, 2, 8, 8]);
}

#[test]
fn single_block_holds_every_pixel() {
    let v = video(3, 2, 2, 2, 1.0, 1);
    let g = partition_blocks(&v, &cfg(2, 2, vec![4])).unwrap();
    assert_eq!(g.blocks.shape(), &[1, 3, 2, 2, 2]);
    // C×T×H×W order coincides with the block's C×p_t×p_s×p_s order
    assert_eq!(g.blocks.data(), v.frames().data());
}

#[test]
fn block_order_is_temporal_then_row_major() {
    // pixel value encodes (t, y, x)
    let (t, h, w) = (4, 4, 4);
    let data = (0..t * h * w).map(|i| i as f64).collect();
    let v = VideoTensor::new(Tensor::new(vec![1, t, h, w], data).unwrap(), 1.0).unwrap();
    let g = partition_blocks(&v, &cfg(2, 2, vec![4])).unwrap();
    let first = |b: usize| g.blocks.data()[b * 8];
    // block (u=0, by=0, bx=1) starts at pixel (0, 0, 2)
    assert_eq!(first(1), 2.0);
    // block (u=0, by=1, bx=0) starts at pixel (0, 2, 0)
    assert_eq!(first(2), 8.0);
    // block (u=1, 0, 0) starts at frame 2
    assert_eq!(first(4), 32.0);
    assert_eq!(g.to_volume(), *v.frames());
}

#[test]
fn non_divisible_names_axis() {
    let c = cfg(2, 2, vec![4]);
    let err = |v: VideoTensor| match partition_blocks(&v, &c) {
        Err(Error::NonDivisible { axis, .. }) => axis,
        other => panic!("expected NonDivisible, got {other:?}"),
    };
    assert_eq!(err(video(1, 7, 4, 4, 1.0, 0)), Axis::Temporal);
    assert_eq!(err(video(1, 8, 5, 4, 1.0, 0)), Axis::Height);
    assert_eq!(err(video(1, 8, 4, 3, 1.0, 0)), Axis::Width);
}

#[test]
fn config_validation() {
    assert!(FtcConfig::default().validate().is_ok());
    let bad = [
        FtcConfig {
            p_t: 0,
            ..FtcConfig::default()
        },
        FtcConfig {
            mask_fraction: 1.0,
            ..FtcConfig::default()
        },
        FtcConfig {
            sample_fraction: 0.0,
            ..FtcConfig::default()
        },
        FtcConfig {
            embed_dim: 16,
            ..FtcConfig::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
}

#[test]
fn identity_single_voxel_is_silu() {
    let c = cfg(1, 1, vec![1]);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stack = Consolidator::new(&mut store, "s", 1, &c, &mut rng).unwrap();
    store.value_mut(stack.layer_params()[0].0).fill(1.0);
    let v = video(1, 3, 1, 1, 1.0, 2);
    let mut tape = Tape::new();
    let rep = stack.encode(&v, &store, &mut tape).unwrap();
    let got = tape.value(rep.tokens).data().to_vec();
    let want: Vec<f64> = v
        .frames()
        .data()
        .iter()
        .map(|x| x * crate::ndcore::sigmoid(*x))
        .collect();
    assert_eq!(got, want);
}

#[test]
fn token_shapes_and_unit_times() {
    let c = cfg(2, 4, vec![6, 5]);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stack = Consolidator::new(&mut store, "s", 3, &c, &mut rng).unwrap();
    let v = video(3, 10, 8, 12, 4.0, 3);
    let mut tape = Tape::new();
    let rep = stack.encode(&v, &store, &mut tape).unwrap();
    assert_eq!(rep.n_units, 5);
    assert_eq!(rep.n_spatial, 6);
    assert_eq!(tape.value(rep.tokens).shape(), &[30, 5]);
    assert_eq!(tape.value(rep.z1).shape(), &[30, 6]);
    assert_eq!(rep.unit_times(4.0), vec![0, 0, 1, 1, 2]);
}

#[test]
fn tokens_match_direct_block_embedding() {
    // With one layer the token of block b is silu(<kernel, block> + bias).
    let c = cfg(2, 2, vec![3]);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stack = Consolidator::new(&mut store, "s", 2, &c, &mut rng).unwrap();
    let (kid, bid) = stack.layer_params()[0];
    store.value_mut(bid).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
    let v = video(2, 4, 4, 2, 1.0, 6);
    let grid = partition_blocks(&v, &c).unwrap();
    let mut tape = Tape::new();
    let rep = stack.consolidate(&grid, &store, &mut tape).unwrap();
    let k = store.value(kid).data();
    let b = store.value(bid).data();
    let bl = 2 * 2 * 2 * 2;
    for blk in 0..grid.len() {
        let x = &grid.blocks.data()[blk * bl..(blk + 1) * bl];
        for co in 0..3 {
            let pre: f64 = b[co]
                + x.iter()
                    .zip(&k[co * bl..(co + 1) * bl])
                    .map(|(a, w)| a * w)
                    .sum::<f64>();
            let want = pre * crate::ndcore::sigmoid(pre);
            let got = tape.value(rep.tokens).data()[blk * 3 + co];
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn stack_gradient_matches_finite_differences() {
    let c = cfg(2, 2, vec![3, 4]);
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stack = Consolidator::new(&mut store, "s", 2, &c, &mut rng).unwrap();
        let v = video(2, 4, 4, 4, 1.0, seed + 10);
        let w = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let grid = partition_blocks(&v, &c).unwrap();
        let loss_of = |store: &ParamStore| {
            let mut tape = Tape::new();
            let rep = stack.consolidate(&grid, store, &mut tape).unwrap();
            let l = tape.weighted_sum(rep.tokens, &w).unwrap();
            (tape, l)
        };
        let (tape, l) = loss_of(&store);
        store.zero_grad();
        tape.backward_into(l, &mut store, 1.0).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let x = store.value(id).clone();
            let analytic = store.grad(id).clone();
            let coords = spread_coords(x.len(), 12);
            let err = max_relative_error(&x, &analytic, &coords, 1e-6, |xv| {
                let mut s = store.clone();
                *s.value_mut(id) = xv.clone();
                let (t, l) = loss_of(&s);
                t.scalar(l)
            });
            assert!(err < 1e-4, "seed {seed} {}: {err}", store.name(id));
        }
    }
}

fn tiny_rep(n_units: usize, p_t: usize) -> (Tape, ConsolidatedRep) {
    let c = cfg(p_t, 1, vec![1]);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stack = Consolidator::new(&mut store, "s", 1, &c, &mut rng).unwrap();
    let v = VideoTensor::new(Tensor::zeros(&[1, n_units * p_t, 1, 1]), 1.0).unwrap();
    let mut tape = Tape::new();
    let rep = stack.encode(&v, &store, &mut tape).unwrap();
    (tape, rep)
}

#[test]
fn interleave_example() {
    let t = tok();
    let (_tape, rep) = tiny_rep(2, 1);
    let seq = interleave_timestamps(&rep, 1.0, &t).unwrap();
    let mut want = Vec::new();
    for (u, s) in ["timestamp: 0 seconds", "timestamp: 1 seconds"].iter().enumerate() {
        want.extend(t.encode(s).unwrap().into_iter().map(SeqItem::Text));
        want.push(SeqItem::Visual(u));
    }
    assert_eq!(seq.items, want);
    assert_eq!(seq.units[1].timestamp, 5..9);
    assert_eq!(seq.units[1].visual, 9..10);
    assert_eq!(parse_timestamps(&seq, &t).unwrap(), vec![(1, 0), (2, 1)]);
    assert_eq!(t.decode(&seq.text_ids()), "timestamp: 0 seconds timestamp: 1 seconds");
}

#[test]
fn repeated_seconds_are_accepted() {
    let t = tok();
    let (_tape, rep) = tiny_rep(100, 2);
    let seq = interleave_timestamps(&rep, 4.0, &t).unwrap();
    let got: Vec<u64> = parse_timestamps(&seq, &t).unwrap().into_iter().map(|p| p.1).collect();
    let want: Vec<u64> = (1..=100u64).map(|i| (i - 1) * 2 / 4).collect();
    assert_eq!(got, want);
}

#[test]
fn empty_and_bad_fps() {
    let t = tok();
    let (_tape, mut rep) = tiny_rep(2, 1);
    assert!(matches!(interleave_timestamps(&rep, 0.0, &t), Err(Error::Config(_))));
    rep.n_units = 0;
    assert!(matches!(
        interleave_timestamps(&rep, 1.0, &t),
        Err(Error::EmptySequence)
    ));
}

#[test]
fn shuffled_groups_are_rejected() {
    let t = tok();
    let (_tape, rep) = tiny_rep(12, 1);
    let seq = interleave_timestamps(&rep, 1.0, &t).unwrap();
    // swap the timestamp groups of units 2 and 11 ("1" and "1 0")
    let mut bad = seq.clone();
    let a = bad.units[1].timestamp.clone();
    let b = bad.units[10].timestamp.clone();
    let mut items: Vec<SeqItem> = Vec::new();
    for (u, span) in seq.units.iter().enumerate() {
        let ts = if u == 1 {
            b.clone()
        } else if u == 10 {
            a.clone()
        } else {
            span.timestamp.clone()
        };
        items.extend_from_slice(&seq.items[ts]);
        items.extend_from_slice(&seq.items[span.visual.clone()]);
    }
    bad.items = items;
    assert!(matches!(
        parse_timestamps(&bad, &t),
        Err(Error::NonMonotonic { .. }) | Err(Error::Parse { .. })
    ));
    // tokens of one group moved out of order
    let mut bad = seq.clone();
    bad.items.swap(0, 1);
    assert!(matches!(parse_timestamps(&bad, &t), Err(Error::Parse { index: 0, .. })));
    // visual token with no timestamp before it
    let mut bad = seq.clone();
    bad.items.insert(0, SeqItem::Visual(0));
    assert!(matches!(parse_timestamps(&bad, &t), Err(Error::Parse { index: 0, .. })));
}

fn retrieval_setup(mask: f64, seed: u64) -> (ParamStore, Consolidator, RetrievalHead, FtcConfig, VideoTensor) {
    let mut c = cfg(2, 2, vec![4, 4]);
    c.mask_fraction = mask;
    c.retriever_hidden = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stack = Consolidator::new(&mut store, "s", 2, &c, &mut rng).unwrap();
    let head = RetrievalHead::new(&mut store, "g", 4, 8, 4, &mut rng);
    (store, stack, head, c, video(2, 12, 4, 4, 2.0, seed + 100))
}

#[test]
fn zero_mask_gives_empty_zero_loss() {
    let (store, stack, head, c, v) = retrieval_setup(0.0, 0);
    let mut tape = Tape::new();
    let rep = stack.encode(&v, &store, &mut tape).unwrap();
    let out = retrieval_loss(&rep, &head, &c, &store, &mut ChaCha8Rng::seed_from_u64(1), &mut tape).unwrap();
    assert!(out.empty);
    assert_eq!(tape.scalar(out.loss), 0.0);
}

#[test]
fn retrieval_loss_is_positive_with_head_gradient() {
    let (mut store, stack, head, c, v) = retrieval_setup(0.3, 1);
    let mut tape = Tape::new();
    let rep = stack.encode(&v, &store, &mut tape).unwrap();
    let out = retrieval_loss(&rep, &head, &c, &store, &mut ChaCha8Rng::seed_from_u64(1), &mut tape).unwrap();
    assert!(!out.empty);
    assert!(tape.scalar(out.loss) > 0.0);
    // 6 units, 2 masked, 4 tokens each, ceil(0.25 * 8) = 2 targets
    assert_eq!(out.masked_units.len(), 2);
    assert_eq!(out.sampled.len(), 2);
    tape.backward_into(out.loss, &mut store, 1.0).unwrap();
    let head_norm: f64 = head.params().iter().map(|&p| store.grad(p).norm().powi(2)).sum();
    assert!(head_norm > 0.0);
    let conv_norm: f64 = stack.layer_params().iter().map(|&(k, _)| store.grad(k).norm()).sum();
    assert!(conv_norm > 0.0);
}

#[test]
fn retrieval_gradient_matches_finite_differences() {
    let (mut store, stack, head, c, v) = retrieval_setup(0.5, 2);
    let loss_of = |store: &ParamStore| {
        let mut tape = Tape::new();
        let rep = stack.encode(&v, store, &mut tape).unwrap();
        let out = retrieval_loss(&rep, &head, &c, store, &mut ChaCha8Rng::seed_from_u64(9), &mut tape).unwrap();
        (tape, out.loss)
    };
    let (tape, l) = loss_of(&store);
    tape.backward_into(l, &mut store, 1.0).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let x = store.value(id).clone();
        let analytic = store.grad(id).clone();
        let err = max_relative_error(&x, &analytic, &spread_coords(x.len(), 10), 1e-6, |xv| {
            let mut s = store.clone();
            *s.value_mut(id) = xv.clone();
            let (t, l) = loss_of(&s);
            t.scalar(l)
        });
        assert!(err < 1e-4, "{}: {err}", store.name(id));
    }
}

#[test]
fn retrieval_overfits_fixed_batch() {
    let (mut store, stack, head, c, v) = retrieval_setup(0.3, 3);
    let mut opt = AdamW::new(1e-2, 0.0);
    let mut last = f64::INFINITY;
    for _ in 0..2000 {
        let mut tape = Tape::new();
        let rep = stack.encode(&v, &store, &mut tape).unwrap();
        let out = retrieval_loss(&rep, &head, &c, &store, &mut ChaCha8Rng::seed_from_u64(4), &mut tape).unwrap();
        last = tape.scalar(out.loss);
        if last < 1e-3 {
            break;
        }
        store.zero_grad();
        tape.backward_into(out.loss, &mut store, 1.0).unwrap();
        opt.step(&mut store);
    }
    assert!(last < 1e-3, "final loss {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn token_count_law(nt in 1usize..6, nh in 1usize..4, nw in 1usize..4, pt in 1usize..4, ps in 1usize..4) {
        let c = cfg(pt, ps, vec![2]);
        let mut store = ParamStore::new();
        let stack = Consolidator::new(&mut store, "s", 1, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let v = video(1, nt * pt, nh * ps, nw * ps, 2.0, 0);
        let mut tape = Tape::new();
        let rep = stack.encode(&v, &store, &mut tape).unwrap();
        prop_assert_eq!(rep.n_units, nt);
        prop_assert_eq!(tape.value(rep.tokens).shape()[0], nt * nh * nw);
        prop_assert_eq!(tape.value(rep.z1).shape()[0], nt * nh * nw);
        prop_assert_eq!(c.token_count(nt * pt, nh * ps, nw * ps), nt * nh * nw);
    }

    #[test]
    fn masked_unit_restriction(seed in 0u64..1000, mask in 0.1f64..0.9) {
        let (store, stack, head, c, v) = retrieval_setup(mask, 7);
        let mut tape = Tape::new();
        let rep = stack.encode(&v, &store, &mut tape).unwrap();
        let out = retrieval_loss(&rep, &head, &c, &store, &mut ChaCha8Rng::seed_from_u64(seed), &mut tape).unwrap();
        for &i in &out.sampled {
            prop_assert!(out.masked_units.contains(&(i / rep.n_spatial)));
        }
    }

    #[test]
    fn interleave_round_trip(n in 1usize..200, pt_i in 0usize..3, fps_i in 0usize..4) {
        let pt = [1, 2, 4][pt_i];
        let fps = [1.0, 2.0, 4.0, 30.0][fps_i];
        let t = tok();
        let (_tape, rep) = tiny_rep(n, pt);
        let seq = interleave_timestamps(&rep, fps, &t).unwrap();
        let parsed = parse_timestamps(&seq, &t).unwrap();
        let want: Vec<(usize, u64)> = (1..=n).map(|i| (i, (((i - 1) * pt) as f64 / fps).floor() as u64)).collect();
        prop_assert_eq!(parsed, want);
    }
}
