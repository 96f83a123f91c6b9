use std::collections::HashMap;

use lvqa_core::config::RunConfig;
use lvqa_core::experiments::{
    arm_config, bench_csv, evaluate_arm, long_video_config, run_bench, train_model, ARMS, BENCH_HEADER,
};
use lvqa_core::metrics::{keyword_accuracy, KACC};
use lvqa_core::pipeline::{evaluate, majority_answers, predict_all, Model};
use lvqa_core::synthbench::{Dataset, Split, SynthConfig};
use lvqa_core::tms::SamplingPolicy;

fn small_config() -> RunConfig {
    let mut c = RunConfig {
        synth: SynthConfig {
            train_videos: 12,
            val_videos: 0,
            test_videos: 4,
            ..SynthConfig::default()
        },
        ..RunConfig::default()
    };
    c.train.epochs = 1;
    c.bench.frames = vec![64, 128];
    c.bench.videos = 2;
    c.bench.source_frames = 256;
    c
}

fn models(c: &RunConfig, ds: &Dataset) -> (Model, Model) {
    let (ftc, _) = train_model(&arm_config(c, ARMS[3].1), ds, |_| {}).unwrap();
    let (frames, _) = train_model(&arm_config(c, ARMS[0].1), ds, |_| {}).unwrap();
    (ftc, frames)
}

#[test]
fn bench_token_counts_follow_the_patch_shapes() {
    let c = small_config();
    let ds = Dataset::generate(&c.synth).unwrap();
    let (ftc, frames) = models(&c, &ds);
    let rows = run_bench(&c, &ftc, &frames).unwrap();
    assert_eq!(rows.len(), 4);
    let (h, w) = (c.synth.height, c.synth.width);
    let f = &c.ftc;
    for r in &rows {
        // counts from shapes: units × spatial blocks per unit
        let expected = match r.mode {
            "ftc" => (r.frames / f.p_t) * (h / f.p_s) * (w / f.p_s),
            _ => r.frames * (h / c.frame_patch) * (w / c.frame_patch),
        };
        assert_eq!(r.visual_tokens, expected, "{r:?}");
        assert!(r.arena_bytes > 0 && r.runtime_ms > 0.0);
        assert!((0.0..=100.0).contains(&r.kacc));
    }
    let get = |mode: &str, t: usize| rows.iter().find(|r| r.mode == mode && r.frames == t).unwrap();
    assert_eq!(get("ftc", 128).visual_tokens, 2 * get("ftc", 64).visual_tokens);
    assert_eq!(get("frames", 64).visual_tokens, 8 * get("ftc", 64).visual_tokens);
    for mode in ["ftc", "frames"] {
        assert!(
            get(mode, 128).runtime_ms >= get(mode, 64).runtime_ms,
            "{mode} runtime fell with T"
        );
        assert!(get(mode, 128).arena_bytes > get(mode, 64).arena_bytes);
    }
    let csv = bench_csv(&rows);
    assert!(csv.starts_with(&format!("{BENCH_HEADER}\n")));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn long_videos_are_whole_episodes() {
    let mut c = small_config();
    let long = long_video_config(&c).unwrap();
    assert_eq!(long.episodes_per_video * long.episode_frames, 256);
    assert_eq!(long.test_videos, 2);
    c.bench.source_frames = 200;
    assert!(long_video_config(&c).is_err());
}

#[test]
fn fixed_policy_reproduces_the_single_policy_arm() {
    let mut c = small_config();
    c.set("tms.grounder", "oracle").unwrap();
    let ds = Dataset::generate(&c.synth).unwrap();
    let (ftc, _) = models(&c, &ds);
    let qas = ds.split(Split::Test);
    let arm = arm_config(&c, ARMS[2].1);
    let by_arm = predict_all(&ftc, &arm, &ds, &qas).unwrap();

    let mut explicit = c.clone();
    explicit.apply_text("run.pi=false\ntms.policy_fixed=uniform\n").unwrap();
    assert_eq!(by_arm, predict_all(&ftc, &explicit, &ds, &qas).unwrap());
    assert!(by_arm
        .iter()
        .all(|p| p.selection.policies.iter().all(|&x| x == SamplingPolicy::Uniform)));
    assert_eq!(
        evaluate_arm(&ftc, &arm, &ds, &qas).unwrap().to_csv(),
        evaluate_arm(&ftc, &explicit, &ds, &qas).unwrap().to_csv()
    );

    explicit.set("tms.policy_fixed", "dense").unwrap();
    let dense = predict_all(&ftc, &explicit, &ds, &qas).unwrap();
    assert!(dense
        .iter()
        .all(|p| p.selection.policies.iter().all(|&x| x == SamplingPolicy::Dense)));
}

#[test]
fn trained_model_beats_the_majority_answer_on_in_template_questions() {
    let c = RunConfig::default();
    let ds = Dataset::generate(&c.synth).unwrap();
    let (model, _) = train_model(&c, &ds, |_| {}).unwrap();
    let qas: Vec<_> = ds
        .split(Split::Test)
        .into_iter()
        .filter(|q| q.template_split.name() == "in-template")
        .collect();
    assert!(!qas.is_empty());
    let majority = majority_answers(&ds);
    let baseline: HashMap<String, String> = qas.iter().map(|q| (q.id.clone(), majority[&q.qtype].clone())).collect();
    let base = evaluate(&baseline, &qas).unwrap().get("all", KACC).unwrap();
    let trained = evaluate_arm(&model, &c, &ds, &qas).unwrap().get("all", KACC).unwrap();
    assert!(trained > base, "trained {trained} vs majority {base}");

    // the majority answer is a real answer, so it scores on its own type
    let hits = qas
        .iter()
        .filter(|q| keyword_accuracy(&majority[&q.qtype], &q.keywords).unwrap() == 1)
        .count();
    assert!((base - 100.0 * hits as f64 / qas.len() as f64).abs() < 0.01);
}
