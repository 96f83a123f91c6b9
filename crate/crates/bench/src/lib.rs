//! Seeded inputs shared by the kernel benchmarks.

use lvqa_core::ftc::{Consolidator, FtcConfig};
use lvqa_core::synthbench::NUM_CHANNELS;
use lvqa_core::tms::{build_windows, SamplingPolicy, TemporalWindow};
use lvqa_core::video::VideoTensor;
use lvqa_core::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HEIGHT: usize = 8;
pub const WIDTH: usize = 8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A noise video of `frames` frames at the benchmark resolution.
pub fn noise_video(frames: usize, seed: u64) -> VideoTensor {
    let t = Tensor::randn(&[NUM_CHANNELS, frames, HEIGHT, WIDTH], 1.0, &mut rng(seed));
    VideoTensor::new(t, 2.0).expect("valid video shape")
}

/// A freshly initialised consolidator with the default patch sizes.
pub fn consolidator(seed: u64) -> (Consolidator, ParamStore) {
    let mut store = ParamStore::new();
    let c = Consolidator::new(&mut store, "ftc", NUM_CHANNELS, &FtcConfig::default(), &mut rng(seed))
        .expect("default config is valid");
    (c, store)
}

/// `n` random anchors in a video of `frames` frames, their windows and one
/// policy per window.
pub fn windows(frames: usize, n: usize, half_width: usize, seed: u64) -> (Vec<TemporalWindow>, Vec<SamplingPolicy>) {
    let mut r = rng(seed);
    let anchors: Vec<usize> = (0..n).map(|_| r.random_range(1..=frames)).collect();
    let wins = build_windows(&anchors, half_width, frames).expect("anchors in range");
    let policies = (0..wins.len())
        .map(|i| SamplingPolicy::ALL[i % SamplingPolicy::COUNT])
        .collect();
    (wins, policies)
}

const WORDS: [&str; 16] = [
    "the",
    "red",
    "marker",
    "appears",
    "near",
    "left",
    "edge",
    "fluid",
    "flows",
    "fast",
    "instrument",
    "moves",
    "slowly",
    "scene",
    "is",
    "bright",
];

/// A random sentence of `len` words from a small vocabulary.
pub fn sentence(len: usize, seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    (0..len)
        .map(|_| WORDS[r.random_range(0..WORDS.len())].to_string())
        .collect()
}
