//! Query-grounded resampling: temporal windows around grounded anchors, four
//! deterministic sampling policies, the policy instructor, and budgeted
//! resampling of the source video.
//!
//! Frame indices in this module are 1-based and inclusive.

mod grounding;
mod instructor;

pub use grounding::{
    ground_noisy, ground_oracle, interval_center, Grounder, GrounderMode, GroundingResult, GroundingSource,
};
pub use instructor::{window_features, Instruction, PolicyInstructor, NUM_FEATURES};

use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Gaussian policy standard deviation as a fraction of the half-width.
pub const GAUSSIAN_SIGMA_RATIO: f64 = 0.5;
pub const USHAPE_EXPONENT: f64 = 2.0;
pub const USHAPE_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalWindow {
    pub lo: usize,
    pub hi: usize,
    pub anchor: usize,
    pub half_width: usize,
}

impl TemporalWindow {
    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.lo..=self.hi).contains(&t)
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.lo..=self.hi
    }
}

/// `{t ∈ 1..=T : |t − μ| ≤ w}` per anchor, unions of overlapping or touching
/// windows merged. A merged window is re-anchored at the center of its span.
pub fn build_windows(anchors: &[usize], w: usize, t: usize) -> Result<Vec<TemporalWindow>> {
    let mut raw = Vec::with_capacity(anchors.len());
    for &mu in anchors {
        if mu == 0 || mu > t {
            return Err(Error::Config(format!("anchor {mu} outside 1..={t}")));
        }
        raw.push(TemporalWindow {
            lo: mu.saturating_sub(w).max(1),
            hi: (mu + w).min(t),
            anchor: mu,
            half_width: w,
        });
    }
    raw.sort_by_key(|win| (win.lo, win.hi));
    let mut out: Vec<TemporalWindow> = Vec::with_capacity(raw.len());
    for win in raw {
        match out.last_mut() {
            Some(prev) if win.lo <= prev.hi + 1 => {
                if win.hi > prev.hi || prev.anchor != win.anchor {
                    prev.hi = prev.hi.max(win.hi);
                    prev.anchor = interval_center(prev.lo, prev.hi);
                }
            }
            _ => out.push(win),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SamplingPolicy {
    Gaussian,
    Uniform,
    Dense,
    UShape,
}

impl SamplingPolicy {
    pub const ALL: [SamplingPolicy; 4] = [Self::Gaussian, Self::Uniform, Self::Dense, Self::UShape];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::Index {
            index: i,
            classes: Self::COUNT,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Uniform => "uniform",
            Self::Dense => "dense",
            Self::UShape => "ushape",
        }
    }
}

impl fmt::Display for SamplingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampling policy `{s}`")))
    }
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Evenly spaced placement over `lo..=lo+len-1`, ends included.
fn uniform_positions(lo: usize, len: usize, k: usize) -> Vec<usize> {
    // lo + round_half_up(j(len−1)/(k−1)) in integer arithmetic
    let d = 2 * (k - 1);
    (0..k).map(|j| lo + (2 * j * (len - 1) + (k - 1)) / d).collect()
}

/// Places each target at itself or, when taken, the nearest free frame in
/// the window (ties toward the lower frame).
fn place_unique(targets: impl IntoIterator<Item = usize>, win: &TemporalWindow) -> Vec<usize> {
    let mut used = vec![false; win.len()];
    let mut out = Vec::new();
    for t in targets {
        let t = t.clamp(win.lo, win.hi);
        let mut chosen = None;
        for d in 0..win.len() {
            if t >= win.lo + d && !used[t - d - win.lo] {
                chosen = Some(t - d);
                break;
            }
            if t + d <= win.hi && !used[t + d - win.lo] {
                chosen = Some(t + d);
                break;
            }
        }
        let c = chosen.expect("budget below window length");
        used[c - win.lo] = true;
        out.push(c);
    }
    out.sort_unstable();
    out
}

/// Exactly `min(k, |window|)` sorted unique frames inside the window.
pub fn sample_policy_frames(win: &TemporalWindow, policy: SamplingPolicy, k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::Budget(format!("per-window budget must be at least 1, got {k}")));
    }
    if win.lo == 0 || win.lo > win.hi || !win.contains(win.anchor) {
        return Err(Error::Config(format!("malformed window {win:?}")));
    }
    let len = win.len();
    if k >= len {
        return Ok(win.frames().collect());
    }
    let mu = win.anchor;
    let w = win.half_width.max(1) as f64;
    let frames = match policy {
        SamplingPolicy::Uniform if k == 1 => vec![mu],
        SamplingPolicy::Uniform => uniform_positions(win.lo, len, k),
        SamplingPolicy::Dense => {
            let start = (mu as i64 - ((k as i64 - 1) / 2)).clamp(win.lo as i64, (win.hi + 1 - k) as i64) as usize;
            (start..start + k).collect()
        }
        SamplingPolicy::Gaussian => {
            // quantiles of N(μ, σ) truncated to the window's continuous span
            let normal = Normal::new(mu as f64, GAUSSIAN_SIGMA_RATIO * w).expect("positive sigma");
            let a = normal.cdf(win.lo as f64 - 0.5);
            let b = normal.cdf(win.hi as f64 + 0.5);
            let targets = (0..k).map(|j| {
                let x = normal.inverse_cdf(a + (b - a) * (j as f64 + 0.5) / k as f64);
                round_half_up(x).clamp(win.lo as i64, win.hi as i64) as usize
            });
            place_unique(targets, win)
        }
        SamplingPolicy::UShape => {
            let weights: Vec<f64> = win
                .frames()
                .map(|t| ((t as f64 - mu as f64).abs() / w).powf(USHAPE_EXPONENT) + USHAPE_FLOOR)
                .collect();
            let total: f64 = weights.iter().sum();
            let mut cdf = Vec::with_capacity(len);
            let mut acc = 0.0;
            for wt in &weights {
                acc += wt / total;
                cdf.push(acc);
            }
            let targets = (0..k).map(|j| {
                let q = (j as f64 + 0.5) / k as f64;
                let i = cdf.iter().position(|&c| c >= q).unwrap_or(len - 1);
                win.lo + i
            });
            place_unique(targets, win)
        }
    };
    Ok(frames)
}

/// Per-window allocation proportional to window length: floors of the
/// quotas (at least 1 each), then the remainder by largest fractional part.
pub fn allocate_budget(lengths: &[usize], k_total: usize) -> Result<Vec<usize>> {
    if k_total < lengths.len() {
        return Err(Error::Budget(format!(
            "budget {k_total} cannot give {} windows one frame each",
            lengths.len()
        )));
    }
    let total: usize = lengths.iter().sum();
    if total == 0 {
        return Err(Error::Budget("windows are empty".into()));
    }
    // exact rationals: quota_i = k·len_i / total
    let num: Vec<usize> = lengths.iter().map(|&l| k_total * l).collect();
    let mut alloc: Vec<usize> = num.iter().map(|&n| (n / total).max(1)).collect();
    let rem = |i: usize| num[i] % total;
    let mut assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    if assigned < k_total {
        order.sort_by(|&a, &b| rem(b).cmp(&rem(a)).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if assigned == k_total {
                break;
            }
            alloc[i] += 1;
            assigned += 1;
        }
    } else {
        order.sort_by(|&a, &b| rem(a).cmp(&rem(b)).then(b.cmp(&a)));
        while assigned > k_total {
            let i = *order.iter().find(|&&i| alloc[i] > 1).expect("k_total ≥ window count");
            alloc[i] -= 1;
            assigned -= 1;
        }
    }
    Ok(alloc)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSample {
    pub window: usize,
    pub policy: SamplingPolicy,
    pub budget: usize,
    pub frames: Vec<usize>,
}

/// The query-adaptive frame selection V*.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResampledSequence {
    /// Sorted, unique, 1-based.
    pub frames: Vec<usize>,
    pub provenance: Vec<WindowSample>,
    pub k_total: usize,
}

impl ResampledSequence {
    /// Frame list padded to a multiple of `p_t` by repeating the last frame.
    pub fn padded_frames(&self, p_t: usize) -> Vec<usize> {
        let mut f = self.frames.clone();
        let last = *f.last().expect("non-empty selection");
        while !f.len().is_multiple_of(p_t) {
            f.push(last);
        }
        f
    }
}

/// Evenly spaced frames over the whole video (the ungrounded baseline).
pub fn global_uniform(num_frames: usize, k_total: usize) -> Result<Vec<usize>> {
    if k_total < 1 {
        return Err(Error::Budget("budget must be at least 1".into()));
    }
    if num_frames == 0 {
        return Err(Error::EmptyInput);
    }
    let win = TemporalWindow {
        lo: 1,
        hi: num_frames,
        anchor: interval_center(1, num_frames),
        half_width: num_frames / 2,
    };
    sample_policy_frames(&win, SamplingPolicy::Uniform, k_total)
}

pub fn resample(
    num_frames: usize,
    windows: &[TemporalWindow],
    policies: &[SamplingPolicy],
    k_total: usize,
) -> Result<ResampledSequence> {
    if windows.len() != policies.len() {
        return Err(Error::shape(format!(
            "{} windows but {} policies",
            windows.len(),
            policies.len()
        )));
    }
    if windows.is_empty() {
        return Ok(ResampledSequence {
            frames: global_uniform(num_frames, k_total)?,
            provenance: Vec::new(),
            k_total,
        });
    }
    if let Some(w) = windows.iter().find(|w| w.hi > num_frames) {
        return Err(Error::Config(format!(
            "window {}..={} beyond {num_frames} frames",
            w.lo, w.hi
        )));
    }
    let budgets = allocate_budget(&windows.iter().map(TemporalWindow::len).collect::<Vec<_>>(), k_total)?;
    let mut frames = Vec::new();
    let mut provenance = Vec::with_capacity(windows.len());
    for (i, ((win, &policy), &budget)) in windows.iter().zip(policies).zip(&budgets).enumerate() {
        let f = sample_policy_frames(win, policy, budget)?;
        frames.extend_from_slice(&f);
        provenance.push(WindowSample {
            window: i,
            policy,
            budget,
            frames: f,
        });
    }
    frames.sort_unstable();
    frames.dedup();
    Ok(ResampledSequence {
        frames,
        provenance,
        k_total,
    })
}
