//! Temporal token consolidation: block partitioning, the 3D-conv
//! consolidation stack, timestamp interleaving and the masked retrieval loss.

use rand::seq::index;
use rand::Rng;

use crate::error::{Axis, Error, Result};
use crate::ndcore::{Conv3dSpec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::Tokenizer;
use crate::video::VideoTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FtcConfig {
    /// Temporal patch size in frames.
    pub p_t: usize,
    /// Spatial patch size in pixels.
    pub p_s: usize,
    /// Output channels of each conv layer; its length is the layer count.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    /// Fraction of temporal units whose compressed tokens are zeroed.
    pub mask_fraction: f64,
    /// Fraction of the masked units' pre-compression tokens used as targets.
    pub sample_fraction: f64,
    pub retriever_hidden: usize,
}

impl Default for FtcConfig {
    fn default() -> Self {
        Self {
            p_t: 2,
            p_s: 4,
            channels: vec![32, 32],
            embed_dim: 32,
            mask_fraction: 0.3,
            sample_fraction: 0.25,
            retriever_hidden: 32,
        }
    }
}

impl FtcConfig {
    pub fn layers(&self) -> usize {
        self.channels.len()
    }

    /// A mask fraction of zero is accepted and disables masking.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.p_t == 0 || self.p_s == 0 {
            return bad(format!(
                "patch sizes must be positive (p_t={}, p_s={})",
                self.p_t, self.p_s
            ));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("invalid channel list {:?}", self.channels));
        }
        if *self.channels.last().unwrap() != self.embed_dim {
            return bad(format!(
                "last layer width {} differs from embed_dim {}",
                self.channels.last().unwrap(),
                self.embed_dim
            ));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return bad(format!("mask_fraction {} outside [0, 1)", self.mask_fraction));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!("sample_fraction {} outside (0, 1]", self.sample_fraction));
        }
        if self.retriever_hidden == 0 {
            return bad("retriever_hidden must be positive".into());
        }
        Ok(())
    }

    /// Compressed token count for a T×H×W input.
    pub fn token_count(&self, t: usize, h: usize, w: usize) -> usize {
        (t / self.p_t) * (h / self.p_s) * (w / self.p_s)
    }
}

/// Non-overlapping p_t×p_s×p_s blocks in temporal-major, row-major order.
#[derive(Clone, Debug)]
pub struct BlockGrid {
    /// N × C × p_t × p_s × p_s.
    pub blocks: Tensor,
    pub n_temporal: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub channels: usize,
    pub p_t: usize,
    pub p_s: usize,
    /// Source frame index (0-based) of the first frame of each temporal unit.
    pub unit_start_frames: Vec<usize>,
}

impl BlockGrid {
    pub fn n_spatial(&self) -> usize {
        self.n_h * self.n_w
    }

    pub fn len(&self) -> usize {
        self.n_temporal * self.n_spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reassembles the C×T×H×W volume the grid was cut from.
    pub fn to_volume(&self) -> Tensor {
        let (pt, ps, c) = (self.p_t, self.p_s, self.channels);
        let (t, h, w) = (self.n_temporal * pt, self.n_h * ps, self.n_w * ps);
        let mut out = vec![0.0; c * t * h * w];
        let src = self.blocks.data();
        let block_len = c * pt * ps * ps;
        for u in 0..self.n_temporal {
            for by in 0..self.n_h {
                for bx in 0..self.n_w {
                    let b = (u * self.n_h + by) * self.n_w + bx;
                    let blk = &src[b * block_len..(b + 1) * block_len];
                    for ch in 0..c {
                        for dt in 0..pt {
                            for dy in 0..ps {
                                let row = ((ch * pt + dt) * ps + dy) * ps;
                                let dst = ((ch * t + u * pt + dt) * h + by * ps + dy) * w + bx * ps;
                                out[dst..dst + ps].copy_from_slice(&blk[row..row + ps]);
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![c, t, h, w], out).expect("volume shape")
    }
}

fn check_divisible(axis: Axis, extent: usize, patch: usize) -> Result<()> {
    if extent == 0 || !extent.is_multiple_of(patch) {
        return Err(Error::NonDivisible { axis, extent, patch });
    }
    Ok(())
}

pub fn partition_blocks(video: &VideoTensor, cfg: &FtcConfig) -> Result<BlockGrid> {
    let (pt, ps) = (cfg.p_t, cfg.p_s);
    if pt == 0 || ps == 0 {
        return Err(Error::Config("patch sizes must be positive".into()));
    }
    let (c, t, h, w) = (video.channels(), video.num_frames(), video.height(), video.width());
    check_divisible(Axis::Temporal, t, pt)?;
    check_divisible(Axis::Height, h, ps)?;
    check_divisible(Axis::Width, w, ps)?;
    let (nt, nh, nw) = (t / pt, h / ps, w / ps);
    let src = video.frames().data();
    let mut data = Vec::with_capacity(src.len());
    for u in 0..nt {
        for by in 0..nh {
            for bx in 0..nw {
                for ch in 0..c {
                    for dt in 0..pt {
                        for dy in 0..ps {
                            let off = ((ch * t + u * pt + dt) * h + by * ps + dy) * w + bx * ps;
                            data.extend_from_slice(&src[off..off + ps]);
                        }
                    }
                }
            }
        }
    }
    Ok(BlockGrid {
        blocks: Tensor::new(vec![nt * nh * nw, c, pt, ps, ps], data)?,
        n_temporal: nt,
        n_h: nh,
        n_w: nw,
        channels: c,
        p_t: pt,
        p_s: ps,
        unit_start_frames: (0..nt).map(|u| video.source_frames()[u * pt]).collect(),
    })
}

/// Tokens produced by the consolidation stack, recorded on a tape.
#[derive(Clone, Debug)]
pub struct ConsolidatedRep {
    /// (N'·n_spatial) × embed_dim, unit-major.
    pub tokens: Var,
    /// Post-activation output of the first layer, (N'·n_spatial) × C_1.
    pub z1: Var,
    pub n_units: usize,
    pub n_spatial: usize,
    pub p_t: usize,
    pub unit_start_frames: Vec<usize>,
}

impl ConsolidatedRep {
    pub fn token_count(&self) -> usize {
        self.n_units * self.n_spatial
    }

    /// Start time of each unit in whole seconds.
    pub fn unit_times(&self, fps: f64) -> Vec<u64> {
        self.unit_start_frames.iter().map(|&f| unit_seconds(f, fps)).collect()
    }

    /// Rows of unit `u` in `tokens` and `z1`.
    pub fn unit_rows(&self, u: usize) -> std::ops::Range<usize> {
        u * self.n_spatial..(u + 1) * self.n_spatial
    }
}

/// Layer 1 is a p_t×p_s×p_s kernel with matching stride over raw frames;
/// later layers are 1×1×1 token-mixing convs. Every layer is followed by SiLU.
#[derive(Clone, Debug)]
pub struct Consolidator {
    cfg: FtcConfig,
    in_channels: usize,
    layers: Vec<(ParamId, ParamId)>,
}

impl Consolidator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        cfg: &FtcConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layers());
        let mut ci = in_channels;
        for (l, &co) in cfg.channels.iter().enumerate() {
            let (kt, ks) = if l == 0 { (cfg.p_t, cfg.p_s) } else { (1, 1) };
            let fan_in = ci * kt * ks * ks;
            let k = Tensor::randn(&[co, ci, kt, ks, ks], (2.0 / fan_in as f64).sqrt(), rng);
            let kid = store.add(format!("{prefix}.conv{l}.kernel"), k);
            let bid = store.add(format!("{prefix}.conv{l}.bias"), Tensor::zeros(&[co]));
            layers.push((kid, bid));
            ci = co;
        }
        Ok(Self {
            cfg: cfg.clone(),
            in_channels,
            layers,
        })
    }

    pub fn config(&self) -> &FtcConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// (kernel, bias) parameter ids per layer.
    pub fn layer_params(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn consolidate(&self, grid: &BlockGrid, store: &ParamStore, tape: &mut Tape) -> Result<ConsolidatedRep> {
        if grid.p_t != self.cfg.p_t || grid.p_s != self.cfg.p_s {
            return Err(Error::shape(format!(
                "grid patches ({}, {}) differ from stack patches ({}, {})",
                grid.p_t, grid.p_s, self.cfg.p_t, self.cfg.p_s
            )));
        }
        if grid.channels != self.in_channels {
            return Err(Error::Dimension {
                axis: Axis::Channel,
                detail: format!(
                    "grid has {} channels, stack expects {}",
                    grid.channels, self.in_channels
                ),
            });
        }
        let n = grid.len();
        let mut x = tape.input(grid.to_volume());
        let mut z1 = None;
        for (l, &(kid, bid)) in self.layers.iter().enumerate() {
            let stride = if l == 0 {
                [self.cfg.p_t, self.cfg.p_s, self.cfg.p_s]
            } else {
                [1; 3]
            };
            let k = tape.param(store, kid);
            let b = tape.param(store, bid);
            let y = tape.conv3d(x, k, b, Conv3dSpec::strided(stride))?;
            x = tape.silu(y);
            if l == 0 {
                z1 = Some(self.tokens_of(tape, x, n)?);
            }
        }
        let tokens = self.tokens_of(tape, x, n)?;
        Ok(ConsolidatedRep {
            tokens,
            z1: z1.expect("at least one layer"),
            n_units: grid.n_temporal,
            n_spatial: grid.n_spatial(),
            p_t: grid.p_t,
            unit_start_frames: grid.unit_start_frames.clone(),
        })
    }

    /// Convenience: partition then consolidate.
    pub fn encode(&self, video: &VideoTensor, store: &ParamStore, tape: &mut Tape) -> Result<ConsolidatedRep> {
        let grid = partition_blocks(video, &self.cfg)?;
        self.consolidate(&grid, store, tape)
    }

    /// D × N'×h×w feature map to an N × D token matrix.
    fn tokens_of(&self, tape: &mut Tape, fmap: Var, n: usize) -> Result<Var> {
        let d = tape.value(fmap).shape()[0];
        let flat = tape.reshape(fmap, &[d, n])?;
        tape.transpose(flat)
    }
}

pub const TIMESTAMP_TEMPLATE: &str = "timestamp: {t} seconds";

pub fn render_timestamp(seconds: u64) -> String {
    TIMESTAMP_TEMPLATE.replace("{t}", &seconds.to_string())
}

/// Whole seconds elapsed before 0-based frame `frame`.
pub fn unit_seconds(frame: usize, fps: f64) -> u64 {
    // guard against 0.9999… from float division of exact multiples
    let s = frame as f64 / fps;
    let r = s.round();
    if (s - r).abs() < 1e-9 {
        r as u64
    } else {
        s.floor() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqItem {
    Text(u32),
    /// Row of the visual token matrix.
    Visual(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitSpan {
    /// Item range of the timestamp group (empty without timestamps).
    pub timestamp: std::ops::Range<usize>,
    pub visual: std::ops::Range<usize>,
}

/// `[T_1; V_1; …; T_N'; V_N']` with visual payloads held on a tape.
#[derive(Clone, Debug)]
pub struct InterleavedSequence {
    pub items: Vec<SeqItem>,
    pub units: Vec<UnitSpan>,
    pub visual: Var,
    pub n_spatial: usize,
    pub p_t: usize,
    /// Source frame index (0-based) of each unit's first frame.
    pub unit_start_frames: Vec<usize>,
}

impl InterleavedSequence {
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn text_ids(&self) -> Vec<u32> {
        self.items
            .iter()
            .filter_map(|i| match i {
                SeqItem::Text(t) => Some(*t),
                SeqItem::Visual(_) => None,
            })
            .collect()
    }
}

fn interleave(rep: &ConsolidatedRep, stamps: Option<(f64, &Tokenizer)>) -> Result<InterleavedSequence> {
    if rep.n_units == 0 {
        return Err(Error::EmptySequence);
    }
    let mut items = Vec::new();
    let mut units = Vec::with_capacity(rep.n_units);
    for u in 0..rep.n_units {
        let ts_start = items.len();
        if let Some((fps, tok)) = stamps {
            let text = render_timestamp(unit_seconds(rep.unit_start_frames[u], fps));
            items.extend(tok.encode(&text)?.into_iter().map(SeqItem::Text));
        }
        let v_start = items.len();
        items.extend(rep.unit_rows(u).map(SeqItem::Visual));
        units.push(UnitSpan {
            timestamp: ts_start..v_start,
            visual: v_start..items.len(),
        });
    }
    Ok(InterleavedSequence {
        items,
        units,
        visual: rep.tokens,
        n_spatial: rep.n_spatial,
        p_t: rep.p_t,
        unit_start_frames: rep.unit_start_frames.clone(),
    })
}

pub fn interleave_timestamps(rep: &ConsolidatedRep, fps: f64, tok: &Tokenizer) -> Result<InterleavedSequence> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    interleave(rep, Some((fps, tok)))
}

/// Visual tokens grouped by unit with no timestamp groups.
pub fn interleave_plain(rep: &ConsolidatedRep) -> Result<InterleavedSequence> {
    interleave(rep, None)
}

/// Reads back `(unit, seconds)` pairs, units 1-based. Seconds must not
/// decrease; equal consecutive values occur when a unit is shorter than a
/// second.
pub fn parse_timestamps(seq: &InterleavedSequence, tok: &Tokenizer) -> Result<Vec<(usize, u64)>> {
    if seq.items.is_empty() {
        return Err(Error::EmptySequence);
    }
    let id = |w: &str| tok.id(w).ok_or_else(|| Error::Vocab(w.to_string()));
    let (ts, colon, secs) = (id("timestamp")?, id(":")?, id("seconds")?);
    let expect = |i: usize, want: u32, what: &str| -> Result<()> {
        match seq.items.get(i) {
            Some(SeqItem::Text(t)) if *t == want => Ok(()),
            _ => Err(Error::Parse {
                index: i,
                reason: format!("expected `{what}`"),
            }),
        }
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < seq.items.len() {
        expect(i, ts, "timestamp")?;
        expect(i + 1, colon, ":")?;
        let mut j = i + 2;
        let mut value: Option<u64> = None;
        while let Some(SeqItem::Text(t)) = seq.items.get(j) {
            match tok.digit_value(*t) {
                Some(d) => {
                    let v = value.unwrap_or(0);
                    value = Some(v.checked_mul(10).and_then(|v| v.checked_add(d)).ok_or(Error::Parse {
                        index: j,
                        reason: "timestamp overflows".into(),
                    })?);
                    j += 1;
                }
                None => break,
            }
        }
        let value = value.ok_or(Error::Parse {
            index: j,
            reason: "expected digits".into(),
        })?;
        expect(j, secs, "seconds")?;
        j += 1;
        let v_start = j;
        while let Some(SeqItem::Visual(_)) = seq.items.get(j) {
            j += 1;
        }
        if j == v_start {
            return Err(Error::Parse {
                index: j,
                reason: "timestamp group without visual tokens".into(),
            });
        }
        let unit = out.len() + 1;
        if let Some(&(_, prev)) = out.last() {
            if value < prev {
                return Err(Error::NonMonotonic {
                    unit,
                    previous: prev,
                    current: value,
                });
            }
        }
        out.push((unit, value));
        i = j;
    }
    Ok(out)
}

/// Retriever g: each compressed token, with its temporal neighbours at the
/// same spatial slot as context, is mapped to a prediction of the
/// pre-compression token at its position (linear, SiLU, linear).
#[derive(Clone, Debug)]
pub struct RetrievalHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    embed_dim: usize,
    target_dim: usize,
}

impl RetrievalHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        embed_dim: usize,
        hidden: usize,
        target_dim: usize,
        rng: &mut R,
    ) -> Self {
        let d_in = 3 * embed_dim;
        let w1 = store.add(
            format!("{prefix}.w1"),
            Tensor::randn(&[d_in, hidden], (1.0 / d_in as f64).sqrt(), rng),
        );
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
        let w2 = store.add(
            format!("{prefix}.w2"),
            Tensor::randn(&[hidden, target_dim], (1.0 / hidden as f64).sqrt(), rng),
        );
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(&[target_dim]));
        Self {
            w1,
            b1,
            w2,
            b2,
            embed_dim,
            target_dim,
        }
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// `tokens` is (n_units·n_spatial) × embed_dim, unit-major.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        n_units: usize,
        n_spatial: usize,
    ) -> Result<Var> {
        let (n, d) = tape.value(tokens).dims2()?;
        if n != n_units * n_spatial || d != self.embed_dim {
            return Err(Error::shape(format!(
                "retriever input {n}×{d}, expected {}×{}",
                n_units * n_spatial,
                self.embed_dim
            )));
        }
        let zero = tape.input(Tensor::zeros(&[1, d]));
        let padded = tape.concat_rows(&[tokens, zero])?;
        let prev: Vec<usize> = (0..n).map(|r| if r >= n_spatial { r - n_spatial } else { n }).collect();
        let next: Vec<usize> = (0..n)
            .map(|r| if r + n_spatial < n { r + n_spatial } else { n })
            .collect();
        let p = tape.gather_rows(padded, &prev)?;
        let q = tape.gather_rows(padded, &next)?;
        let ctx = tape.concat_cols(&[p, tokens, q])?;
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let h = tape.linear(ctx, w1, b1)?;
        let h = tape.silu(h);
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        tape.linear(h, w2, b2)
    }
}

#[derive(Clone, Debug)]
pub struct RetrievalOutcome {
    pub loss: Var,
    /// Masked temporal units (0-based, sorted).
    pub masked_units: Vec<usize>,
    /// Pre-compression token rows in M (sorted).
    pub sampled: Vec<usize>,
    /// True when no target survived the masking restriction; `loss` is 0.
    pub empty: bool,
}

/// Zeroes the compressed tokens of a random ρ-fraction of units and scores
/// the retriever's reconstruction of a random subset of those units'
/// first-layer tokens by summed squared error. Gradients reach the
/// consolidation stack through both the prediction and the targets.
pub fn retrieval_loss<R: Rng + ?Sized>(
    rep: &ConsolidatedRep,
    head: &RetrievalHead,
    cfg: &FtcConfig,
    store: &ParamStore,
    rng: &mut R,
    tape: &mut Tape,
) -> Result<RetrievalOutcome> {
    let n_mask = ((cfg.mask_fraction * rep.n_units as f64).round() as usize).min(rep.n_units);
    if n_mask == 0 {
        return Ok(RetrievalOutcome {
            loss: tape.input(Tensor::scalar(0.0)),
            masked_units: Vec::new(),
            sampled: Vec::new(),
            empty: true,
        });
    }
    let mut masked_units = index::sample(rng, rep.n_units, n_mask).into_vec();
    masked_units.sort_unstable();
    let mut factors = vec![1.0; rep.token_count()];
    let mut candidates = Vec::with_capacity(n_mask * rep.n_spatial);
    for &u in &masked_units {
        for r in rep.unit_rows(u) {
            factors[r] = 0.0;
            candidates.push(r);
        }
    }
    let m = ((cfg.sample_fraction * candidates.len() as f64).ceil() as usize).clamp(1, candidates.len());
    let mut sampled: Vec<usize> = index::sample(rng, candidates.len(), m)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    sampled.sort_unstable();

    let masked = tape.mask_rows(rep.tokens, &factors)?;
    let pred = head.forward(tape, store, masked, rep.n_units, rep.n_spatial)?;
    let pred_m = tape.gather_rows(pred, &sampled)?;
    let target_m = tape.gather_rows(rep.z1, &sampled)?;
    let loss = tape.mse(pred_m, target_m)?;
    Ok(RetrievalOutcome {
        loss,
        masked_units,
        sampled,
        empty: false,
    })
}

#[cfg(test)]
mod tests;
