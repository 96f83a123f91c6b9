//! Raw frame container and its planar binary file format.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic b"VFR1"
//! u32 T, u32 C, u32 H, u32 W
//! f32 fps
//! T × C × H × W f32 values, frame-major then channel planes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Axis, Error, Result};
use crate::ndcore::Tensor;

const MAGIC: &[u8; 4] = b"VFR1";

/// A C×T×H×W frame stack with its frame rate.
///
/// `source_frames[t]` is the 0-based index of frame `t` in the video it was
/// cut from; a freshly generated or loaded video has `source_frames[t] == t`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    frames: Tensor,
    fps: f64,
    source_frames: Vec<usize>,
}

impl VideoTensor {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::shape(format!("video must be C×T×H×W, got {:?}", frames.shape())));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        let t = frames.shape()[1];
        Ok(Self {
            frames,
            fps,
            source_frames: (0..t).collect(),
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn source_frames(&self) -> &[usize] {
        &self.source_frames
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_frames() as f64 / self.fps
    }

    fn plane(&self) -> usize {
        self.height() * self.width()
    }

    /// Value at channel `c`, 0-based frame `t`, pixel (`y`, `x`).
    pub fn at(&self, c: usize, t: usize, y: usize, x: usize) -> f64 {
        let (tn, h, w) = (self.num_frames(), self.height(), self.width());
        self.frames.data()[((c * tn + t) * h + y) * w + x]
    }

    /// Mean over the pixels of channel `c` in frame `t` (0-based).
    pub fn channel_mean(&self, c: usize, t: usize) -> f64 {
        let p = self.plane();
        let off = (c * self.num_frames() + t) * p;
        self.frames.data()[off..off + p].iter().sum::<f64>() / p as f64
    }

    /// Mean over every channel and pixel of frame `t` (0-based).
    pub fn frame_mean(&self, t: usize) -> f64 {
        (0..self.channels()).map(|c| self.channel_mean(c, t)).sum::<f64>() / self.channels() as f64
    }

    /// Frames at the given 1-based indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (c, t, p) = (self.channels(), self.num_frames(), self.plane());
        let mut data = Vec::with_capacity(c * indices.len() * p);
        for ch in 0..c {
            for &i in indices {
                if i == 0 || i > t {
                    return Err(Error::Dimension {
                        axis: Axis::Temporal,
                        detail: format!("frame {i} outside 1..={t}"),
                    });
                }
                let off = (ch * t + i - 1) * p;
                data.extend_from_slice(&self.frames.data()[off..off + p]);
            }
        }
        Ok(Self {
            frames: Tensor::new(vec![c, indices.len(), self.height(), self.width()], data)?,
            fps: self.fps,
            source_frames: indices.iter().map(|&i| self.source_frames[i - 1]).collect(),
        })
    }

    /// Concatenates videos along time. All parts must share C, H, W and fps.
    pub fn concat(parts: &[VideoTensor]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let (c, h, w) = (first.channels(), first.height(), first.width());
        for p in parts {
            if p.channels() != c || p.height() != h || p.width() != w {
                return Err(Error::shape(format!(
                    "cannot concatenate {}×{}×{} frames with {c}×{h}×{w}",
                    p.channels(),
                    p.height(),
                    p.width()
                )));
            }
            if p.fps != first.fps {
                return Err(Error::shape(format!("fps {} vs {}", p.fps, first.fps)));
            }
        }
        let total: usize = parts.iter().map(|p| p.num_frames()).sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(c * total * plane);
        for ch in 0..c {
            for p in parts {
                let n = p.num_frames() * plane;
                data.extend_from_slice(&p.frames.data()[ch * n..(ch + 1) * n]);
            }
        }
        Self::new(Tensor::new(vec![c, total, h, w], data)?, first.fps)
    }

    /// Drops trailing frames and pixel rows/columns so that T is a multiple of
    /// `p_t` and H, W are multiples of `p_s`.
    pub fn truncate_to_divisible(&self, p_t: usize, p_s: usize) -> Result<Self> {
        let t = self.num_frames() / p_t * p_t;
        let h = self.height() / p_s * p_s;
        let w = self.width() / p_s * p_s;
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::EmptyInput);
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(c * t * h * w);
        for ch in 0..c {
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        data.push(self.at(ch, ti, y, x));
                    }
                }
            }
        }
        Ok(Self {
            frames: Tensor::new(vec![c, t, h, w], data)?,
            fps: self.fps,
            source_frames: self.source_frames[..t].to_vec(),
        })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        for d in [self.num_frames(), self.channels(), self.height(), self.width()] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&(self.fps as f32).to_le_bytes())?;
        let (c, t, p) = (self.channels(), self.num_frames(), self.plane());
        let mut buf = Vec::with_capacity(c * p * 4);
        for ti in 0..t {
            buf.clear();
            for ch in 0..c {
                let off = (ch * t + ti) * p;
                for v in &self.frames.data()[off..off + p] {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a raw frame file".into()));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [t, c, h, w] = dims;
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        let fps = f32::from_le_bytes(b) as f64;
        let p = h * w;
        let mut raw = vec![0u8; t * c * p * 4];
        input.read_exact(&mut raw)?;
        let mut data = vec![0.0; t * c * p];
        for ti in 0..t {
            for ch in 0..c {
                for k in 0..p {
                    let src = ((ti * c + ch) * p + k) * 4;
                    let v = f32::from_le_bytes(raw[src..src + 4].try_into().unwrap());
                    data[(ch * t + ti) * p + k] = v as f64;
                }
            }
        }
        Self::new(Tensor::new(vec![c, t, h, w], data)?, fps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
