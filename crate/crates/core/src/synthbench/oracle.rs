use super::{QuestionType, DEPTH_CHANNEL, LIGHTING_OFFSET, MARKER_CHANNEL, SCENE_CHANNEL};
use crate::error::{Error, Result};
use crate::video::VideoTensor;

/// Mean of channel `c` minus the scene channel in frame `t` (0-based); this
/// removes the global lighting offset.
fn excess(v: &VideoTensor, c: usize, t: usize) -> f64 {
    v.channel_mean(c, t) - v.channel_mean(SCENE_CHANNEL, t)
}

fn quadrant_mean(v: &VideoTensor, c: usize, t: usize, q: usize) -> f64 {
    let (h, w) = (v.height(), v.width());
    let (qy, qx) = (q / 2, q % 2);
    let mut s = 0.0;
    for y in qy * h / 2..(qy + 1) * h / 2 {
        for x in qx * w / 2..(qx + 1) * w / 2 {
            s += v.at(c, t, y, x);
        }
    }
    s / (h * w / 4) as f64
}

/// Reads the answer to a question of type `qtype` off the pixels of `video`,
/// for an event amplitude of `amplitude`. Fails when the evidence is absent
/// from the frames given.
pub fn oracle_answer(video: &VideoTensor, qtype: QuestionType, amplitude: f64) -> Result<String> {
    let t = video.num_frames();
    let missing = || Error::Label(format!("no {qtype} evidence in {t} frames"));
    match qtype {
        QuestionType::Lighting => {
            let m = (0..t).map(|f| video.channel_mean(SCENE_CHANNEL, f)).sum::<f64>() / t as f64;
            let level = if m < -LIGHTING_OFFSET / 2.0 {
                0
            } else if m > LIGHTING_OFFSET / 2.0 {
                2
            } else {
                1
            };
            Ok(qtype.answer(level))
        }
        QuestionType::PhaseOrder => {
            let marks: Vec<usize> = (0..t)
                .filter(|&f| excess(video, MARKER_CHANNEL, f) > amplitude / 2.0)
                .collect();
            let first = *marks.first().ok_or_else(missing)?;
            let last = *marks.last().unwrap();
            if first == 0 || last + 1 >= t {
                return Err(missing());
            }
            let before = (0..first).map(|f| excess(video, DEPTH_CHANNEL, f)).sum::<f64>() / first as f64;
            let after = (last + 1..t).map(|f| excess(video, DEPTH_CHANNEL, f)).sum::<f64>() / (t - last - 1) as f64;
            Ok(qtype.answer(usize::from(after < before)))
        }
        _ => {
            let c = qtype.channel().expect("sparse type");
            let frames: Vec<usize> = (0..t).filter(|&f| excess(video, c, f) > amplitude / 8.0).collect();
            if frames.is_empty() {
                return Err(missing());
            }
            let score = |q: usize| frames.iter().map(|&f| quadrant_mean(video, c, f, q)).sum::<f64>();
            let best = (0..4).fold(0, |b, q| if score(q) > score(b) { q } else { b });
            Ok(qtype.answer(best))
        }
    }
}
