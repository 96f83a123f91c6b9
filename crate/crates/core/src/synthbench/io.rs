//! Dataset directory layout:
//!
//! ```text
//! manifest             key=value generation parameters and counts
//! vocab.txt            one vocabulary word per line
//! videos/<video>.bin   raw frame files
//! qa/<instance>.txt    key=value question sidecars
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, QaInstance, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

const FORMAT_VERSION: u32 = 1;

pub(crate) fn parse_kv(text: &str, what: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{what} line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn take<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, what: &str) -> Result<T> {
    let raw = kv
        .get(key)
        .ok_or_else(|| Error::Format(format!("{what} lacks `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("{what}: bad value `{raw}` for `{key}`")))
}

fn manifest_text(ds: &Dataset) -> String {
    let c = &ds.config;
    let mut s = String::new();
    let _ = writeln!(s, "format={FORMAT_VERSION}");
    let _ = writeln!(s, "seed={}", c.seed);
    let _ = writeln!(s, "train_videos={}", c.train_videos);
    let _ = writeln!(s, "val_videos={}", c.val_videos);
    let _ = writeln!(s, "test_videos={}", c.test_videos);
    let _ = writeln!(s, "episodes_per_video={}", c.episodes_per_video);
    let _ = writeln!(s, "episode_frames={}", c.episode_frames);
    let _ = writeln!(s, "height={}", c.height);
    let _ = writeln!(s, "width={}", c.width);
    let _ = writeln!(s, "fps={}", c.fps);
    let _ = writeln!(s, "amplitude={}", c.amplitude);
    let _ = writeln!(s, "noise={}", c.noise);
    let _ = writeln!(s, "event_min_frames={}", c.event_min_frames);
    let _ = writeln!(s, "event_max_frames={}", c.event_max_frames);
    let _ = writeln!(s, "out_of_template_rate={}", c.out_of_template_rate);
    let _ = writeln!(s, "video_frames={}", c.video_frames());
    for split in Split::ALL {
        let _ = writeln!(s, "qa_{}={}", split.name(), ds.split(split).len());
    }
    s
}

fn sidecar_text(q: &QaInstance) -> String {
    let intervals: Vec<String> = q.intervals.iter().map(|(a, b)| format!("{a}-{b}")).collect();
    format!(
        "id={}\nvideo={}\ntype={}\nquestion={}\nanswer={}\nkeywords={}\nintervals={}\npolicy={}\ntemplate={}\ntemplate_split={}\nsplit={}\n",
        q.id,
        q.video,
        q.qtype,
        q.question,
        q.answer,
        q.keywords.join(","),
        intervals.join(","),
        q.policy,
        q.template,
        q.template_split.name(),
        q.split,
    )
}

fn parse_sidecar(text: &str, what: &str) -> Result<QaInstance> {
    let kv = parse_kv(text, what)?;
    let intervals = take::<String>(&kv, "intervals", what)?
        .split(',')
        .map(|p| {
            let (a, b) = p
                .split_once('-')
                .ok_or_else(|| Error::Format(format!("{what}: bad interval `{p}`")))?;
            let parse = |x: &str| {
                x.parse::<usize>()
                    .map_err(|_| Error::Format(format!("{what}: bad interval `{p}`")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let keywords: Vec<String> = take::<String>(&kv, "keywords", what)?
        .split(',')
        .filter(|k| !k.is_empty())
        .map(str::to_string)
        .collect();
    if keywords.is_empty() {
        return Err(Error::Format(format!("{what}: empty keyword set")));
    }
    Ok(QaInstance {
        id: take(&kv, "id", what)?,
        video: take(&kv, "video", what)?,
        qtype: take::<String>(&kv, "type", what)?.parse()?,
        question: take(&kv, "question", what)?,
        answer: take(&kv, "answer", what)?,
        keywords,
        intervals,
        policy: take::<String>(&kv, "policy", what)?.parse()?,
        template: take(&kv, "template", what)?,
        template_split: take::<String>(&kv, "template_split", what)?.parse()?,
        split: take::<String>(&kv, "split", what)?.parse()?,
    })
}

/// Writes the dataset. A non-empty `dir` is refused unless `force` is set, in
/// which case the dataset entries inside it are replaced.
pub fn save_dataset(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} is not empty (use --force to overwrite)", dir.display()),
            )));
        }
        for sub in ["videos", "qa"] {
            let p = dir.join(sub);
            if p.is_dir() {
                std::fs::remove_dir_all(&p)?;
            }
        }
    }
    std::fs::create_dir_all(dir.join("videos"))?;
    std::fs::create_dir_all(dir.join("qa"))?;
    std::fs::write(dir.join("manifest"), manifest_text(ds))?;
    ds.tokenizer.save(&dir.join("vocab.txt"))?;
    for split in Split::ALL {
        for id in ds.video_ids(split) {
            ds.video(&id)?.save(&dir.join("videos").join(format!("{id}.bin")))?;
        }
    }
    for q in &ds.qas {
        std::fs::write(dir.join("qa").join(format!("{}.txt", q.id)), sidecar_text(q))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let kv = parse_kv(&std::fs::read_to_string(dir.join("manifest"))?, "manifest")?;
    let version: u32 = take(&kv, "format", "manifest")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format {version}")));
    }
    let m = "manifest";
    let config = SynthConfig {
        seed: take(&kv, "seed", m)?,
        train_videos: take(&kv, "train_videos", m)?,
        val_videos: take(&kv, "val_videos", m)?,
        test_videos: take(&kv, "test_videos", m)?,
        episodes_per_video: take(&kv, "episodes_per_video", m)?,
        episode_frames: take(&kv, "episode_frames", m)?,
        height: take(&kv, "height", m)?,
        width: take(&kv, "width", m)?,
        fps: take(&kv, "fps", m)?,
        amplitude: take(&kv, "amplitude", m)?,
        noise: take(&kv, "noise", m)?,
        event_min_frames: take(&kv, "event_min_frames", m)?,
        event_max_frames: take(&kv, "event_max_frames", m)?,
        out_of_template_rate: take(&kv, "out_of_template_rate", m)?,
    };
    let tokenizer = Tokenizer::load(&dir.join("vocab.txt"))?;
    let mut files: Vec<_> = std::fs::read_dir(dir.join("qa"))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.sort();
    let mut qas = Vec::with_capacity(files.len());
    for f in files {
        if f.extension().is_some_and(|e| e == "txt") {
            qas.push(parse_sidecar(&std::fs::read_to_string(&f)?, &f.display().to_string())?);
        }
    }
    if qas.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset::from_parts(config, qas, tokenizer, dir.to_path_buf()))
}
