//! Answer metrics on a percent scale: BLEU-4, ROUGE-L, a stem-only METEOR
//! and keyword accuracy.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::synthbench::TemplateSplit;

pub const BLEU4: &str = "BLEU-4";
pub const ROUGE_L: &str = "ROUGE-L";
pub const METEOR: &str = "METEOR-simplified";
pub const KACC: &str = "K-ACC";
pub const METRIC_NAMES: [&str; 4] = [BLEU4, ROUGE_L, METEOR, KACC];

/// Suffixes stripped when aligning unigrams by stem, longest first.
const SUFFIXES: [&str; 7] = ["ing", "ies", "es", "ed", "ly", "er", "s"];
const MIN_STEM: usize = 3;

/// Lowercases, turns punctuation into spaces and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU-4 with uniform weights. Zero n-gram matches for n ≥ 2 are
/// smoothed to 1/(count+1); the brevity penalty is exp(1 − r/c) when the
/// candidate is not longer than the reference. An empty candidate scores 0.
pub fn bleu4<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    let c = candidate.len();
    if c == 0 || reference.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0f64;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total = c.saturating_sub(n - 1);
        let matched: usize = cand
            .iter()
            .map(|(g, &k)| k.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total + 1) as f64
        };
        prod *= p;
    }
    let r = reference.len();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * prod.powf(0.25)
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x.as_ref() == y.as_ref() {
                diag + 1
            } else {
                up.max(row[j])
            };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F1.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    100.0 * 2.0 * p * r / (p + r)
}

pub fn stem(word: &str) -> &str {
    for s in SUFFIXES {
        if let Some(base) = word.strip_suffix(s) {
            if base.len() >= MIN_STEM {
                return base;
            }
        }
    }
    word
}

/// Greedy unigram alignment: exact matches first, then stem matches, each
/// candidate word taking the leftmost unused reference word. Returns
/// (candidate index, reference index) pairs sorted by candidate index.
pub fn align<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs: Vec<Option<usize>> = vec![None; candidate.len()];
    let stages: [fn(&str) -> &str; 2] = [|w| w, stem];
    for key in stages {
        for (i, c) in candidate.iter().enumerate() {
            if pairs[i].is_some() {
                continue;
            }
            let k = key(c.as_ref());
            if let Some(j) = (0..reference.len()).find(|&j| !used[j] && key(reference[j].as_ref()) == k) {
                used[j] = true;
                pairs[i] = Some(j);
            }
        }
    }
    pairs
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect()
}

/// Number of maximal runs of alignment pairs adjacent in both sentences.
pub fn chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// METEOR without synonyms: F_mean = 10PR/(R+9P) scaled by
/// 1 − 0.5·(chunks/matches)³.
pub fn meteor<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    let pairs = align(candidate, reference);
    let m = pairs.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks(&pairs) as f64 / m).powi(3);
    100.0 * fmean * (1.0 - penalty)
}

/// 1 when every keyword occurs as a contiguous token run in the normalized
/// answer.
pub fn keyword_accuracy<S: AsRef<str>>(answer: &str, keywords: &[S]) -> Result<u8> {
    if keywords.is_empty() {
        return Err(Error::Metric("empty keyword set".into()));
    }
    let toks = tokenize(answer);
    let hit = keywords.iter().all(|k| {
        let k = tokenize(k.as_ref());
        !k.is_empty() && toks.windows(k.len()).any(|w| w == k.as_slice())
    });
    Ok(u8::from(hit))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceScore {
    pub id: String,
    pub template_split: TemplateSplit,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub kacc: u8,
    /// Prediction was missing or tokenized to nothing.
    pub empty: bool,
}

impl InstanceScore {
    pub fn value(&self, metric: &str) -> f64 {
        match metric {
            BLEU4 => self.bleu4,
            ROUGE_L => self.rouge_l,
            METEOR => self.meteor,
            _ => 100.0 * self.kacc as f64,
        }
    }
}

/// Scores one prediction against its reference answer and keywords.
pub fn score_instance(
    id: &str,
    template_split: TemplateSplit,
    prediction: &str,
    reference: &str,
    keywords: &[String],
) -> Result<InstanceScore> {
    let c = tokenize(prediction);
    let r = tokenize(reference);
    Ok(InstanceScore {
        id: id.to_string(),
        template_split,
        bleu4: bleu4(&c, &r),
        rouge_l: rouge_l(&c, &r),
        meteor: meteor(&c, &r),
        kacc: keyword_accuracy(prediction, keywords)?,
        empty: c.is_empty(),
    })
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Metric means per template split plus the pooled mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub instances: Vec<InstanceScore>,
    /// (split label, metric, value rounded to 2 decimals).
    pub rows: Vec<(String, &'static str, f64)>,
}

impl EvalReport {
    pub fn new(instances: Vec<InstanceScore>) -> Self {
        let mut rows = Vec::new();
        let groups: [(&str, Option<TemplateSplit>); 3] = [
            ("all", None),
            (TemplateSplit::In.name(), Some(TemplateSplit::In)),
            (TemplateSplit::Out.name(), Some(TemplateSplit::Out)),
        ];
        for (label, filter) in groups {
            let sel: Vec<&InstanceScore> = instances
                .iter()
                .filter(|s| filter.is_none_or(|f| s.template_split == f))
                .collect();
            if sel.is_empty() {
                continue;
            }
            for m in METRIC_NAMES {
                let mean = sel.iter().map(|s| s.value(m)).sum::<f64>() / sel.len() as f64;
                rows.push((label.to_string(), m, round2(mean)));
            }
        }
        Self { instances, rows }
    }

    pub fn get(&self, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(s, m, _)| s == split && *m == metric)
            .map(|r| r.2)
    }

    pub fn empty_predictions(&self) -> usize {
        self.instances.iter().filter(|s| s.empty).count()
    }

    /// CSV with header `split,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,metric,value\n");
        for (split, m, v) in &self.rows {
            let _ = writeln!(s, "{split},{m},{v:.2}");
        }
        s
    }
}

/// Parses `id<TAB>answer` lines; blank lines are skipped and a line without a
/// tab is an empty answer.
pub fn parse_predictions(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.split_once('\t') {
            Some((id, a)) => (id.trim().to_string(), a.trim().to_string()),
            None => (l.trim().to_string(), String::new()),
        })
        .collect()
}

pub fn format_predictions<'a>(preds: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut s = String::new();
    for (id, a) in preds {
        let _ = writeln!(s, "{id}\t{a}");
    }
    s
}
