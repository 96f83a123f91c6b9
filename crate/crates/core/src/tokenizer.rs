//! Word-level tokenizer for questions, answers and timestamp prompts.
//!
//! Text is lowercased and split on whitespace; punctuation marks and
//! individual decimal digits are tokens of their own, so any integer number
//! of seconds is representable with a fixed vocabulary.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const MAX_VOCAB: usize = 512;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const PUNCT: [char; 6] = [':', '?', '.', ',', '!', ';'];
pub(crate) const TIMESTAMP_WORDS: [&str; 3] = ["timestamp", ":", "seconds"];

/// Splits text into lowercase word, punctuation and single-digit pieces.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_digit() || PUNCT.contains(&ch) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary from every word appearing in `texts`, after the
    /// reserved tokens, the ten digits and the timestamp prompt words.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend((0..10).map(|d| d.to_string()));
        words.extend(TIMESTAMP_WORDS.iter().map(|s| s.to_string()));
        let mut extra: Vec<String> = texts.into_iter().flat_map(split_words).collect();
        extra.sort();
        extra.dedup();
        for w in extra {
            if !words.contains(&w) {
                words.push(w);
            }
        }
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary of {} words exceeds the cap of {MAX_VOCAB}",
                words.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn digit_value(&self, id: u32) -> Option<u64> {
        let w = self.words.get(id as usize)?;
        let mut chars = w.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_digit() => Some(c as u64 - '0' as u64),
            _ => None,
        }
    }

    /// Strict encoding: any unknown word is an error.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(Error::Vocab(w)))
            .collect()
    }

    /// Encoding that maps unknown words to `<unk>`.
    pub fn encode_lossy(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode) on canonical text. Reserved tokens
    /// are dropped; digit runs are joined and punctuation attaches to the
    /// preceding word.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_digit = false;
        for &id in ids {
            if (id as usize) < SPECIALS.len() || id as usize >= self.words.len() {
                continue;
            }
            let w = &self.words[id as usize];
            let is_digit = self.digit_value(id).is_some();
            let is_punct = w.len() == 1 && PUNCT.contains(&w.chars().next().unwrap());
            if !out.is_empty() && !is_punct && !(is_digit && prev_digit) {
                out.push(' ');
            }
            out.push_str(w);
            prev_digit = is_digit;
        }
        out
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.words.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format("vocabulary file lacks reserved tokens".into()));
        }
        Self::from_words(words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::from_texts(["what fluid is visible?", "blood is visible"]).unwrap()
    }

    #[test]
    fn splits_digits_and_punctuation() {
        assert_eq!(
            split_words("Timestamp: 12 seconds"),
            vec!["timestamp", ":", "1", "2", "seconds"]
        );
        assert_eq!(split_words("visible?"), vec!["visible", "?"]);
    }

    #[test]
    fn round_trip_on_vocabulary_text() {
        let t = tok();
        for text in [
            "timestamp: 0 seconds",
            "timestamp: 1024 seconds",
            "what fluid is visible?",
            "blood is visible",
        ] {
            assert_eq!(t.decode(&t.encode(text).unwrap()), text);
        }
    }

    #[test]
    fn unknown_words() {
        let t = tok();
        assert!(matches!(t.encode("purple"), Err(Error::Vocab(w)) if w == "purple"));
        assert_eq!(t.encode_lossy("purple blood"), vec![UNK, t.id("blood").unwrap()]);
    }

    #[test]
    fn reserved_layout() {
        let t = tok();
        assert_eq!(t.word(EOS), "<eos>");
        assert_eq!(t.digit_value(t.id("7").unwrap()), Some(7));
        assert_eq!(t.id("timestamp"), Some(14));
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let t = tok();
        t.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), t);
    }
}
