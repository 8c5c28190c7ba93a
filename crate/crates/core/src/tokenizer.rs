// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level tokenizer over a closed vocabulary.
//!
//! Text is lowercased, punctuation is split into single-character tokens and
//! line breaks become `<nl>`. Anything not in the vocabulary maps to `<unk>`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const NL: &str = "<nl>";
pub const SPECIALS: [&str; 3] = [UNK, BOS, NL];

pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const NL_ID: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

/// Splits text into word and punctuation pieces (before vocabulary lookup).
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        if i > 0 {
            out.push(NL.to_string());
        }
        let mut word = String::new();
        for ch in line.chars() {
            if ch.is_alphanumeric() || ch == '\'' && !word.is_empty() {
                word.extend(ch.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

impl Vocab {
    /// Specials first, then `words` in first-seen order with duplicates
    /// dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = list.iter().cloned().collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if seen.insert(w.clone()) {
                list.push(w);
            }
        }
        Vocab::from(list)
    }

    /// Vocabulary covering every piece of every text.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::new(texts.into_iter().flat_map(split_words))
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

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Ids of ordinary (non-special) tokens.
    pub fn regular_ids(&self) -> std::ops::Range<u32> {
        SPECIALS.len() as u32..self.words.len() as u32
    }

    /// Token ids plus the number of pieces routed to `<unk>`.
    pub fn encode_counting(&self, text: &str) -> (Vec<u32>, usize) {
        let mut unknown = 0;
        let ids = split_words(text)
            .iter()
            .map(|w| {
                self.id(w).unwrap_or_else(|| {
                    unknown += 1;
                    UNK_ID
                })
            })
            .collect();
        (ids, unknown)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_counting(text).0
    }

    /// Encodes and fails on any out-of-vocabulary piece.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<u32>> {
        split_words(text)
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::InvalidInput(format!("`{w}` is not in the vocabulary")))
            })
            .collect()
    }

    /// Space-joined words with `<nl>` rendered as a line break.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id).unwrap_or(UNK);
            if w == NL {
                out.push('\n');
                continue;
            }
            if !out.is_empty() && !out.ends_with('\n') {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation_and_lines() {
        assert_eq!(
            split_words("Noor sees it.\nAnswer: a) yes"),
            vec!["noor", "sees", "it", ".", NL, "answer", ":", "a", ")", "yes"]
        );
        assert_eq!(split_words("didn't"), vec!["didn't"]);
    }

    #[test]
    fn unknown_words_are_counted() {
        let v = Vocab::new(["the", "cat"]);
        let (ids, unk) = v.encode_counting("The dog");
        assert_eq!(ids, vec![v.id("the").unwrap(), UNK_ID]);
        assert_eq!(unk, 1);
        assert!(v.encode_strict("the dog").is_err());
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::new(["x"]);
        assert_eq!(v.id(UNK), Some(UNK_ID));
        assert_eq!(v.id(BOS), Some(BOS_ID));
        assert_eq!(v.id(NL), Some(NL_ID));
        assert_eq!(v.regular_ids(), 3..4);
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::new(["a", "b", "."]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }

    proptest! {
        #[test]
        fn decode_encode_round_trip(ids in prop::collection::vec(3u32..9, 0..30)) {
            let v = Vocab::new(["milk", "jar", ".", ",", "the", "sees"]);
            prop_assert_eq!(v.encode(&v.decode(&ids)), ids);
        }
    }
}
