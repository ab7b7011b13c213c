// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";

/// Word-level vocabulary over a closed token set.
///
/// Text is split on whitespace and the punctuation marks `, . ? ! : ;` are
/// peeled off into their own tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary containing `<bos>` and every word of `texts`, in
    /// first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = vec![BOS.to_string()];
        let mut index = HashMap::from([(BOS.to_string(), 0)]);
        for text in texts {
            for word in split_words(text) {
                if !index.contains_key(word) {
                    index.insert(word.to_string(), tokens.len() as u32);
                    tokens.push(word.to_string());
                }
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> u32 {
        0
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Encodes text without a leading `<bos>`.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        split_words(text).map(|w| self.id(w)).collect()
    }

    /// Encodes text with a leading `<bos>`.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = vec![self.bos()];
        ids.extend(self.encode(text)?);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

const PUNCT: &[char] = &[',', '.', '?', '!', ':', ';'];

/// Splits text into word tokens.
pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|chunk| {
        let mut parts = Vec::new();
        let trimmed_start = chunk.trim_start_matches(PUNCT);
        for (i, _) in chunk[..chunk.len() - trimmed_start.len()].char_indices() {
            parts.push(&chunk[i..i + 1]);
        }
        let core = trimmed_start.trim_end_matches(PUNCT);
        if !core.is_empty() {
            parts.push(core);
        }
        let tail = &trimmed_start[core.len()..];
        for (i, _) in tail.char_indices() {
            parts.push(&tail[i..i + 1]);
        }
        parts
    })
}
