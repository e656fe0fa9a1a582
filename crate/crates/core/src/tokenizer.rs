//! Word-level tokenizer with a deterministic vocabulary.
//!
//! Text is lowercased and split into alphanumeric-or-apostrophe runs;
//! every other non-whitespace character is its own token. The vocabulary
//! assigns ids in sorted word order after seven reserved specials, so it is
//! independent of corpus iteration order.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Marks a human turn.
pub const HUMAN: usize = 4;
/// Marks an assistant turn.
pub const ASSISTANT: usize = 5;
/// Placeholder id for positions occupied by projected frame tokens.
pub const FRAME: usize = 6;

const SPECIALS: usize = 7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Builds the vocabulary from a text corpus.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for text in corpus {
            for w in split_words(text) {
                set.insert(w);
            }
        }
        let words: Vec<String> = set.into_iter().collect();
        let mut t = Tokenizer {
            words,
            index: HashMap::new(),
        };
        t.rebuild_index();
        t
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), SPECIALS + i))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        SPECIALS + self.words.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .into_iter()
            .map(|w| *self.index.get(&w).unwrap_or(&UNK))
            .collect()
    }

    /// Renders token ids back to text. Specials are skipped; single
    /// punctuation tokens attach to the preceding word.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let word = match self.word(id) {
                Some(w) => w,
                None => continue,
            };
            let is_punct = word.chars().count() == 1
                && !word.chars().next().unwrap().is_alphanumeric();
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(word);
        }
        out
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        if id < SPECIALS {
            return None;
        }
        self.words.get(id - SPECIALS).map(|s| s.as_str())
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tokenizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut t: Tokenizer = serde_json::from_str(text)
            .map_err(|e| Error::input(format!("malformed tokenizer: {e}")))?;
        t.rebuild_index();
        Ok(t)
    }
}

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            current.push(ch);
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}
