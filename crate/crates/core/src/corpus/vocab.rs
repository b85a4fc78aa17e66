//! Word-level tokenizer and vocabulary.
//!
//! Text is lowercased and split on whitespace; every ASCII punctuation
//! character becomes its own token. Special tokens written literally (for
//! example `<unk>`) are recognized so that detokenized text tokenizes back to
//! the same ids.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub type TokenId = u32;
pub type CategoryId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const MASK: TokenId = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"];

/// Words every table encoder needs regardless of corpus content.
pub const RESERVED_WORDS: [&str; 3] = ["true", "false", "description"];

/// Splits text into word tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if SPECIALS.contains(&chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    categories: Vec<String>,
    #[serde(skip)]
    word_index: HashMap<String, TokenId>,
    #[serde(skip)]
    category_index: HashMap<String, CategoryId>,
}

impl Vocab {
    /// Builds a vocabulary from word and category frequencies.
    ///
    /// At most `max_size` entries are kept including specials and reserved
    /// words; remaining words are ranked by frequency, ties alphabetically.
    pub fn build<'a>(
        words: impl IntoIterator<Item = &'a str>,
        categories: impl IntoIterator<Item = &'a str>,
        max_size: usize,
    ) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in RESERVED_WORDS {
            list.push(w.to_string());
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|(w, _)| !list.iter().any(|l| l == w)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size.saturating_sub(list.len());
        list.extend(ranked.into_iter().take(room).map(|(w, _)| w.to_string()));
        let cats: BTreeSet<&str> = categories.into_iter().collect();
        Self::from_parts(list, cats.into_iter().map(str::to_string).collect())
    }

    pub fn from_parts(words: Vec<String>, categories: Vec<String>) -> Self {
        let mut v = Self { words, categories, word_index: HashMap::new(), category_index: HashMap::new() };
        v.reindex();
        v
    }

    /// Rebuilds lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.word_index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
        self.category_index =
            self.categories.iter().enumerate().map(|(i, c)| (c.clone(), i as CategoryId)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.words.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn category(&self, id: CategoryId) -> Option<&str> {
        self.categories.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, word: &str) -> TokenId {
        self.word_index.get(word).copied().unwrap_or(UNK)
    }

    pub fn category_id(&self, name: &str) -> Option<CategoryId> {
        self.category_index.get(name).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split_words(text).iter().map(|w| self.token_id(w)).collect()
    }

    /// Space-joined words, dropping padding and sequence delimiters.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&t| t != PAD && t != BOS && t != EOS)
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let mut v: Vocab = serde_json::from_str(s)?;
        v.reindex();
        Ok(v)
    }
}
