//! Word-level caption vocabulary built from the training corpus.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<start>", "<end>", "<unk>"];
pub const DEFAULT_MIN_FREQ: usize = 5;

/// Lowercases, splits on whitespace and trims punctuation from both ends of
/// each word. Empty fragments are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Whitespace-joined normal form of a caption, as produced by `decode`.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
    min_freq: usize,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(captions: &[S], min_freq: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Empty("cannot build a vocabulary from no captions".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in captions {
            for w in tokenize(c.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, n)| *n >= min_freq)
            .collect();
        // BTreeMap iteration is lexicographic, so a stable sort on count
        // yields (descending count, lexicographic) order.
        kept.sort_by(|a, b| b.1.cmp(&a.1));
        let mut vocab = Self::from_tokens(kept.into_iter().map(|(w, _)| w))?;
        vocab.min_freq = min_freq;
        Ok(vocab)
    }

    /// Rebuilds a vocabulary from its non-special tokens in id order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = BTreeMap::new();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            token_to_id.insert(s.to_string(), i as u32);
        }
        for tok in tokens {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Validation(alloc::format!("invalid token {tok:?}")));
            }
            if token_to_id.contains_key(&tok) {
                return Err(Error::Validation(alloc::format!("duplicate token {tok:?}")));
            }
            token_to_id.insert(tok.clone(), id_to_token.len() as u32);
            id_to_token.push(tok);
        }
        Ok(Self {
            token_to_id,
            id_to_token,
            min_freq: 0,
        })
    }

    pub fn with_min_freq(mut self, min_freq: usize) -> Self {
        self.min_freq = min_freq;
        self
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    /// `start, body.., end` followed by `pad` up to `max_len`; the body is
    /// truncated to `max_len - 2` words.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<u32>> {
        if max_len < 3 {
            return Err(Error::config("encode needs max_len >= 3"));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(START);
        ids.extend(
            tokenize(text)
                .iter()
                .take(max_len - 2)
                .map(|w| self.id(w).unwrap_or(UNK)),
        );
        ids.push(END);
        ids.resize(max_len, PAD);
        Ok(ids)
    }

    /// Drops special tokens and joins the rest with single spaces. Decoding
    /// stops at the first end token.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            if id == END {
                break;
            }
            if (id as usize) < NUM_SPECIALS {
                continue;
            }
            if let Some(t) = self.token(id) {
                words.push(t);
            }
        }
        words.join(" ")
    }
}

/// Number of non-pad tokens in an encoded sequence.
pub fn sequence_length(ids: &[u32]) -> usize {
    ids.iter().position(|&t| t == PAD).unwrap_or(ids.len())
}
