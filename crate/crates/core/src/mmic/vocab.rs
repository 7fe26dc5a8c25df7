//! Closed vocabulary and tokenizer.
//!
//! Token ids are positions in the word list; the first entries are the pad,
//! unknown, and separator specials. Tokenization lowercases, splits on
//! whitespace, and treats commas as standalone tokens.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SEP: u32 = 2;

/// Maximum prompt length in tokens (including padding).
pub const N_T_MAX: usize = 32;

const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<sep>"];

const WORDS: &[&str] = &[
    ",",
    // wrapper
    "cinematic", "photo", "bokeh", "4k",
    // people and scenes
    "a", "an", "the", "of", "and", "with", "no", "in", "at", "on",
    "man", "woman", "person", "portrait", "face",
    "park", "city", "beach", "office", "studio", "sunset", "garden", "street",
    "library", "mountain", "forest", "kitchen",
    "chef", "firefighter", "doctor", "artist", "teacher", "pilot",
    "outfit", "uniform", "suit", "dress", "hat", "scarf",
    "wearing", "smiling", "standing", "sitting", "young", "old",
    // facial description
    "round", "oval", "narrow", "wide", "thin", "small", "medium", "large", "big",
    "close-set", "wide-set",
    "eyes", "ears", "nose", "mouth", "skin", "hair", "glasses",
    "light", "dark", "pale", "deep", "blonde", "brown",
    // extra texture words kept for prompt variety
    "red", "blue", "green", "white", "black", "gray",
    "bright", "soft", "warm", "cool", "natural", "clean",
    "background", "day", "night", "morning", "evening", "summer", "winter",
    "style", "look", "shot", "scene", "color", "tone",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let words: Vec<String> = SPECIALS
            .iter()
            .chain(WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        Vocabulary::from_words(words)
    }
}

impl Vocabulary {
    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    fn split(text: &str) -> Vec<String> {
        text.to_lowercase()
            .replace(',', " , ")
            .split_whitespace()
            .map(|s| s.to_string())
            .collect()
    }

    /// Tokenize; unknown words map to the unknown token.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        Self::split(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Words of `text` that are not in the vocabulary.
    pub fn unknown_words(&self, text: &str) -> Vec<String> {
        Self::split(text)
            .into_iter()
            .filter(|w| self.id(w).is_none())
            .collect()
    }

    /// Reconstruct text from tokens, skipping padding.
    pub fn detokenize(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One word per line, order = token id.
    pub fn to_file_contents(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_contents(contents: &str) -> Result<Self> {
        let words: Vec<String> = contents.lines().map(|l| l.to_string()).collect();
        if words.len() < SPECIALS.len() + 1 {
            return Err(Error::config("vocabulary file too short"));
        }
        Ok(Vocabulary::from_words(words))
    }
}

/// A tokenized prompt, padded to [`N_T_MAX`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub active_len: usize,
    pub source_text: String,
}

impl Prompt {
    /// Tokenize and pad; truncates from the right if the text is too long.
    pub fn new(text: &str, vocab: &Vocabulary) -> Prompt {
        let mut tokens = vocab.tokenize(text);
        if tokens.len() > N_T_MAX {
            log::debug!("prompt truncated from {} to {N_T_MAX} tokens", tokens.len());
            tokens.truncate(N_T_MAX);
        }
        let active_len = tokens.len();
        tokens.resize(N_T_MAX, PAD);
        Prompt { tokens, active_len, source_text: text.to_string() }
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..N_T_MAX).map(|i| i < self.active_len).collect()
    }

    pub fn active_tokens(&self) -> &[u32] {
        &self.tokens[..self.active_len]
    }
}

/// Default prompt wrapper applied to every scene prompt.
pub fn wrap_scene(scene: &str) -> String {
    format!("cinematic photo, {scene}, bokeh, 4k")
}

/// Negative prompt recorded for configuration completeness. The sampler has
/// no negative-prompt pathway: the unconditional guidance branch uses the
/// zero-text stream instead.
pub const DEFAULT_NEGATIVE_PROMPT: &str =
    "monochrome, lower, bad anatomy, worst quality, low quality, blurry";

/// Append a separator and the description to the prompt, preserving the
/// original as a strict prefix. The description (never the original) is
/// truncated if the result would exceed [`N_T_MAX`].
pub fn augment_prompt(original: &Prompt, description: &str, vocab: &Vocabulary) -> Prompt {
    let mut tokens = original.active_tokens().to_vec();
    tokens.push(SEP);
    let desc_tokens = vocab.tokenize(description);
    let budget = N_T_MAX.saturating_sub(tokens.len());
    if desc_tokens.len() > budget {
        log::debug!(
            "description truncated from {} to {budget} tokens",
            desc_tokens.len()
        );
    }
    tokens.extend(desc_tokens.into_iter().take(budget));
    let active_len = tokens.len();
    tokens.resize(N_T_MAX, PAD);
    let source_text = if description.is_empty() {
        original.source_text.clone()
    } else {
        format!("{} <sep> {description}", original.source_text)
    };
    Prompt { tokens, active_len, source_text }
}
