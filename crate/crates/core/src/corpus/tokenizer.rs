//! Word-level tokenizer with a corpus-built vocabulary.
//!
//! Vocabulary files hold one token per line; line number is the token id and
//! the first five lines are the special tokens.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TEXT_LEN: usize = 77;
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"];

/// Exactly [`TEXT_LEN`] ids: BOS, words, EOS, then PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn eos_position(&self) -> usize {
        self.ids.iter().position(|&id| id == EOS).unwrap_or(TEXT_LEN - 1)
    }

    /// Positions holding word tokens (between BOS and EOS).
    pub fn word_positions(&self) -> std::ops::Range<usize> {
        1..self.eos_position()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Lower-cases and splits on whitespace; punctuation becomes its own token.
    pub fn split_words(caption: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in caption.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() || ch == '\'' {
                cur.push(ch);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                if !ch.is_whitespace() {
                    out.push(ch.to_string());
                }
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    /// Builds a vocabulary from captions; words are sorted for determinism.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = captions.into_iter().flat_map(Self::split_words).collect();
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIAL_TOKENS.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("specials present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(Error::Data("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(SPECIAL_TOKENS[UNK as usize])
    }

    /// First id that is an ordinary word.
    pub fn first_word_id(&self) -> u32 {
        SPECIAL_TOKENS.len() as u32
    }

    pub fn tokenize(&self, caption: &str) -> Result<TokenSequence> {
        let words = Self::split_words(caption);
        if words.is_empty() {
            return Err(Error::Data("cannot tokenize an empty caption".into()));
        }
        let mut ids = Vec::with_capacity(TEXT_LEN);
        ids.push(BOS);
        ids.extend(words.iter().take(TEXT_LEN - 2).map(|w| self.id(w)));
        ids.push(EOS);
        ids.resize(TEXT_LEN, PAD);
        Ok(TokenSequence { ids })
    }
}
