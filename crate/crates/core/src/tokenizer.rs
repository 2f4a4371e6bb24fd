//! Fixed toy subword table for the synthetic corpus.
//!
//! Subwords come in two flavours: word-initial pieces prefixed with `▁`
//! and continuation pieces. The pad token `[P]` and word-boundary token
//! `[W]` take the two highest ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const WORD_START: char = '▁';

const SYLLABLES: [&str; 12] = ["ba", "de", "ki", "lo", "mu", "na", "po", "ri", "su", "te", "vo", "zi"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Subword,
    Pad,
    WordBoundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamToken {
    pub id: TokenId,
    pub kind: TokenKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub subwords: Vec<String>,
    pub words: Vec<String>,
}

impl Vocabulary {
    /// Table with `n_words` synthetic words built from twelve syllables.
    pub fn synthetic(n_words: usize) -> Result<Self> {
        if n_words == 0 || n_words > 64 {
            return Err(Error::Config(format!("word vocabulary size {n_words} outside 1..=64")));
        }
        let mut subwords: Vec<String> = SYLLABLES.iter().map(|s| format!("{WORD_START}{s}")).collect();
        subwords.extend(SYLLABLES.iter().map(|s| s.to_string()));
        let mut words = Vec::with_capacity(n_words);
        // Alternate one- and two-syllable words so lengths vary.
        let mut i = 0usize;
        while words.len() < n_words {
            let a = SYLLABLES[i % 12];
            let round = i / 12;
            let w = if round == 0 && i % 3 == 0 {
                a.to_string()
            } else {
                let b = SYLLABLES[(i * 7 + 5 + round * 5) % 12];
                format!("{a}{b}")
            };
            if !words.contains(&w) {
                words.push(w);
            }
            i += 1;
        }
        Ok(Self { subwords, words })
    }

    pub fn n_subwords(&self) -> usize {
        self.subwords.len()
    }

    pub fn size(&self) -> usize {
        self.subwords.len() + 2
    }

    pub fn pad_id(&self) -> TokenId {
        self.subwords.len() as TokenId
    }

    pub fn word_id(&self) -> TokenId {
        self.subwords.len() as TokenId + 1
    }

    pub fn pad(&self) -> StreamToken {
        StreamToken { id: self.pad_id(), kind: TokenKind::Pad }
    }

    pub fn word_boundary(&self) -> StreamToken {
        StreamToken { id: self.word_id(), kind: TokenKind::WordBoundary }
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        if id == self.pad_id() {
            TokenKind::Pad
        } else if id == self.word_id() {
            TokenKind::WordBoundary
        } else {
            TokenKind::Subword
        }
    }

    pub fn token(&self, id: TokenId) -> StreamToken {
        StreamToken { id, kind: self.kind(id) }
    }

    /// Greedy longest-match segmentation of one word.
    pub fn tokenize_word(&self, word: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut rest = word;
        let mut first = true;
        while !rest.is_empty() {
            let best = self
                .subwords
                .iter()
                .enumerate()
                .filter_map(|(id, s)| {
                    let body = if first {
                        s.strip_prefix(WORD_START)?
                    } else if s.starts_with(WORD_START) {
                        return None;
                    } else {
                        s.as_str()
                    };
                    rest.starts_with(body).then_some((id, body.len()))
                })
                .max_by_key(|&(id, len)| (len, std::cmp::Reverse(id)));
            let Some((id, len)) = best else {
                return Err(Error::UnknownWord(word.to_string()));
            };
            out.push(id as TokenId);
            rest = &rest[len..];
            first = false;
        }
        if out.is_empty() {
            return Err(Error::UnknownWord(word.to_string()));
        }
        Ok(out)
    }

    /// Text contributed by emitting `id` (`▁` rendered as a space).
    pub fn piece_text(&self, id: TokenId) -> String {
        match self.kind(id) {
            TokenKind::Subword => self.subwords[id as usize].replace(WORD_START, " "),
            _ => String::new(),
        }
    }

    /// Concatenate subword text; `[W]` inserts a separator, `[P]` nothing.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            match self.kind(id) {
                TokenKind::Subword => s.push_str(&self.piece_text(id)),
                TokenKind::WordBoundary => s.push(' '),
                TokenKind::Pad => {}
            }
        }
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}
