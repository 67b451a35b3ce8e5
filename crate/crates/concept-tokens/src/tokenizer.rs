//! Word-level tokenizer for the tiny built-in backend.
//!
//! Registered special tokens (chat markers, concept tokens) are matched
//! atomically before any splitting, so a concept marker always maps to a
//! single id. Everything else splits on whitespace with punctuation peeled
//! into separate tokens. Decoding normalizes whitespace: words are joined
//! with single spaces, closing punctuation attaches to the previous token
//! and `(` to the next.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const SYSTEM_MARK: &str = "<|system|>";
pub const USER_MARK: &str = "<|user|>";
pub const ASSISTANT_MARK: &str = "<|assistant|>";

const CLOSING_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', ')', '"', '\''];
const OPENING_PUNCT: &[char] = &['('];

#[derive(Debug, Clone)]
pub struct WordTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// Strings matched atomically, longest first.
    specials: Vec<String>,
}

impl WordTokenizer {
    /// Build a vocabulary from the given texts: the fixed specials first,
    /// then the sorted unique word/punctuation tokens of the texts.
    pub fn build(texts: &[&str]) -> Self {
        let mut tok = WordTokenizer {
            vocab: Vec::new(),
            index: HashMap::new(),
            specials: Vec::new(),
        };
        for s in [UNK, EOS, SYSTEM_MARK, USER_MARK, ASSISTANT_MARK] {
            tok.push_token(s);
            tok.specials.push(s.to_string());
        }
        let mut words: Vec<String> = texts
            .iter()
            .flat_map(|t| split_words(t))
            .collect();
        words.sort();
        words.dedup();
        for w in words {
            if tok.index.contains_key(&w) {
                continue;
            }
            tok.push_token(&w);
        }
        tok.sort_specials();
        tok
    }

    fn push_token(&mut self, s: &str) -> u32 {
        let id = self.vocab.len() as u32;
        self.vocab.push(s.to_string());
        self.index.insert(s.to_string(), id);
        id
    }

    fn sort_specials(&mut self) {
        self.specials.sort_by_key(|s| std::cmp::Reverse(s.len()));
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn unk_id(&self) -> u32 {
        self.index[UNK]
    }

    pub fn eos_id(&self) -> u32 {
        self.index[EOS]
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.vocab
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Register a new atomic special token with a fresh id.
    pub fn add_special(&mut self, token: &str) -> Result<u32> {
        if self.index.contains_key(token) {
            return Err(Error::TokenExists(token.to_string()));
        }
        let id = self.push_token(token);
        self.specials.push(token.to_string());
        self.sort_specials();
        Ok(id)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        self.encode_into(text, &mut ids);
        ids
    }

    fn encode_into(&self, text: &str, ids: &mut Vec<u32>) {
        let mut rest = text;
        while !rest.is_empty() {
            // earliest special occurrence, longest first on ties
            let mut best: Option<(usize, &str)> = None;
            for sp in &self.specials {
                if let Some(pos) = rest.find(sp.as_str()) {
                    match best {
                        Some((bpos, _)) if bpos <= pos => {}
                        _ => best = Some((pos, sp)),
                    }
                }
            }
            match best {
                Some((pos, sp)) => {
                    self.encode_plain(&rest[..pos], ids);
                    ids.push(self.index[sp]);
                    rest = &rest[pos + sp.len()..];
                }
                None => {
                    self.encode_plain(rest, ids);
                    break;
                }
            }
        }
    }

    fn encode_plain(&self, text: &str, ids: &mut Vec<u32>) {
        for w in split_words(text) {
            ids.push(self.index.get(&w).copied().unwrap_or_else(|| self.unk_id()));
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut glue_next = false; // previous token was opening punctuation
        for &id in ids {
            let tok = self.token(id);
            let is_closing = tok.chars().count() == 1
                && tok.chars().next().map(|c| CLOSING_PUNCT.contains(&c)) == Some(true);
            if out.is_empty() || glue_next || is_closing {
                out.push_str(tok);
            } else {
                out.push(' ');
                out.push_str(tok);
            }
            glue_next = tok.chars().count() == 1
                && tok.chars().next().map(|c| OPENING_PUNCT.contains(&c)) == Some(true);
        }
        out
    }
}

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = raw;
        let mut leading = Vec::new();
        while let Some(c) = word.chars().next() {
            if OPENING_PUNCT.contains(&c) {
                leading.push(c.to_string());
                word = &word[c.len_utf8()..];
            } else {
                break;
            }
        }
        let mut trailing = Vec::new();
        while let Some(c) = word.chars().last() {
            if CLOSING_PUNCT.contains(&c) {
                trailing.push(c.to_string());
                word = &word[..word.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.extend(leading);
        if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}
