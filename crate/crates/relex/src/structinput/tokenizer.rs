//! Greedy longest-match sub-word tokenizer over a fixed vocabulary, with a
//! set of atomic tokens that are never split. Continuation pieces carry the
//! conventional "##" prefix. Vocabulary files are one token per line.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

#[derive(Debug, Clone)]
pub struct SubwordTokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    atomic: HashSet<String>,
    /// Vocabulary size before task-specific tokens were appended.
    base_len: usize,
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
}

impl SubwordTokenizer {
    fn build(tokens: Vec<String>) -> Result<SubwordTokenizer> {
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let lookup = |name: &str| -> Result<u32> {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks {name}")))
        };
        let pad = lookup(PAD_TOKEN)?;
        let unk = lookup(UNK_TOKEN)?;
        let cls = lookup(CLS_TOKEN)?;
        let sep = lookup(SEP_TOKEN)?;
        let atomic: HashSet<String> =
            [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN].iter().map(|s| s.to_string()).collect();
        let base_len = tokens.len();
        Ok(SubwordTokenizer {
            tokens,
            ids,
            atomic,
            base_len,
            pad,
            unk,
            cls,
            sep,
        })
    }

    /// Builds a vocabulary from an explicit piece list. The four bookkeeping
    /// tokens are prepended when absent.
    pub fn from_pieces<I, S>(pieces: I) -> Result<SubwordTokenizer>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> =
            [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN].iter().map(|s| s.to_string()).collect();
        let reserved: HashSet<&str> = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN].into();
        for p in pieces {
            let p = p.as_ref();
            if !reserved.contains(p) {
                tokens.push(p.to_string());
            }
        }
        Self::build(tokens)
    }

    /// Whole-word vocabulary over a corpus word list, deduplicated and sorted.
    pub fn from_words<I, S>(words: I) -> Result<SubwordTokenizer>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut distinct: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        distinct.sort();
        Self::from_pieces(distinct)
    }

    pub fn from_vocab_file(path: &Path) -> Result<SubwordTokenizer> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Self::build(tokens)
    }

    pub fn write_vocab_file(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.tokens.len() * 8);
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Appends task-specific tokens as atomic entries. Returns the id range
    /// they occupy. Tokens already present are a configuration error.
    pub fn add_atomic_tokens(&mut self, added: &[String]) -> Result<std::ops::Range<u32>> {
        let start = self.tokens.len() as u32;
        for t in added {
            if self.ids.contains_key(t) {
                return Err(Error::Config(format!("special token {t:?} collides with vocabulary")));
            }
            self.ids.insert(t.clone(), self.tokens.len() as u32);
            self.tokens.push(t.clone());
            self.atomic.insert(t.clone());
        }
        Ok(start..self.tokens.len() as u32)
    }

    /// Marks already-present vocabulary entries as atomic (used when loading
    /// a vocabulary file that was extended in a previous run).
    pub fn mark_atomic(&mut self, tokens: &[String]) -> Result<()> {
        for t in tokens {
            if !self.ids.contains_key(t) {
                return Err(Error::Config(format!("token {t:?} missing from vocabulary")));
            }
            self.atomic.insert(t.clone());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn is_atomic(&self, token: &str) -> bool {
        self.atomic.contains(token)
    }

    /// Splits one word into sub-word ids. Atomic tokens map to their single
    /// id; words with no decomposition map to a single [UNK].
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if let Some(&id) = self.ids.get(word) {
            if self.atomic.contains(word) {
                return vec![id];
            }
        }
        // char-boundary table so slicing stays valid on multi-byte text
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        if bounds.len() <= 1 {
            return vec![self.unk];
        }
        let mut pieces = Vec::new();
        let mut start = 0usize;
        while start < bounds.len() - 1 {
            let mut matched = None;
            for end in (start + 1..bounds.len()).rev() {
                let slice = &word[bounds[start]..bounds[end]];
                let candidate: std::borrow::Cow<'_, str> = if start == 0 {
                    slice.into()
                } else {
                    format!("##{slice}").into()
                };
                if let Some(&id) = self.ids.get(candidate.as_ref()) {
                    matched = Some((id, end));
                    break;
                }
            }
            match matched {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![self.unk],
            }
        }
        pieces
    }
}
