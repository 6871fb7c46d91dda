//! Structured input construction: the marker-annotated word sequence built
//! from an instance and its dependency path, sub-word tokenization with
//! truncation, and the entity masks consumed by the representation layer.

pub mod tokenizer;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, ENTITY_TYPES};
use crate::error::{Error, Result};

pub use tokenizer::SubwordTokenizer;

pub const H_SEP_TOKEN: &str = "[H-SEP]";
pub const T_SEP_TOKEN: &str = "[T-SEP]";

/// The 20 task-specific tokens appended to the base vocabulary: two segment
/// separators plus one marker per entity type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialVocab {
    pub h_sep: String,
    pub t_sep: String,
    pub type_markers: Vec<String>,
}

impl SpecialVocab {
    pub fn standard() -> SpecialVocab {
        SpecialVocab {
            h_sep: H_SEP_TOKEN.to_string(),
            t_sep: T_SEP_TOKEN.to_string(),
            type_markers: ENTITY_TYPES.iter().map(|t| Self::marker_for(t)).collect(),
        }
    }

    pub fn marker_for(type_tag: &str) -> String {
        format!("<{type_tag}>")
    }

    /// All added tokens in a fixed order.
    pub fn all(&self) -> Vec<String> {
        let mut v = Vec::with_capacity(2 + self.type_markers.len());
        v.push(self.h_sep.clone());
        v.push(self.t_sep.clone());
        v.extend(self.type_markers.iter().cloned());
        v
    }

    pub fn count(&self) -> usize {
        2 + self.type_markers.len()
    }

    /// Extends a tokenizer with these tokens as atomic entries.
    pub fn install(&self, tok: &mut SubwordTokenizer) -> Result<Range<u32>> {
        tok.add_atomic_tokens(&self.all())
    }

    /// Re-marks these tokens atomic in a vocabulary that already has them.
    pub fn reinstall(&self, tok: &mut SubwordTokenizer) -> Result<()> {
        tok.mark_atomic(&self.all())
    }
}

/// Which token subset feeds the path segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathMode {
    Stp,
    Sdp,
    Full,
}

impl PathMode {
    /// Sentence token indices for the path segment of one instance.
    pub fn path_indices(&self, instance: &Instance) -> Result<Vec<usize>> {
        match self {
            PathMode::Full => Ok((0..instance.tokens.len()).collect()),
            PathMode::Stp | PathMode::Sdp => {
                let tree = instance.dep_tree()?;
                let h = tree.entity_anchor(&instance.head.span);
                let t = tree.entity_anchor(&instance.tail.span);
                let path = match self {
                    PathMode::Stp => tree.stp(h, t),
                    _ => tree.sdp(h, t),
                };
                Ok(path.indices().to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordKind {
    /// [CLS], [SEP], segment separators, type markers.
    Marker,
    HeadWord,
    TailWord,
    /// Path-segment word, tagged with its sentence position.
    PathWord(usize),
}

/// One word of the pre-tokenization sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedWord {
    pub text: String,
    pub kind: WordKind,
}

fn marker(text: impl Into<String>) -> MarkedWord {
    MarkedWord { text: text.into(), kind: WordKind::Marker }
}

/// Lays out the word sequence
/// `[CLS] ⟨head-type⟩ head [H-SEP] ⟨tail-type⟩ tail [T-SEP] path [SEP]`,
/// omitting the two type markers when `use_entity_types` is off.
pub fn build_sequence(
    instance: &Instance,
    path: &[usize],
    use_entity_types: bool,
) -> Result<Vec<MarkedWord>> {
    if path.is_empty() {
        return Err(Error::Input(format!("instance {}: empty token path", instance.id)));
    }
    if let Some(&bad) = path.iter().find(|&&i| i >= instance.tokens.len()) {
        return Err(Error::Input(format!(
            "instance {}: path index {bad} out of range",
            instance.id
        )));
    }
    let mut seq = Vec::with_capacity(path.len() + 8);
    seq.push(marker(tokenizer::CLS_TOKEN));
    if use_entity_types {
        seq.push(marker(SpecialVocab::marker_for(&instance.head.type_tag)));
    }
    for w in instance.mention_words(&instance.head) {
        seq.push(MarkedWord { text: w.clone(), kind: WordKind::HeadWord });
    }
    seq.push(marker(H_SEP_TOKEN));
    if use_entity_types {
        seq.push(marker(SpecialVocab::marker_for(&instance.tail.type_tag)));
    }
    for w in instance.mention_words(&instance.tail) {
        seq.push(MarkedWord { text: w.clone(), kind: WordKind::TailWord });
    }
    seq.push(marker(T_SEP_TOKEN));
    for &i in path {
        seq.push(MarkedWord { text: instance.tokens[i].clone(), kind: WordKind::PathWord(i) });
    }
    seq.push(marker(tokenizer::SEP_TOKEN));
    Ok(seq)
}

/// Tokenized input ready for the encoder. `token_ids` is padded to the
/// configured maximum; real tokens occupy the prefix `0..effective_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredInput {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<usize>,
    pub head_mask: Vec<f64>,
    pub tail_mask: Vec<f64>,
    /// Sub-word interval of the path segment (between [T-SEP] and [SEP]).
    pub stp_region: Range<usize>,
    pub padding_mask: Vec<bool>,
    pub effective_len: usize,
}

impl StructuredInput {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }
}

struct ExpandedWord {
    kind: WordKind,
    ids: Vec<u32>,
}

/// Tokenizes a marked word sequence, truncating whole path words from the end
/// until the result fits, then padding. Entity masks are set on sub-words of
/// surface occurrences inside the path region; a surface absent from the
/// region (e.g. truncated away) falls back to its header-segment sub-words.
pub fn tokenize(
    seq: &[MarkedWord],
    tok: &SubwordTokenizer,
    max_seq_length: usize,
) -> Result<StructuredInput> {
    let mut words: Vec<ExpandedWord> = Vec::with_capacity(seq.len());
    for w in seq {
        if w.kind == WordKind::Marker && !tok.is_atomic(&w.text) {
            return Err(Error::Input(format!(
                "marker {:?} is not an atomic vocabulary token",
                w.text
            )));
        }
        words.push(ExpandedWord { kind: w.kind, ids: tok.encode_word(&w.text) });
    }

    let total: usize = words.iter().map(|w| w.ids.len()).sum();
    let prefix_len: usize = words
        .iter()
        .filter(|w| !matches!(w.kind, WordKind::PathWord(_)))
        .map(|w| w.ids.len())
        .sum();
    if prefix_len > max_seq_length {
        return Err(Error::PrefixTooLong { prefix_len, max_len: max_seq_length });
    }

    // drop whole path words from the end until the sequence fits
    let mut overflow = total.saturating_sub(max_seq_length);
    let mut keep: Vec<bool> = vec![true; words.len()];
    if overflow > 0 {
        for (i, w) in words.iter().enumerate().rev() {
            if overflow == 0 {
                break;
            }
            if matches!(w.kind, WordKind::PathWord(_)) {
                keep[i] = false;
                overflow = overflow.saturating_sub(w.ids.len());
            }
        }
    }

    let mut token_ids = Vec::with_capacity(max_seq_length);
    let mut region_start = None;
    let mut region_end = 0usize;
    // (word index in `words`, sub-word interval in token_ids)
    let mut placed: Vec<(usize, Range<usize>)> = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        let start = token_ids.len();
        token_ids.extend_from_slice(&w.ids);
        placed.push((i, start..token_ids.len()));
        if matches!(w.kind, WordKind::PathWord(_)) {
            region_start.get_or_insert(start);
            region_end = token_ids.len();
        }
    }
    let effective_len = token_ids.len();
    debug_assert!(effective_len <= max_seq_length);
    let sep_pos = effective_len - 1;
    let stp_region = match region_start {
        Some(s) => s..region_end,
        None => sep_pos..sep_pos,
    };

    let mut head_mask = vec![0.0; max_seq_length];
    let mut tail_mask = vec![0.0; max_seq_length];
    let head_words: Vec<&str> = seq
        .iter()
        .filter(|w| w.kind == WordKind::HeadWord)
        .map(|w| w.text.as_str())
        .collect();
    let tail_words: Vec<&str> = seq
        .iter()
        .filter(|w| w.kind == WordKind::TailWord)
        .map(|w| w.text.as_str())
        .collect();

    // kept path words in order, with their sub-word intervals
    let kept_path: Vec<(String, Range<usize>)> = placed
        .iter()
        .filter_map(|(i, r)| match words[*i].kind {
            WordKind::PathWord(_) => Some((seq[*i].text.clone(), r.clone())),
            _ => None,
        })
        .collect();

    let mut claimed = vec![false; kept_path.len()];
    let head_hit = mark_occurrences(&head_words, &kept_path, &mut claimed, &mut head_mask);
    let tail_hit = mark_occurrences(&tail_words, &kept_path, &mut claimed, &mut tail_mask);

    if !head_hit {
        mark_segment(&placed, &words, WordKind::HeadWord, &mut head_mask);
    }
    if !tail_hit {
        mark_segment(&placed, &words, WordKind::TailWord, &mut tail_mask);
    }

    let mut position_ids: Vec<usize> = (0..max_seq_length).collect();
    position_ids.truncate(max_seq_length);
    let padding_mask: Vec<bool> = (0..max_seq_length).map(|t| t < effective_len).collect();
    token_ids.resize(max_seq_length, tok.pad_id());

    debug_assert_eq!(token_ids[0], tok.cls_id());
    debug_assert_eq!(token_ids[sep_pos], tok.sep_id());

    Ok(StructuredInput {
        token_ids,
        position_ids,
        head_mask,
        tail_mask,
        stp_region,
        padding_mask,
        effective_len,
    })
}

/// Marks every unclaimed occurrence of `surface` (as a consecutive word run)
/// among the kept path words. Returns whether at least one occurrence was
/// marked; claimed words are skipped so head and tail never overlap.
fn mark_occurrences(
    surface: &[&str],
    kept_path: &[(String, Range<usize>)],
    claimed: &mut [bool],
    mask: &mut [f64],
) -> bool {
    if surface.is_empty() || kept_path.len() < surface.len() {
        return false;
    }
    let mut any = false;
    let mut start = 0usize;
    while start + surface.len() <= kept_path.len() {
        let window = &kept_path[start..start + surface.len()];
        let free = !claimed[start..start + surface.len()].iter().any(|&c| c);
        let matches = window.iter().zip(surface).all(|((w, _), s)| w == s);
        if free && matches {
            for (j, (_, r)) in window.iter().enumerate() {
                claimed[start + j] = true;
                for t in r.clone() {
                    mask[t] = 1.0;
                }
            }
            any = true;
            start += surface.len();
        } else {
            start += 1;
        }
    }
    any
}

fn mark_segment(
    placed: &[(usize, Range<usize>)],
    words: &[ExpandedWord],
    kind: WordKind,
    mask: &mut [f64],
) {
    for (i, r) in placed {
        if words[*i].kind == kind {
            for t in r.clone() {
                mask[t] = 1.0;
            }
        }
    }
}

/// Full pipeline for one instance: path extraction, sequence layout,
/// tokenization.
pub fn structured_input(
    instance: &Instance,
    tok: &SubwordTokenizer,
    mode: PathMode,
    use_entity_types: bool,
    max_seq_length: usize,
) -> Result<StructuredInput> {
    let path = mode.path_indices(instance)?;
    let seq = build_sequence(instance, &path, use_entity_types)?;
    tokenize(&seq, tok, max_seq_length)
}
