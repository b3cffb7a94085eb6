//! Soft counterfactual generation.
//!
//! Selected tokens are replaced by `[MASK]` in the instance text, the
//! fill-mask model proposes substitutes for every mask, and K counterfactual
//! texts are drawn from the filtered proposals with a seeded generator.
//!
//! Token positions are mapped back onto the raw text by aligning the token
//! strings against it (case-insensitive, `##` pieces glued to the previous
//! piece). When that fails, for example because the tokenizer stripped
//! accents or emitted `[UNK]`, the text is rebuilt from the tokens with
//! [`detokenize`] instead.

use std::collections::HashSet;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Instance, SoftCounterfactual, Substitution};
use crate::extraction::SUBWORD_PREFIX;
use crate::rng::seeded_rng;

pub const MASK_MARKER: &str = "[MASK]";

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_V: usize = 5;
pub const DEFAULT_CANDIDATE_POOL: usize = 20;
pub const DEFAULT_DEDUP_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CfgenError {
    #[error("token position {position} out of range for {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("position {0} is a boundary marker")]
    BoundaryPosition(usize),
    #[error("{lists} candidate lists for {masks} masks")]
    CandidateCount { lists: usize, masks: usize },
    #[error("no usable substitute for any mask")]
    NoCandidates,
    #[error("K must be at least 1")]
    ZeroK,
}

/// One fill-mask proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskCandidate {
    pub token: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSlot {
    pub position: usize,
    pub original: String,
}

/// Text with its masked spans cut out.
///
/// `segments` always has one more entry than `slots`; rendering interleaves
/// them with either the mask marker, the original tokens or substitutes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    segments: Vec<String>,
    slots: Vec<MaskSlot>,
    aligned: bool,
}

impl MaskedText {
    pub fn slots(&self) -> &[MaskSlot] {
        &self.slots
    }

    /// Whether spans came from aligning tokens to the raw text (as opposed to
    /// the detokenizer fallback).
    pub fn aligned(&self) -> bool {
        self.aligned
    }

    /// The text sent to the fill-mask model.
    pub fn masked(&self) -> String {
        self.fill(std::iter::repeat_n(MASK_MARKER, self.slots.len()))
    }

    /// The unmasked text this was built from. Equal to the instance text when
    /// alignment succeeded.
    pub fn original(&self) -> String {
        self.fill(self.slots.iter().map(|s| s.original.as_str()))
    }

    /// Renders with one replacement per slot, in textual order.
    pub fn fill<'a, I>(&self, replacements: I) -> String
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut out = String::new();
        let mut reps = replacements.into_iter();
        for (i, seg) in self.segments.iter().enumerate() {
            out.push_str(seg);
            if i < self.slots.len() {
                out.push_str(reps.next().unwrap_or(MASK_MARKER));
            }
        }
        out
    }
}

/// Maps each token to its byte span in `text`. Boundary markers (first and
/// last tokens) get empty spans and are not matched.
pub fn align_tokens(text: &str, tokens: &[String]) -> Option<Vec<Range<usize>>> {
    let n = tokens.len();
    let mut spans = vec![0..0; n];
    let mut cursor = 0;
    for (i, token) in tokens.iter().enumerate() {
        if i == 0 || i + 1 == n {
            continue;
        }
        let (piece, glued) = match token.strip_prefix(SUBWORD_PREFIX) {
            Some(rest) if i > 1 && !rest.is_empty() => (rest, true),
            _ => (token.as_str(), false),
        };
        if !glued {
            cursor += text[cursor..]
                .char_indices()
                .find(|(_, c)| !c.is_whitespace())
                .map_or(text.len() - cursor, |(o, _)| o);
        }
        let start = cursor;
        let mut rest = text[cursor..].char_indices();
        for tc in piece.chars() {
            let (o, xc) = rest.next()?;
            if !xc.to_lowercase().eq(tc.to_lowercase()) {
                return None;
            }
            cursor = start + o + xc.len_utf8();
        }
        if piece.is_empty() {
            return None;
        }
        spans[i] = start..cursor;
    }
    Some(spans)
}

fn attaches_left(token: &str) -> bool {
    matches!(token, "," | "." | "!" | "?" | ";" | ":" | ")" | "]" | "}" | "%" | "n't")
        || token.starts_with('\'')
        || token.starts_with('’')
}

fn attaches_right(token: &str) -> bool {
    matches!(token, "(" | "[" | "{" | "$")
}

/// Rebuilds text from tokens (boundary markers dropped).
///
/// Tokens are joined by single spaces, except that `##` pieces join the
/// previous piece, closing punctuation `, . ! ? ; : ) ] } %` and
/// apostrophe-led tokens (`'s`, `'re`, `'`) plus `n't` attach to the left,
/// and opening `( [ { $` attach to the right.
pub fn detokenize(tokens: &[String]) -> String {
    detokenize_spans(tokens).0
}

fn detokenize_spans(tokens: &[String]) -> (String, Vec<Range<usize>>) {
    let n = tokens.len();
    let mut out = String::new();
    let mut spans = vec![0..0; n];
    let mut glue_next = true;
    for (i, token) in tokens.iter().enumerate() {
        if i == 0 || i + 1 == n {
            continue;
        }
        let (piece, glued) = match token.strip_prefix(SUBWORD_PREFIX) {
            Some(rest) if !rest.is_empty() => (rest, true),
            _ => (token.as_str(), false),
        };
        if !(glue_next || glued || attaches_left(piece)) {
            out.push(' ');
        }
        let start = out.len();
        out.push_str(piece);
        spans[i] = start..out.len();
        glue_next = attaches_right(piece);
    }
    (out, spans)
}

/// Replaces the tokens at `positions` with the mask marker.
pub fn mask_text(instance: &Instance, positions: &[usize]) -> Result<MaskedText, CfgenError> {
    let n = instance.tokens.len();
    let mut sorted: Vec<usize> = positions.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &p in &sorted {
        if p >= n {
            return Err(CfgenError::PositionOutOfRange { position: p, len: n });
        }
        if p == 0 || p + 1 == n {
            return Err(CfgenError::BoundaryPosition(p));
        }
    }
    let (text, spans, aligned) = match align_tokens(&instance.text, &instance.tokens) {
        Some(spans) => (instance.text.clone(), spans, true),
        None => {
            let (text, spans) = detokenize_spans(&instance.tokens);
            (text, spans, false)
        }
    };
    let mut segments = Vec::with_capacity(sorted.len() + 1);
    let mut slots = Vec::with_capacity(sorted.len());
    let mut cursor = 0;
    for p in sorted {
        let span = spans[p].clone();
        segments.push(text[cursor..span.start].to_string());
        slots.push(MaskSlot {
            position: p,
            original: text[span.clone()].to_string(),
        });
        cursor = span.end;
    }
    segments.push(text[cursor..].to_string());
    Ok(MaskedText {
        segments,
        slots,
        aligned,
    })
}

/// Drops non-alphabetic proposals, proposals equal to `original` (ignoring
/// case) and repeats, keeping model order.
pub fn filter_substitutes(candidates: &[MaskCandidate], original: &str) -> Vec<String> {
    let original = original.to_lowercase();
    let mut seen = HashSet::new();
    candidates
        .iter()
        .filter(|c| !c.token.is_empty() && c.token.chars().all(char::is_alphabetic))
        .filter(|c| c.token.to_lowercase() != original)
        .filter(|c| seen.insert(c.token.to_lowercase()))
        .map(|c| c.token.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// Counterfactuals per instance.
    pub k: usize,
    /// Only the first `pool` filtered candidates of each mask are drawn from.
    pub pool: usize,
    /// Re-draws allowed before a duplicate text is accepted.
    pub retries: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            k: DEFAULT_K,
            pool: DEFAULT_CANDIDATE_POOL,
            retries: DEFAULT_DEDUP_RETRIES,
        }
    }
}

/// Draws `params.k` counterfactuals, filling each mask independently and
/// uniformly from its (truncated) candidate list.
///
/// A mask without candidates keeps its original token and the counterfactual
/// is flagged `fallback`. Fails only when no mask has any candidate.
pub fn sample_counterfactuals(
    masked: &MaskedText,
    candidates: &[Vec<String>],
    params: SamplingParams,
    seed: u64,
) -> Result<Vec<SoftCounterfactual>, CfgenError> {
    if params.k == 0 {
        return Err(CfgenError::ZeroK);
    }
    let slots = masked.slots();
    if candidates.len() != slots.len() {
        return Err(CfgenError::CandidateCount {
            lists: candidates.len(),
            masks: slots.len(),
        });
    }
    if candidates.iter().all(Vec::is_empty) {
        return Err(CfgenError::NoCandidates);
    }
    let pools: Vec<&[String]> = candidates
        .iter()
        .map(|c| &c[..c.len().min(params.pool.max(1))])
        .collect();
    let fallback = pools.iter().any(|p| p.is_empty());

    let mut rng = seeded_rng(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(params.k);
    for _ in 0..params.k {
        let mut attempt = 0;
        let (text, picks) = loop {
            let picks: Vec<&str> = slots
                .iter()
                .zip(&pools)
                .map(|(slot, pool)| {
                    if pool.is_empty() {
                        slot.original.as_str()
                    } else {
                        pool[rng.random_range(0..pool.len())].as_str()
                    }
                })
                .collect();
            let text = masked.fill(picks.iter().copied());
            if !seen.contains(&text) || attempt >= params.retries {
                break (text, picks);
            }
            attempt += 1;
        };
        let duplicate = !seen.insert(text.clone());
        let substitutions = slots
            .iter()
            .zip(&picks)
            .map(|(slot, pick)| Substitution {
                position: slot.position,
                original: slot.original.clone(),
                replacement: pick.to_string(),
            })
            .collect();
        out.push(SoftCounterfactual {
            text,
            substitutions,
            fallback,
            duplicate,
        });
    }
    Ok(out)
}
