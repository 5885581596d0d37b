//! Tokenization with character-to-token span alignment.
//!
//! The reference tokenizer maps each UTF-8 byte to its own id, so spans carry
//! over exactly. A BPE tokenizer with a fixed merge table can be plugged in
//! instead; tokens that straddle a boundary between a metadata segment and a
//! supervised segment take the supervised role.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::templating::{RenderMode, RenderedSample, Role};

/// Number of ids of the byte-level tokenizer: 256 bytes plus begin,
/// end-of-answer and padding.
pub const BYTE_VOCAB_SIZE: usize = 259;

/// Merge-table tokenizer operating on raw bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeTokenizer {
    /// Merges in priority order; merge `k` produces id `256 + k`.
    pub merges: Vec<(u32, u32)>,
    /// When false, bytes outside `alphabet` cannot be encoded.
    pub byte_fallback: bool,
    /// Base bytes the vocabulary covers; empty means all 256.
    #[serde(default)]
    pub alphabet: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerSpec {
    #[default]
    ByteLevel,
    LearnedBpe(BpeTokenizer),
}

impl TokenizerSpec {
    fn n_merges(&self) -> usize {
        match self {
            TokenizerSpec::ByteLevel => 0,
            TokenizerSpec::LearnedBpe(b) => b.merges.len(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB_SIZE + self.n_merges()
    }

    pub fn begin(&self) -> u32 {
        (256 + self.n_merges()) as u32
    }

    pub fn end_of_answer(&self) -> u32 {
        self.begin() + 1
    }

    pub fn pad(&self) -> u32 {
        self.begin() + 2
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.begin()
    }

    /// Bytes spelled by a non-special token.
    pub fn token_bytes(&self, id: u32) -> Vec<u8> {
        match self {
            TokenizerSpec::ByteLevel => {
                if id < 256 {
                    vec![id as u8]
                } else {
                    Vec::new()
                }
            }
            TokenizerSpec::LearnedBpe(b) => {
                if id < 256 {
                    vec![id as u8]
                } else if let Some(&(l, r)) = b.merges.get(id as usize - 256) {
                    let mut out = self.token_bytes(l);
                    out.extend(self.token_bytes(r));
                    out
                } else {
                    Vec::new()
                }
            }
        }
    }

    /// Token ids of `text` with the byte range each one covers. No special
    /// tokens are added.
    pub fn encode_with_offsets(&self, text: &str) -> Result<Vec<(u32, Range<usize>)>> {
        let bytes = text.as_bytes();
        let mut toks: Vec<(u32, Range<usize>)> = bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| (u32::from(b), i..i + 1))
            .collect();
        let TokenizerSpec::LearnedBpe(bpe) = self else {
            return Ok(toks);
        };
        if !bpe.byte_fallback && !bpe.alphabet.is_empty() {
            if let Some(offset) = bytes.iter().position(|b| !bpe.alphabet.contains(b)) {
                return Err(Error::Unrepresentable { offset });
            }
        }
        let rank: BTreeMap<(u32, u32), usize> = bpe.merges.iter().enumerate().map(|(k, &p)| (p, k)).collect();
        loop {
            let best = toks
                .windows(2)
                .filter_map(|w| rank.get(&(w[0].0, w[1].0)).copied())
                .min();
            let Some(k) = best else { break };
            let pair = bpe.merges[k];
            let new_id = (256 + k) as u32;
            let mut merged = Vec::with_capacity(toks.len());
            let mut i = 0;
            while i < toks.len() {
                if i + 1 < toks.len() && (toks[i].0, toks[i + 1].0) == pair {
                    merged.push((new_id, toks[i].1.start..toks[i + 1].1.end));
                    i += 2;
                } else {
                    merged.push(toks[i].clone());
                    i += 1;
                }
            }
            toks = merged;
        }
        Ok(toks)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(self.encode_with_offsets(text)?.into_iter().map(|(t, _)| t).collect())
    }

    /// Text of the non-special tokens; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&t| !self.is_special(t))
            .flat_map(|&t| self.token_bytes(t))
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// A run of token positions sharing a role, produced from one segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
    pub role: Role,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub in_query: bool,
}

impl TokenSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Token ids plus role spans. Position 0 holds the begin token, which is
/// not covered by any span and is treated as metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSample {
    pub case_id: String,
    pub token_ids: Vec<u32>,
    pub spans: Vec<TokenSpan>,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Role of every position; position 0 is metadata.
    pub fn roles(&self) -> Vec<Role> {
        let mut roles = vec![Role::Meta; self.len()];
        for s in &self.spans {
            roles[s.start..s.end].fill(s.role);
        }
        roles
    }

    pub fn query_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.len()];
        for s in self.spans.iter().filter(|s| s.in_query) {
            flags[s.start..s.end].fill(true);
        }
        flags
    }
}

/// Tokenize a rendered sample, prepending the begin token and, in training
/// mode, appending end-of-answer to the query target span.
pub fn tokenize_with_spans(sample: &RenderedSample, tok: &TokenizerSpec) -> Result<TokenizedSample> {
    let text = sample.text();
    let char_spans = sample.spans();
    let tokens = tok.encode_with_offsets(&text)?;

    // segment owning each token
    let mut owner = Vec::with_capacity(tokens.len());
    let mut seg = 0;
    for (_, range) in &tokens {
        while seg < char_spans.len() && char_spans[seg].end <= range.start {
            seg += 1;
        }
        let mut chosen: Option<usize> = None;
        let mut k = seg;
        while k < char_spans.len() && char_spans[k].start < range.end {
            let s = &char_spans[k];
            if s.end > s.start {
                let better = match chosen {
                    None => true,
                    Some(c) => s.role.is_supervised() || !char_spans[c].role.is_supervised(),
                };
                if better {
                    chosen = Some(k);
                }
            }
            k += 1;
        }
        owner.push(chosen.expect("every byte belongs to a segment"));
    }

    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(tok.begin());
    ids.extend(tokens.iter().map(|(t, _)| *t));
    let mut spans: Vec<TokenSpan> = Vec::new();
    for (i, &o) in owner.iter().enumerate() {
        let pos = i + 1;
        match spans.last_mut() {
            Some(last) if last.end == pos && owner[i - 1] == o => last.end += 1,
            _ => spans.push(TokenSpan {
                start: pos,
                end: pos + 1,
                role: char_spans[o].role,
                in_query: char_spans[o].in_query,
            }),
        }
    }
    if sample.mode == RenderMode::Train {
        let pos = ids.len();
        ids.push(tok.end_of_answer());
        match spans.last_mut() {
            Some(last) if last.role == Role::Target && last.end == pos => last.end += 1,
            _ => spans.push(TokenSpan {
                start: pos,
                end: pos + 1,
                role: Role::Target,
                in_query: true,
            }),
        }
    }
    Ok(TokenizedSample {
        case_id: sample.case_id.clone(),
        token_ids: ids,
        spans,
    })
}

/// Samples within the length budget plus per-case discard counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LengthFiltered<T> {
    pub kept: Vec<T>,
    pub discarded: BTreeMap<String, usize>,
}

impl<T> LengthFiltered<T> {
    pub fn discarded_count(&self) -> usize {
        self.discarded.values().sum()
    }
}

/// Keep samples whose length is at most `max_len`, preserving order.
pub fn filter_by_length<T>(samples: Vec<T>, max_len: usize, key: impl Fn(&T) -> (usize, &str)) -> LengthFiltered<T> {
    let mut out = LengthFiltered {
        kept: Vec::with_capacity(samples.len()),
        discarded: BTreeMap::new(),
    };
    for s in samples {
        let (len, case_id) = key(&s);
        if len <= max_len {
            out.kept.push(s);
        } else {
            *out.discarded.entry(case_id.to_string()).or_default() += 1;
        }
    }
    out
}

/// [`filter_by_length`] for tokenized samples.
pub fn filter_tokenized(samples: Vec<TokenizedSample>, max_len: usize) -> LengthFiltered<TokenizedSample> {
    filter_by_length(samples, max_len, |s| (s.len(), s.case_id.as_str()))
}
