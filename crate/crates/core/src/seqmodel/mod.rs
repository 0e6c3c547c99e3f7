//! Autoregressive scoring over the unified token sequence.
//!
//! A search context (past queries with their clicked POIs, then the current query) is
//! flattened into one token stream by [`linearize`]; any [`Scorer`] then supplies
//! next-token logits for constrained decoding.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geocode::{encode_geohash, GeoPoint};
use crate::pid::{Pid, PidLayout, TokenId, MARKER_COUNT, TARGET_START};

mod transformer;
mod unigram;

pub use transformer::{
    read_checkpoint, write_checkpoint, Checkpoint, Sample, TrainConfig, TrainReport, Transformer,
    TransformerConfig, CHECKPOINT_FORMAT,
};
pub use unigram::UnigramScorer;


#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Marker,
    Geo,
    Sid(usize),
    Dedup,
    Text,
}

/// Token table. The fixed regions come from the PID layout; text tokens follow, one per
/// character seen in the corpus plus an unknown-character token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub layout: PidLayout,
    /// Geohash length used for context locations. Equals `layout.gid_len` unless PIDs
    /// carry no geographic part, in which case locations still enter the context.
    pub context_gid_len: usize,
    /// Sorted, distinct.
    chars: Vec<char>,
}

impl Vocabulary {
    pub fn new(layout: PidLayout, context_gid_len: usize, chars: impl IntoIterator<Item = char>) -> Result<Self> {
        layout.validate()?;
        if context_gid_len == 0 || context_gid_len > crate::geocode::MAX_GEOHASH_LEN {
            return Err(Error::Config(format!("context geohash length {context_gid_len} out of 1..=12")));
        }
        if layout.gid_len > 0 && layout.gid_len != context_gid_len {
            return Err(Error::Config("context geohash length must match the PID GID length".into()));
        }
        let chars: BTreeSet<char> = chars.into_iter().flat_map(char::to_lowercase).collect();
        Ok(Self {
            layout,
            context_gid_len,
            chars: chars.into_iter().collect(),
        })
    }

    /// Builds the text region from every character occurring in `texts`.
    pub fn from_texts<'a>(
        layout: PidLayout,
        context_gid_len: usize,
        texts: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        Self::new(layout, context_gid_len, texts.into_iter().flat_map(str::chars))
    }

    pub fn unk(&self) -> TokenId {
        self.layout.fixed_size()
    }

    pub fn size(&self) -> usize {
        self.layout.fixed_size() as usize + 1 + self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn text_tokens(&self, text: &str) -> Vec<TokenId> {
        text.chars()
            .flat_map(char::to_lowercase)
            .map(|c| match self.chars.binary_search(&c) {
                Ok(i) => self.unk() + 1 + i as TokenId,
                Err(_) => self.unk(),
            })
            .collect()
    }

    pub fn region(&self, t: TokenId) -> Option<Region> {
        let l = &self.layout;
        if t < MARKER_COUNT {
            Some(Region::Marker)
        } else if l.geo_range().contains(&t) {
            Some(Region::Geo)
        } else if l.dedup_range().contains(&t) {
            Some(Region::Dedup)
        } else if t < l.fixed_size() {
            Some(Region::Sid((0..l.sid_levels).find(|&k| l.sid_range(k).contains(&t))?))
        } else if (t as usize) < self.size() {
            Some(Region::Text)
        } else {
            None
        }
    }

    pub fn location_tokens(&self, p: &GeoPoint) -> Vec<TokenId> {
        let gid = encode_geohash(*p, self.context_gid_len).expect("length validated");
        self.layout.gid_tokens(&gid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub query: String,
    pub location: GeoPoint,
    pub pid: Pid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchContext {
    /// Oldest first.
    pub history: Vec<HistoryEntry>,
    pub query: String,
    pub location: GeoPoint,
}

impl SearchContext {
    pub fn without_history(&self) -> Self {
        Self {
            history: Vec::new(),
            ..self.clone()
        }
    }
}

/// Flattens a context into `[loc ∥ query ∥ pid]* ∥ loc ∥ query ∥ TARGET_START`.
///
/// When the result would exceed `max_len`, whole history entries are dropped starting
/// from the oldest; the current query is never cut.
pub fn linearize(ctx: &SearchContext, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenId>> {
    let mut tail = vocab.location_tokens(&ctx.location);
    tail.extend(vocab.text_tokens(&ctx.query));
    tail.push(TARGET_START);
    if tail.len() > max_len {
        return Err(Error::invalid(format!(
            "current query needs {} tokens, window allows {max_len}",
            tail.len()
        )));
    }
    let mut entries = Vec::new();
    let mut budget = max_len - tail.len();
    for h in ctx.history.iter().rev() {
        vocab.layout.check(&h.pid)?;
        let mut e = vocab.location_tokens(&h.location);
        e.extend(vocab.text_tokens(&h.query));
        e.extend(vocab.layout.tokens(&h.pid));
        if e.len() > budget {
            break;
        }
        budget -= e.len();
        entries.push(e);
    }
    let mut out: Vec<TokenId> = entries.into_iter().rev().flatten().collect();
    out.extend(tail);
    Ok(out)
}

/// Incremental scoring state for one decoding path.
pub trait ScoringSession<'a> {
    /// Logits for the token following everything pushed so far.
    fn logits(&self) -> &[f64];
    fn push(&mut self, token: TokenId) -> Result<()>;
    fn fork(&self) -> Session<'a>;
}

pub type Session<'a> = Box<dyn ScoringSession<'a> + 'a>;

/// Anything that can assign next-token scores to a token prefix.
pub trait Scorer: Sync {
    fn vocab_size(&self) -> usize;
    fn context_window(&self) -> usize;
    /// One finite score per vocabulary entry for the token following `tokens`.
    fn next_token_logits(&self, tokens: &[TokenId]) -> Result<Vec<f64>>;

    /// Starts a session positioned after `prefix`. The default recomputes from scratch
    /// at every step; implementations with internal caches should override it.
    fn session(&self, prefix: &[TokenId]) -> Result<Session<'_>>
    where
        Self: Sized,
    {
        Ok(Box::new(RecomputeSession::new(self, prefix)?))
    }
}

pub struct RecomputeSession<'a, S: Scorer> {
    scorer: &'a S,
    tokens: Vec<TokenId>,
    logits: Vec<f64>,
}

impl<'a, S: Scorer> RecomputeSession<'a, S> {
    pub fn new(scorer: &'a S, prefix: &[TokenId]) -> Result<Self> {
        Ok(Self {
            scorer,
            tokens: prefix.to_vec(),
            logits: scorer.next_token_logits(prefix)?,
        })
    }
}

impl<'a, S: Scorer> ScoringSession<'a> for RecomputeSession<'a, S> {
    fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn push(&mut self, token: TokenId) -> Result<()> {
        self.tokens.push(token);
        self.logits = self.scorer.next_token_logits(&self.tokens)?;
        Ok(())
    }

    fn fork(&self) -> Session<'a> {
        Box::new(RecomputeSession {
            scorer: self.scorer,
            tokens: self.tokens.clone(),
            logits: self.logits.clone(),
        })
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
