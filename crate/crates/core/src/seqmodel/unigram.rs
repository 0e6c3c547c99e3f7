//! Context-free baseline scorer: log frequency of each token among training targets.

use serde::{Deserialize, Serialize};

use super::Scorer;
use crate::error::{Error, Result};
use crate::pid::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnigramScorer {
    logits: Vec<f64>,
    context: usize,
}

impl UnigramScorer {
    /// Add-one smoothed log counts over all target tokens.
    pub fn fit<'a>(vocab_size: usize, context: usize, targets: impl IntoIterator<Item = &'a [TokenId]>) -> Result<Self> {
        let mut counts = vec![1.0f64; vocab_size];
        for seq in targets {
            for &t in seq {
                *counts
                    .get_mut(t as usize)
                    .ok_or_else(|| Error::invalid(format!("token {t} outside vocabulary")))? += 1.0;
            }
        }
        Ok(Self {
            logits: counts.into_iter().map(f64::ln).collect(),
            context,
        })
    }
}

impl Scorer for UnigramScorer {
    fn vocab_size(&self) -> usize {
        self.logits.len()
    }

    fn context_window(&self) -> usize {
        self.context
    }

    fn next_token_logits(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.len() > self.context {
            return Err(Error::invalid("context window exceeded"));
        }
        Ok(self.logits.clone())
    }
}
