//! Trie-constrained beam search with proximity-aware prefix forcing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geocode::{encode_geohash, GeoPoint};
use crate::pid::{Pid, PidLayout, PidTrie, TokenId};
use crate::proximity::ProximityModel;
use crate::seqmodel::{linearize, Scorer, SearchContext, Session, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub k: usize,
    /// Defaults to `k`.
    pub beam_width: Option<usize>,
    pub tau: f64,
    pub gamma: usize,
    pub ssp_enabled: bool,
    pub tcg_enabled: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            k: 10,
            beam_width: None,
            tau: 1.0,
            gamma: 2,
            ssp_enabled: true,
            tcg_enabled: true,
        }
    }
}

impl DecodeConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn width(&self) -> usize {
        self.beam_width.unwrap_or(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.width() == 0 {
            return Err(Error::Config("k and beam width must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        if self.gamma == 0 {
            return Err(Error::Config("gamma must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    /// `None` when the generated tokens name no database POI (only possible without TCG).
    pub poi_id: Option<String>,
    pub pid: Option<Pid>,
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Predicted proximity level, when pruning ran.
    pub lambda: Option<usize>,
    pub forced_prefix_len: usize,
    /// Number of scored decoding positions.
    pub decode_steps: usize,
    pub wall_time_us: u64,
    pub context_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Best first; never longer than `k`.
    pub hits: Vec<Hit>,
    pub diagnostics: Diagnostics,
}

/// Log-probabilities of `allowed` tokens under `softmax(logits / tau)` restricted to
/// `allowed`. `None` signals a dead end.
pub fn constrained_log_probs(logits: &[f64], allowed: &[TokenId], tau: f64) -> Option<Vec<f64>> {
    if allowed.is_empty() {
        return None;
    }
    let scaled: Vec<f64> = allowed.iter().map(|&t| logits[t as usize] / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scaled.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    Some(scaled.into_iter().map(|s| s - lse).collect())
}

/// Probabilities aligned with `allowed`; tokens outside it implicitly get zero.
pub fn constrained_step(logits: &[f64], allowed: &[TokenId], tau: f64) -> Option<Vec<f64>> {
    constrained_log_probs(logits, allowed, tau).map(|l| l.into_iter().map(f64::exp).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SspPrefix {
    pub lambda: usize,
    pub tokens: Vec<TokenId>,
}

/// The first `max(0, λ − γ)` geohash tokens of the user's location, shortened until the
/// trie has a node there.
pub fn ssp_prefix(
    location: GeoPoint,
    query: &str,
    proximity: &ProximityModel,
    gamma: usize,
    layout: &PidLayout,
    trie: &PidTrie,
) -> Result<SspPrefix> {
    let lambda = proximity.predict_lambda(query).min(layout.gid_len);
    if layout.gid_len == 0 {
        return Ok(SspPrefix {
            lambda,
            tokens: Vec::new(),
        });
    }
    let gid = encode_geohash(location, layout.gid_len)?;
    let mut tokens = layout.gid_tokens(&gid);
    tokens.truncate(lambda.saturating_sub(gamma));
    while !tokens.is_empty() && !trie.contains_prefix(&tokens) {
        tokens.pop();
    }
    Ok(SspPrefix { lambda, tokens })
}

struct Beam<'a> {
    tokens: Vec<TokenId>,
    log_prob: f64,
    session: Option<Session<'a>>,
}

/// Generates up to `cfg.k` PIDs for `ctx`.
///
/// With TCG the permissible tokens at each step are the trie children of the beam's path;
/// without it they are the layout region of the current position. Forced prefix tokens
/// are fed to the scorer but contribute nothing to the sequence log-probability.
pub fn beam_search<S: Scorer>(
    scorer: &S,
    trie: &PidTrie,
    vocab: &Vocabulary,
    ctx: &SearchContext,
    proximity: Option<&ProximityModel>,
    cfg: &DecodeConfig,
) -> Result<RetrievalResult> {
    cfg.validate()?;
    let started = Instant::now();
    let layout = &vocab.layout;
    let pid_len = layout.pid_len();
    if trie.depth() != pid_len {
        return Err(Error::invalid("trie depth does not match the PID layout"));
    }
    if scorer.vocab_size() != vocab.size() {
        return Err(Error::invalid("scorer vocabulary size differs from the vocabulary"));
    }
    let max_ctx = (scorer.context_window() + 1)
        .checked_sub(pid_len)
        .ok_or_else(|| Error::invalid("context window shorter than a PID"))?;
    let context = linearize(ctx, vocab, max_ctx)?;

    let mut diagnostics = Diagnostics {
        context_len: context.len(),
        ..Diagnostics::default()
    };
    let forced = match (cfg.ssp_enabled, proximity) {
        (true, Some(p)) => {
            let pre = ssp_prefix(ctx.location, &ctx.query, p, cfg.gamma, layout, trie)?;
            diagnostics.lambda = Some(pre.lambda);
            pre.tokens
        }
        _ => Vec::new(),
    };
    diagnostics.forced_prefix_len = forced.len();

    let mut root = scorer.session(&context)?;
    for &t in &forced {
        root.push(t)?;
    }
    let mut beams = vec![Beam {
        tokens: forced.clone(),
        log_prob: 0.0,
        session: Some(root),
    }];
    let width = cfg.width();
    for pos in forced.len()..pid_len {
        let last = pos + 1 == pid_len;
        let mut cands: Vec<(f64, TokenId, usize)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let allowed: Vec<TokenId> = if cfg.tcg_enabled {
                trie.children(&beam.tokens)
            } else {
                layout.region_at(pos).collect()
            };
            let session = beam.session.as_ref().expect("live beam keeps its session");
            let Some(lp) = constrained_log_probs(session.logits(), &allowed, cfg.tau) else {
                continue;
            };
            cands.extend(
                allowed
                    .iter()
                    .zip(lp)
                    .map(|(&t, l)| (beam.log_prob + l, t, b)),
            );
        }
        diagnostics.decode_steps += 1;
        if cands.is_empty() {
            beams.clear();
            break;
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (lp, t, b) in cands {
            let parent = &beams[b];
            let mut tokens = parent.tokens.clone();
            tokens.push(t);
            let session = if last {
                None
            } else {
                let mut s = parent.session.as_ref().expect("live").fork();
                s.push(t)?;
                Some(s)
            };
            next.push(Beam {
                tokens,
                log_prob: lp,
                session,
            });
        }
        beams = next;
    }

    let hits = beams
        .into_iter()
        .take(cfg.k)
        .map(|b| Hit {
            poi_id: trie.lookup(&b.tokens).map(str::to_owned),
            pid: layout.parse(&b.tokens),
            tokens: b.tokens,
            log_prob: b.log_prob,
        })
        .collect();
    diagnostics.wall_time_us = started.elapsed().as_micros() as u64;
    Ok(RetrievalResult { hits, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_pair_splits_evenly() {
        let p = constrained_step(&[0.3; 5], &[1, 4], 1.0).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn low_temperature_concentrates_on_max() {
        let logits = [0.0, 2.0, 1.9, 5.0];
        let p = constrained_step(&logits, &[0, 1, 2], 1e-4).unwrap();
        assert!((p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn restricted_distribution_sums_to_one() {
        let logits = [800.0, -3.0, 12.0, 799.0, 0.1];
        let p = constrained_step(&logits, &[1, 2, 4], 0.7).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(constrained_step(&logits, &[], 1.0).is_none());
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::default().validate().is_ok());
        assert!(DecodeConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(DecodeConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(DecodeConfig { gamma: 0, ..Default::default() }.validate().is_err());
        assert_eq!(DecodeConfig::with_k(5).width(), 5);
    }
}
