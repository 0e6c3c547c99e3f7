//! Query-level spatial proximity estimation.
//!
//! Labels are the geohash prefix length shared by the user and the clicked POI; the
//! classifier is multinomial logistic regression over hashed character n-grams and words.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geocode::{common_prefix_len, encode_geohash, GeoPoint};
use crate::hashing::{char_ngrams, signed_bucket};

/// Shared geohash prefix length of `user` and `poi` at precision `gid_len`.
pub fn label_proximity(user: GeoPoint, poi: GeoPoint, gid_len: usize) -> Result<usize> {
    if gid_len == 0 {
        return Ok(0);
    }
    Ok(common_prefix_len(
        &encode_geohash(user, gid_len)?,
        &encode_geohash(poi, gid_len)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximitySample {
    pub query: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityConfig {
    /// Highest level; the model has `gid_len + 1` classes.
    pub gid_len: usize,
    pub buckets: usize,
    pub hash_seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub heldout_frac: f64,
    pub seed: u64,
}

impl Default for ProximityConfig {
    fn default() -> Self {
        Self {
            gid_len: 6,
            buckets: 4096,
            hash_seed: 0x9e0,
            epochs: 20,
            lr: 0.5,
            l2: 1e-6,
            heldout_frac: 0.2,
            seed: 0,
        }
    }
}

impl ProximityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buckets == 0 || self.epochs == 0 {
            return Err(Error::Config("buckets and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.l2 >= 0.0) || !(0.0..1.0).contains(&self.heldout_frac) {
            return Err(Error::Config("invalid proximity optimiser settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityModel {
    pub config: ProximityConfig,
    /// Row-major `classes × buckets`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    /// Accuracy of always predicting the most frequent training label on the held-out set.
    pub majority_baseline: f64,
    pub heldout_size: usize,
}

fn features(text: &str, cfg: &ProximityConfig) -> Vec<(usize, f64)> {
    let lower = text.to_lowercase();
    let mut feats: Vec<String> = char_ngrams(&lower, 2..=4);
    feats.extend(lower.split_whitespace().map(|w| format!("w:{w}")));
    if feats.is_empty() {
        return Vec::new();
    }
    let scale = 1.0 / (feats.len() as f64).sqrt();
    feats
        .iter()
        .map(|f| {
            let (b, s) = signed_bucket(f, cfg.buckets, cfg.hash_seed);
            (b, s * scale)
        })
        .collect()
}

impl ProximityModel {
    pub fn classes(&self) -> usize {
        self.config.gid_len + 1
    }

    fn scores_of(&self, feats: &[(usize, f64)]) -> Vec<f64> {
        let b = self.config.buckets;
        (0..self.classes())
            .map(|c| {
                self.bias[c]
                    + feats
                        .iter()
                        .map(|&(i, v)| self.weights[c * b + i] * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn scores(&self, query: &str) -> Vec<f64> {
        self.scores_of(&features(query, &self.config))
    }

    /// Argmax level; ties go to the smaller level.
    pub fn predict_lambda(&self, query: &str) -> usize {
        argmax_low(&self.scores(query))
    }
}

fn argmax_low(s: &[f64]) -> usize {
    (1..s.len()).fold(0, |best, c| if s[c] > s[best] { c } else { best })
}

pub fn train_proximity(samples: &[ProximitySample], cfg: &ProximityConfig) -> Result<(ProximityModel, ProximityReport)> {
    cfg.validate()?;
    let classes = cfg.gid_len + 1;
    if let Some(s) = samples.iter().find(|s| s.label >= classes) {
        return Err(Error::invalid(format!("label {} exceeds level {}", s.label, cfg.gid_len)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_held = (samples.len() as f64 * cfg.heldout_frac).floor() as usize;
    let (held, train) = order.split_at(n_held);
    let mut counts = vec![0usize; classes];
    for &i in train {
        counts[samples[i].label] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::TrainingFailure {
            epoch: 0,
            detail: "training labels contain fewer than two classes".into(),
        });
    }
    let feats: Vec<Vec<(usize, f64)>> = samples.iter().map(|s| features(&s.query, cfg)).collect();
    let mut model = ProximityModel {
        config: cfg.clone(),
        weights: vec![0.0; classes * cfg.buckets],
        bias: vec![0.0; classes],
    };
    let mut train: Vec<usize> = train.to_vec();
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let lr = cfg.lr / (1.0 + epoch as f64).sqrt();
        for &i in &train {
            let x = &feats[i];
            let probs = crate::seqmodel::softmax(&model.scores_of(x));
            for (c, p) in probs.iter().enumerate() {
                let g = p - (c == samples[i].label) as u8 as f64;
                model.bias[c] -= lr * g;
                for &(j, v) in x {
                    let w = &mut model.weights[c * cfg.buckets + j];
                    *w -= lr * (g * v + cfg.l2 * *w);
                }
            }
        }
        if model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::TrainingFailure {
                epoch,
                detail: "non-finite proximity weights".into(),
            });
        }
    }
    let accuracy = |idx: &[usize]| {
        if idx.is_empty() {
            return 0.0;
        }
        let hit = idx
            .iter()
            .filter(|&&i| argmax_low(&model.scores_of(&feats[i])) == samples[i].label)
            .count();
        hit as f64 / idx.len() as f64
    };
    let majority = argmax_low(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let report = ProximityReport {
        train_accuracy: accuracy(&train),
        heldout_accuracy: accuracy(held),
        majority_baseline: if held.is_empty() {
            0.0
        } else {
            held.iter().filter(|&&i| samples[i].label == majority).count() as f64 / held.len() as f64
        },
        heldout_size: held.len(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn labels() {
        let a = pt(31.2304, 121.4737);
        let b = pt(31.2305, 121.4738);
        assert_eq!(label_proximity(a, b, 6).unwrap(), 6);
        assert_eq!(label_proximity(pt(45.0, 45.0), pt(-45.0, -135.0), 6).unwrap(), 0);
    }

    fn toy() -> Vec<ProximitySample> {
        let mut v = Vec::new();
        for i in 0..40 {
            v.push(ProximitySample {
                query: format!("toilet nearby {}", i % 5),
                label: 6,
            });
            v.push(ProximitySample {
                query: format!("airport {}", i % 5),
                label: 2,
            });
        }
        v
    }

    #[test]
    fn separable_corpus_is_learned() {
        let (m, r) = train_proximity(&toy(), &ProximityConfig::default()).unwrap();
        assert_eq!(r.heldout_accuracy, 1.0);
        assert!(r.heldout_size > 0);
        assert_eq!(m.predict_lambda("toilet nearby 3"), 6);
        assert_eq!(m.predict_lambda("airport 1"), 2);
        assert_eq!(m.predict_lambda("airport 1"), m.predict_lambda("airport 1"));
    }

    #[test]
    fn single_class_rejected() {
        let s: Vec<_> = (0..10)
            .map(|i| ProximitySample {
                query: format!("q{i}"),
                label: 3,
            })
            .collect();
        assert!(matches!(
            train_proximity(&s, &ProximityConfig::default()),
            Err(Error::TrainingFailure { .. })
        ));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let s = vec![ProximitySample {
            query: "x".into(),
            label: 7,
        }];
        assert!(train_proximity(&s, &ProximityConfig::default()).is_err());
    }

    #[test]
    fn ties_prefer_smaller_level() {
        assert_eq!(argmax_low(&[0.0, 1.0, 1.0]), 1);
        let m = ProximityModel {
            config: ProximityConfig::default(),
            weights: vec![0.0; 7 * 4096],
            bias: vec![0.0; 7],
        };
        assert_eq!(m.predict_lambda("anything"), 0);
    }
}
