//! Residual-quantized autoencoder producing hierarchical semantic IDs.
//!
//! The encoder maps a rotated POI embedding to a latent `h`; `levels` codebooks then
//! quantize the running residual greedily, one nearest codeword per level. Training
//! minimizes reconstruction error plus `beta` times the codebook term, with the
//! straight-through estimator carrying the reconstruction gradient past the
//! quantization step. The codebook term `||r - z||²` is differentiated on both sides:
//! codewords move toward the residuals they quantize and the encoder is pulled toward
//! its codewords, which keeps the latent scale from drifting away from the codebooks.
//! A few Lloyd iterations per level finish training.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{Embedding, PoiRecord};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, nearest};
use crate::nn::{grads_as_slices, Activation, Adam, Mlp};

/// Hierarchical codeword indices, coarse to fine.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sid(pub Vec<u16>);

impl Sid {
    pub fn levels(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for Sid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "<{}>", parts.join(","))
    }
}

/// `levels` codebooks, each `M × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub levels: Vec<Array2<f64>>,
}

impl Codebooks {
    pub fn new(levels: Vec<Array2<f64>>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::invalid("at least one codebook level is required"))?;
        let shape = first.dim();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::invalid("codebooks must be non-empty"));
        }
        for l in &levels {
            if l.dim() != shape {
                return Err(Error::invalid("all codebook levels must share M and d"));
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("codebook contains a non-finite value"));
            }
        }
        Ok(Self { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn size(&self) -> usize {
        self.levels[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].ncols()
    }
}

/// Result of quantizing one latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub sid: Sid,
    /// Sum of the selected codewords.
    pub reconstruction: Vec<f64>,
    /// `residuals[l]` is the residual entering level `l`; the last entry is the final residual.
    pub residuals: Vec<Vec<f64>>,
}

pub fn quantize(h: &[f64], books: &Codebooks) -> Result<Quantized> {
    let d = books.dim();
    if h.len() != d {
        return Err(Error::invalid(format!(
            "latent has dimension {}, codebooks expect {d}",
            h.len()
        )));
    }
    let mut residual = h.to_vec();
    let mut reconstruction = vec![0.0; d];
    let mut indices = Vec::with_capacity(books.depth());
    let mut residuals = Vec::with_capacity(books.depth() + 1);
    for book in &books.levels {
        let (idx, _) = nearest(&residual, book.as_slice().expect("standard layout"), d);
        let code = book.row(idx);
        residuals.push(residual.clone());
        for j in 0..d {
            residual[j] -= code[j];
            reconstruction[j] += code[j];
        }
        indices.push(idx as u16);
    }
    residuals.push(residual);
    Ok(Quantized {
        sid: Sid(indices),
        reconstruction,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqConfig {
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Lloyd iterations per codebook after gradient training; 0 disables.
    pub refine_iters: usize,
    pub seed: u64,
}

impl Default for RqConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64, 32],
            latent_dim: 32,
            levels: 3,
            codebook_size: 128,
            beta: 0.25,
            lr: 5e-4,
            epochs: 30,
            batch: 64,
            refine_iters: 20,
            seed: 0,
        }
    }
}

impl RqConfig {
    /// Production-size hidden widths for a 1024-wide text encoder.
    pub fn production() -> Self {
        Self {
            hidden: vec![512, 256, 128],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.latent_dim == 0 || self.levels == 0 || self.codebook_size == 0 {
            return bad("latent_dim, levels and codebook_size must be positive");
        }
        if self.codebook_size > u16::MAX as usize + 1 {
            return bad("codebook_size must fit in 16 bits");
        }
        if self.beta <= 0.0 || !self.beta.is_finite() {
            return bad("beta must be positive");
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebooks: Codebooks,
    pub beta: f64,
    pub config: RqConfig,
}

/// Anything that maps a (rotated) embedding to a semantic ID.
pub trait SemanticTokenizer {
    fn levels(&self) -> usize;
    fn codebook_size(&self) -> usize;
    fn tokenize(&self, x: &Embedding) -> Result<Sid>;
}

impl SemanticTokenizer for RqModel {
    fn levels(&self) -> usize {
        self.codebooks.depth()
    }

    fn codebook_size(&self) -> usize {
        self.codebooks.size()
    }

    fn tokenize(&self, x: &Embedding) -> Result<Sid> {
        Ok(quantize(&self.encode(x)?, &self.codebooks)?.sid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqTrainReport {
    /// Mean total loss per epoch.
    pub loss: Vec<f64>,
    /// Mean reconstruction loss per epoch.
    pub reconstruction: Vec<f64>,
    /// Codewords reseeded per epoch, summed over levels.
    pub reseeded: Vec<usize>,
}

impl RqModel {
    pub fn input_dim(&self) -> usize {
        self.encoder.layers[0].input_dim()
    }

    pub fn encode(&self, x: &Embedding) -> Result<Vec<f64>> {
        if x.dim() != self.input_dim() {
            return Err(Error::invalid(format!(
                "embedding has dimension {}, model expects {}",
                x.dim(),
                self.input_dim()
            )));
        }
        let row = ArrayView1::from(x.as_slice()).insert_axis(ndarray::Axis(0));
        Ok(self.encoder.forward(&row.to_owned()).row(0).to_vec())
    }

    /// Encode, quantize and decode.
    pub fn reconstruct(&self, x: &Embedding) -> Result<Vec<f64>> {
        let q = quantize(&self.encode(x)?, &self.codebooks)?;
        let row = Array2::from_shape_vec((1, q.reconstruction.len()), q.reconstruction)
            .expect("shape");
        Ok(self.decoder.forward(&row).row(0).to_vec())
    }
}

fn to_matrix(embeddings: &[&Embedding]) -> Array2<f64> {
    let dim = embeddings[0].dim();
    Array2::from_shape_fn((embeddings.len(), dim), |(i, j)| embeddings[i].0[j])
}

/// Seeds every level's codebook with k-means over the residuals entering that level.
fn init_codebooks(latents: &Array2<f64>, cfg: &RqConfig, seed: u64) -> Result<Codebooks> {
    let d = cfg.latent_dim;
    let mut residuals = latents.as_standard_layout().to_owned();
    let mut levels = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let km = kmeans(
            residuals.as_slice().expect("standard layout"),
            d,
            cfg.codebook_size,
            25,
            seed.wrapping_add(level as u64),
        );
        let book = Array2::from_shape_vec((cfg.codebook_size, d), km.centroids).expect("shape");
        for (i, mut row) in residuals.rows_mut().into_iter().enumerate() {
            row -= &book.row(km.assignments[i]);
        }
        levels.push(book);
    }
    Codebooks::new(levels)
}

pub fn train_rq(embeddings: &[Embedding], cfg: &RqConfig) -> Result<(RqModel, RqTrainReport)> {
    cfg.validate()?;
    if embeddings.is_empty() {
        return Err(Error::invalid("cannot train the quantizer on an empty corpus"));
    }
    let dim = embeddings[0].dim();
    if embeddings.iter().any(|e| e.dim() != dim) {
        return Err(Error::invalid("embeddings have inconsistent dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc_dims = vec![dim];
    enc_dims.extend(&cfg.hidden);
    enc_dims.push(cfg.latent_dim);
    let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
    let encoder = Mlp::new(&enc_dims, Activation::Silu, &mut rng);
    let decoder = Mlp::new(&dec_dims, Activation::Silu, &mut rng);

    let all: Vec<&Embedding> = embeddings.iter().collect();
    let latents = encoder.forward(&to_matrix(&all));
    let codebooks = init_codebooks(&latents, cfg, cfg.seed ^ 0x5eed)?;
    let mut model = RqModel {
        encoder,
        decoder,
        codebooks,
        beta: cfg.beta,
        config: cfg.clone(),
    };

    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    let mut report = RqTrainReport {
        loss: Vec::with_capacity(cfg.epochs),
        reconstruction: Vec::with_capacity(cfg.epochs),
        reseeded: Vec::with_capacity(cfg.epochs),
    };
    let (m, d) = (cfg.codebook_size, cfg.latent_dim);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut usage = vec![vec![0usize; m]; cfg.levels];
        let (mut total, mut recon_total) = (0.0, 0.0);
        let mut last_residuals: Vec<Vec<Vec<f64>>> = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Embedding> = chunk.iter().map(|&i| &embeddings[i]).collect();
            let b = batch.len() as f64;
            let x = to_matrix(&batch);
            let (h, enc_cache) = model.encoder.forward_cached(&x);
            let mut h_hat = Array2::<f64>::zeros((batch.len(), d));
            let mut book_grads: Vec<Array2<f64>> =
                (0..cfg.levels).map(|_| Array2::zeros((m, d))).collect();
            let mut commit = 0.0;
            let mut commit_grad = Array2::<f64>::zeros((batch.len(), d));
            let mut batch_residuals = vec![Vec::with_capacity(batch.len()); cfg.levels];
            for (i, hrow) in h.rows().into_iter().enumerate() {
                let q = quantize(hrow.as_slice().expect("row"), &model.codebooks)?;
                for (l, &idx) in q.sid.0.iter().enumerate() {
                    let idx = idx as usize;
                    usage[l][idx] += 1;
                    let code = model.codebooks.levels[l].row(idx);
                    let r = &q.residuals[l];
                    let mut g = book_grads[l].row_mut(idx);
                    for j in 0..d {
                        let diff = code[j] - r[j];
                        commit += diff * diff;
                        g[j] += 2.0 * cfg.beta * diff / b;
                        commit_grad[[i, j]] -= 2.0 * cfg.beta * diff / b;
                    }
                    batch_residuals[l].push(r.clone());
                }
                h_hat.row_mut(i).assign(&ArrayView1::from(&q.reconstruction[..]));
            }
            let (x_hat, dec_cache) = model.decoder.forward_cached(&h_hat);
            let diff = &x_hat - &x;
            let recon = diff.mapv(|v| v * v).sum() / b;
            let loss = recon + cfg.beta * commit / b;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    detail: "quantizer loss is not finite".into(),
                });
            }
            total += loss * b;
            recon_total += recon * b;
            let (dec_grads, grad_h_hat) = model.decoder.backward(&dec_cache, &(diff * (2.0 / b)));
            // Straight-through: d loss / d h = d loss / d h_hat.
            let (enc_grads, _) = model.encoder.backward(&enc_cache, &(grad_h_hat + &commit_grad));

            let mut grads = grads_as_slices(&enc_grads);
            grads.extend(grads_as_slices(&dec_grads));
            grads.extend(book_grads.iter().map(|g| g.as_slice().expect("layout")));
            let mut params = model.encoder.params_mut();
            params.extend(model.decoder.params_mut());
            params.extend(
                model
                    .codebooks
                    .levels
                    .iter_mut()
                    .map(|l| l.as_slice_mut().expect("layout")),
            );
            opt.step(&mut params, &grads);
            last_residuals = batch_residuals;
        }
        // Dead codewords move onto random residuals from the last batch.
        let mut reseeded = 0;
        for (l, counts) in usage.iter().enumerate() {
            for (idx, &c) in counts.iter().enumerate() {
                if c == 0 {
                    let pool = &last_residuals[l];
                    let pick = &pool[rng.gen_range(0..pool.len())];
                    model.codebooks.levels[l]
                        .row_mut(idx)
                        .assign(&ArrayView1::from(&pick[..]));
                    reseeded += 1;
                }
            }
        }
        let n = embeddings.len() as f64;
        report.loss.push(total / n);
        report.reconstruction.push(recon_total / n);
        report.reseeded.push(reseeded);
    }
    refine_codebooks(&mut model, embeddings, cfg.refine_iters);
    Ok((model, report))
}

/// Lloyd refinement of each codebook, coarse to fine, on the trained encoder's
/// latents. Codewords that attract no residual keep their position.
pub fn refine_codebooks(model: &mut RqModel, embeddings: &[Embedding], iters: usize) {
    if iters == 0 || embeddings.is_empty() {
        return;
    }
    let all: Vec<&Embedding> = embeddings.iter().collect();
    let mut residuals = model.encoder.forward(&to_matrix(&all)).as_standard_layout().to_owned();
    let (m, d) = (model.config.codebook_size, model.config.latent_dim);
    for level in 0..model.codebooks.levels.len() {
        let book = &mut model.codebooks.levels[level];
        let mut assign = vec![0usize; residuals.nrows()];
        for _ in 0..iters {
            let flat = book.as_slice().expect("layout").to_vec();
            let mut sums = Array2::<f64>::zeros((m, d));
            let mut counts = vec![0usize; m];
            let mut changed = false;
            for (i, r) in residuals.rows().into_iter().enumerate() {
                let (idx, _) = nearest(r.as_slice().expect("row"), &flat, d);
                changed |= assign[i] != idx;
                assign[i] = idx;
                counts[idx] += 1;
                let mut s = sums.row_mut(idx);
                s += &r;
            }
            for (idx, &c) in counts.iter().enumerate() {
                if c > 0 {
                    book.row_mut(idx).assign(&(&sums.row(idx) / c as f64));
                }
            }
            if !changed {
                break;
            }
        }
        let flat = book.as_slice().expect("layout").to_vec();
        for mut r in residuals.rows_mut() {
            let (idx, _) = nearest(r.as_slice().expect("row"), &flat, d);
            r -= &book.row(idx);
        }
    }
}

/// Semantic IDs for every POI, keyed by `poi_id`.
pub fn assign_sids(
    model: &impl SemanticTokenizer,
    pois: &[(PoiRecord, Embedding)],
) -> Result<BTreeMap<String, Sid>> {
    pois.iter()
        .map(|(p, x)| Ok((p.poi_id.clone(), model.tokenize(x)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    /// Exhaustive per-level scan, written independently of `nearest`.
    fn brute_force(h: &[f64], books: &Codebooks) -> (Vec<u16>, Vec<f64>) {
        let mut r = h.to_vec();
        let mut idx = Vec::new();
        for book in &books.levels {
            let dists: Vec<f64> = book
                .rows()
                .into_iter()
                .map(|c| c.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let best = dists.iter().position(|&d| d == min).unwrap();
            for (rv, cv) in r.iter_mut().zip(book.row(best)) {
                *rv -= cv;
            }
            idx.push(best as u16);
        }
        (idx, r)
    }

    #[test]
    fn exact_match_single_level() {
        let books = Codebooks::new(vec![array![[1.0, 0.0], [0.3, 0.7], [0.0, 1.0]]]).unwrap();
        let q = quantize(&[0.3, 0.7], &books).unwrap();
        assert_eq!(q.sid, Sid(vec![1]));
        assert_eq!(q.residuals.last().unwrap(), &vec![0.0, 0.0]);
    }

    #[test]
    fn constructed_two_level_decomposition() {
        let books = Codebooks::new(vec![
            array![[1.0, 0.0], [0.0, 0.0]],
            array![[0.0, 1.0], [0.0, 0.0]],
        ])
        .unwrap();
        let q = quantize(&[1.0, 1.0], &books).unwrap();
        assert_eq!(q.sid, Sid(vec![0, 0]));
        assert_eq!(q.reconstruction, vec![1.0, 1.0]);
        assert_eq!(q.residuals[2], vec![0.0, 0.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let books = Codebooks::new(vec![array![[1.0], [-1.0]]]).unwrap();
        assert_eq!(quantize(&[0.0], &books).unwrap().sid, Sid(vec![0]));
    }

    #[test]
    fn dimension_checked() {
        let books = Codebooks::new(vec![array![[1.0, 0.0]]]).unwrap();
        assert!(quantize(&[1.0], &books).is_err());
        assert!(Codebooks::new(vec![array![[1.0, 0.0]], array![[1.0]]]).is_err());
    }

    fn random_corpus(n: usize, dim: usize, seed: u64) -> Vec<Embedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                Embedding(v.into_iter().map(|x| x / n).collect())
            })
            .collect()
    }

    fn small_config() -> RqConfig {
        RqConfig {
            hidden: vec![32],
            latent_dim: 8,
            levels: 3,
            codebook_size: 16,
            epochs: 8,
            batch: 32,
            lr: 2e-3,
            ..RqConfig::default()
        }
    }

    #[test]
    fn trained_quantizer_matches_brute_force() {
        let corpus = random_corpus(400, 16, 1);
        let (model, _) = train_rq(&corpus, &small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let h: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q = quantize(&h, &model.codebooks).unwrap();
            let (idx, r) = brute_force(&h, &model.codebooks);
            assert_eq!(q.sid.0, idx);
            for j in 0..8 {
                assert!((h[j] - q.reconstruction[j] - q.residuals[3][j]).abs() < 1e-9);
                assert!((r[j] - q.residuals[3][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_vectors_reconstruct() {
        let v = random_corpus(1, 16, 3).remove(0);
        let corpus = vec![v.clone(); 16];
        let cfg = RqConfig {
            levels: 1,
            epochs: 400,
            lr: 1e-2,
            ..small_config()
        };
        let (model, report) = train_rq(&corpus, &cfg).unwrap();
        let x_hat = model.reconstruct(&v).unwrap();
        let err: f64 = x_hat.iter().zip(&v.0).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(err < 1e-3, "err {err}, trace tail {:?}", &report.loss[390..]);
    }

    #[test]
    fn training_is_deterministic_and_loss_trends_down() {
        let corpus = random_corpus(300, 16, 4);
        let cfg = small_config();
        let (a, ra) = train_rq(&corpus, &cfg).unwrap();
        let (b, rb) = train_rq(&corpus, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.loss.last().unwrap() < ra.loss.first().unwrap());
    }

    #[test]
    fn divergence_names_the_epoch() {
        let corpus = random_corpus(64, 16, 5);
        let cfg = RqConfig {
            lr: 1e300,
            ..small_config()
        };
        match train_rq(&corpus, &cfg) {
            Err(Error::TrainingFailure { epoch, .. }) => assert!(epoch < cfg.epochs),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn identical_embeddings_share_sid() {
        let corpus = random_corpus(200, 16, 6);
        let (model, _) = train_rq(&corpus, &small_config()).unwrap();
        let p = |id: &str| PoiRecord {
            poi_id: id.into(),
            location: crate::geocode::GeoPoint::new(0.0, 0.0).unwrap(),
            name: "x".into(),
            category: "y".into(),
            extra: Default::default(),
        };
        let sids = assign_sids(&model, &[(p("a"), corpus[0].clone()), (p("b"), corpus[0].clone())]).unwrap();
        assert_eq!(sids["a"], sids["b"]);
    }
}
