//! Small decoder-only transformer trained from scratch.
//!
//! Pre-norm blocks (LayerNorm → causal multi-head attention → residual, LayerNorm → GELU
//! MLP → residual), learned absolute positions, untied output head. All parameters live in
//! one flat vector so the optimizer and checkpoint code stay trivial; gradients are
//! derived by hand.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Scorer, ScoringSession, Session, Vocabulary};
use crate::error::{Error, Result};
use crate::io::{self, Header};
use crate::nn::Adam;
use crate::pid::TokenId;

pub const CHECKPOINT_FORMAT: &str = "poigen.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub context: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Tokens in this half-open id range end a segment: the position index restarts at
    /// zero after them. `None` numbers positions from the start of the sequence.
    #[serde(default)]
    pub segment_ends: Option<(TokenId, TokenId)>,
    /// Subtract `slope_h · distance` from head h's attention scores, slopes halving per
    /// head from 1/4, so some heads favour the most recent tokens.
    #[serde(default)]
    pub recency_bias: bool,
}

impl TransformerConfig {
    /// 4 layers, 4 heads, width 128, 256-token window.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            segment_ends: None,
            recency_bias: false,
        }
    }

    fn slope(&self, head: usize) -> f64 {
        if self.recency_bias {
            0.25 * 0.5f64.powi(head as i32)
        } else {
            0.0
        }
    }

    /// Position index of every token; causal, since each depends only on earlier tokens.
    pub fn position_ids(&self, tokens: &[TokenId]) -> Vec<usize> {
        let mut next = 0;
        tokens
            .iter()
            .map(|&t| {
                let p = next;
                next = if self.ends_segment(t) { 0 } else { p + 1 };
                p
            })
            .collect()
    }

    fn ends_segment(&self, t: TokenId) -> bool {
        self.segment_ends.is_some_and(|(a, b)| (a..b).contains(&t))
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.context == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy)]
struct Mat {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Mat {
    fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1_g: Mat,
    ln1_b: Mat,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    ln2_g: Mat,
    ln2_b: Mat,
    w1: Mat,
    b1: Mat,
    w2: Mat,
    b2: Mat,
}

#[derive(Debug, Clone)]
struct Index {
    tok: Mat,
    pos: Mat,
    layers: Vec<LayerIdx>,
    lnf_g: Mat,
    lnf_b: Mat,
    w_out: Mat,
    b_out: Mat,
    total: usize,
}

impl Index {
    fn new(c: &TransformerConfig) -> Self {
        let mut off = 0;
        let mut take = |rows, cols| {
            let m = Mat { off, rows, cols };
            off += rows * cols;
            m
        };
        let d = c.d_model;
        let tok = take(c.vocab_size, d);
        let pos = take(c.context, d);
        let layers = (0..c.n_layers)
            .map(|_| LayerIdx {
                ln1_g: take(1, d),
                ln1_b: take(1, d),
                wq: take(d, d),
                wk: take(d, d),
                wv: take(d, d),
                wo: take(d, d),
                ln2_g: take(1, d),
                ln2_b: take(1, d),
                w1: take(d, c.d_ff),
                b1: take(1, c.d_ff),
                w2: take(c.d_ff, d),
                b2: take(1, d),
            })
            .collect();
        let lnf_g = take(1, d);
        let lnf_b = take(1, d);
        let w_out = take(d, c.vocab_size);
        let b_out = take(1, c.vocab_size);
        Self {
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: off,
        }
    }
}

fn mat(p: &[f64], m: Mat) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((m.rows, m.cols), &p[m.range()]).expect("layout")
}

fn vec(p: &[f64], m: Mat) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[m.range()])
}

fn acc(grad: &mut [f64], m: Mat, g: &Array2<f64>) {
    for (dst, src) in grad[m.range()].iter_mut().zip(g.iter()) {
        *dst += src;
    }
}

fn acc_row_sum(grad: &mut [f64], m: Mat, g: &Array2<f64>) {
    let sums = g.sum_axis(Axis(0));
    for (dst, src) in grad[m.range()].iter_mut().zip(sums.iter()) {
        *dst += src;
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let mean = x.mean_axis(Axis(1)).expect("nonempty");
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("nonempty");
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * rstd.view().insert_axis(Axis(1));
    let y = &xhat * &g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns dx and accumulates dg, db.
fn layer_norm_back(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    grad: &mut [f64],
    gm: Mat,
    bm: Mat,
) -> Array2<f64> {
    acc_row_sum(grad, gm, &(dy * &cache.xhat));
    acc_row_sum(grad, bm, dy);
    let dxhat = dy * &g;
    let n = dxhat.ncols() as f64;
    let mean_d = dxhat.sum_axis(Axis(1)) / n;
    let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / n;
    let inner = dxhat - &mean_d.insert_axis(Axis(1)) - &cache.xhat * &mean_dx.insert_axis(Axis(1));
    inner * cache.rstd.view().insert_axis(Axis(1))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows_causal(s: &mut Array2<f64>) {
    for (i, mut row) in s.rows_mut().into_iter().enumerate() {
        let m = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j <= i { (*v - m).exp() } else { 0.0 };
            z += *v;
        }
        row /= z;
    }
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    a: Array2<f64>,
    g: Array2<f64>,
}

struct Cache {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
}

/// One training example: context tokens followed by the target PID tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub context: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Sample {
    fn input(&self) -> Vec<TokenId> {
        let mut v = self.context.clone();
        v.extend_from_slice(&self.target[..self.target.len() - 1]);
        v
    }

    /// Positions whose next token is a target token, paired with that token.
    fn supervised(&self) -> Vec<(usize, TokenId)> {
        let start = self.context.len() - 1;
        self.target.iter().enumerate().map(|(i, &t)| (start + i, t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`; decay is linear over all steps.
    pub lr_floor: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 16,
            lr: 3e-3,
            lr_floor: 0.1,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config("learning rate must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token cross-entropy of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Held-out next-token accuracy on target positions after each epoch.
    pub heldout_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: TransformerConfig,
    idx_cache: IndexHandle,
    params: Vec<f64>,
}

// Index is derived from config; kept out of equality and serialization.
#[derive(Debug, Clone)]
struct IndexHandle(Index);

impl PartialEq for IndexHandle {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Transformer {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let idx = Index::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut params = vec![0.0; idx.total];
        let mut fill = |m: Mat, sd: f64, rng: &mut ChaCha8Rng| {
            let n = Normal::new(0.0, sd).expect("positive std");
            for p in &mut params[m.range()] {
                *p = n.sample(rng);
            }
        };
        fill(idx.tok, std, &mut rng);
        fill(idx.pos, std, &mut rng);
        for l in &idx.layers {
            fill(l.wq, std, &mut rng);
            fill(l.wk, std, &mut rng);
            fill(l.wv, std, &mut rng);
            fill(l.wo, proj_std, &mut rng);
            fill(l.w1, std, &mut rng);
            fill(l.w2, proj_std, &mut rng);
        }
        fill(idx.w_out, std, &mut rng);
        for l in &idx.layers {
            params[l.ln1_g.range()].fill(1.0);
            params[l.ln2_g.range()].fill(1.0);
        }
        params[idx.lnf_g.range()].fill(1.0);
        Ok(Self {
            config,
            idx_cache: IndexHandle(idx),
            params,
        })
    }

    pub fn from_params(config: TransformerConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let idx = Index::new(&config);
        if params.len() != idx.total {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                idx.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(Self {
            config,
            idx_cache: IndexHandle(idx),
            params,
        })
    }

    fn idx(&self) -> &Index {
        &self.idx_cache.0
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Offset range of the output projection inside [`Transformer::params`].
    pub fn output_weights_range(&self) -> std::ops::Range<usize> {
        self.idx().w_out.range()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.context {
            return Err(Error::invalid(format!(
                "{} tokens exceed the {}-token context window",
                tokens.len(),
                self.config.context
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    fn forward(&self, tokens: &[TokenId]) -> Cache {
        let p = &self.params;
        let idx = self.idx();
        let c = &self.config;
        let t_len = tokens.len();
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let tok = mat(p, idx.tok);
        let pos = mat(p, idx.pos);
        let pid = c.position_ids(tokens);
        let mut x = Array2::from_shape_fn((t_len, c.d_model), |(i, j)| {
            tok[[tokens[i] as usize, j]] + pos[[pid[i], j]]
        });
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in &idx.layers {
            let (h1, ln1) = layer_norm(&x, vec(p, l.ln1_g), vec(p, l.ln1_b));
            let q = h1.dot(&mat(p, l.wq));
            let k = h1.dot(&mat(p, l.wk));
            let v = h1.dot(&mat(p, l.wv));
            let mut att = Array2::zeros((t_len, c.d_model));
            let mut probs = Vec::with_capacity(c.n_heads);
            for h in 0..c.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                let m = c.slope(h);
                if m > 0.0 {
                    sc.indexed_iter_mut().for_each(|((i, j), v)| *v -= m * i.abs_diff(j) as f64);
                }
                softmax_rows_causal(&mut sc);
                att.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            x = x + att.dot(&mat(p, l.wo));
            let (h2, ln2) = layer_norm(&x, vec(p, l.ln2_g), vec(p, l.ln2_b));
            let a = h2.dot(&mat(p, l.w1)) + vec(p, l.b1);
            let g = a.mapv(gelu);
            x = x + g.dot(&mat(p, l.w2)) + vec(p, l.b2);
            layers.push(LayerCache {
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                att,
                ln2,
                h2,
                a,
                g,
            });
        }
        let (hf, lnf) = layer_norm(&x, vec(p, idx.lnf_g), vec(p, idx.lnf_b));
        Cache {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            hf,
        }
    }

    fn logits_at(&self, cache: &Cache, rows: &[usize]) -> Array2<f64> {
        let idx = self.idx();
        cache
            .hf
            .select(Axis(0), rows)
            .dot(&mat(&self.params, idx.w_out))
            + vec(&self.params, idx.b_out)
    }

    /// Logits at every position, row `i` scoring the token after `tokens[..=i]`.
    pub fn all_logits(&self, tokens: &[TokenId]) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let cache = self.forward(tokens);
        let rows: Vec<usize> = (0..tokens.len()).collect();
        Ok(self.logits_at(&cache, &rows))
    }

    /// Backpropagates `dlogits` (rows aligned with `rows`) into `grad`.
    fn backward(&self, cache: &Cache, rows: &[usize], dlogits: &Array2<f64>, grad: &mut [f64]) {
        let p = &self.params;
        let idx = self.idx();
        let c = &self.config;
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let hsel = cache.hf.select(Axis(0), rows);
        acc(grad, idx.w_out, &hsel.t().dot(dlogits));
        acc_row_sum(grad, idx.b_out, dlogits);
        let dhsel = dlogits.dot(&mat(p, idx.w_out).t());
        let mut dhf = Array2::zeros(cache.hf.raw_dim());
        for (r, &i) in rows.iter().enumerate() {
            let mut row = dhf.row_mut(i);
            row += &dhsel.row(r);
        }
        let mut dx = layer_norm_back(&dhf, &cache.lnf, vec(p, idx.lnf_g), grad, idx.lnf_g, idx.lnf_b);

        for (l, lc) in idx.layers.iter().zip(&cache.layers).rev() {
            // MLP branch.
            acc(grad, l.w2, &lc.g.t().dot(&dx));
            acc_row_sum(grad, l.b2, &dx);
            let dg = dx.dot(&mat(p, l.w2).t());
            let mut da = dg;
            da.zip_mut_with(&lc.a, |d, &a| *d *= gelu_grad(a));
            acc(grad, l.w1, &lc.h2.t().dot(&da));
            acc_row_sum(grad, l.b1, &da);
            let dh2 = da.dot(&mat(p, l.w1).t());
            dx = dx + layer_norm_back(&dh2, &lc.ln2, vec(p, l.ln2_g), grad, l.ln2_g, l.ln2_b);

            // Attention branch.
            acc(grad, l.wo, &lc.att.t().dot(&dx));
            let datt = dx.dot(&mat(p, l.wo).t());
            let mut dq = Array2::zeros(lc.q.raw_dim());
            let mut dk = Array2::zeros(lc.k.raw_dim());
            let mut dv = Array2::zeros(lc.v.raw_dim());
            for (h, pr) in lc.probs.iter().enumerate() {
                let cols = s![.., h * dh..(h + 1) * dh];
                let dout = datt.slice(cols);
                dv.slice_mut(cols).assign(&pr.t().dot(&dout));
                let dp = dout.dot(&lc.v.slice(cols).t());
                let row_dot = (&dp * pr).sum_axis(Axis(1));
                let ds = (dp - &row_dot.insert_axis(Axis(1))) * pr * scale;
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            acc(grad, l.wq, &lc.h1.t().dot(&dq));
            acc(grad, l.wk, &lc.h1.t().dot(&dk));
            acc(grad, l.wv, &lc.h1.t().dot(&dv));
            let dh1 = dq.dot(&mat(p, l.wq).t()) + dk.dot(&mat(p, l.wk).t()) + dv.dot(&mat(p, l.wv).t());
            dx = dx + layer_norm_back(&dh1, &lc.ln1, vec(p, l.ln1_g), grad, l.ln1_g, l.ln1_b);
        }

        let d = c.d_model;
        let pid = c.position_ids(&cache.tokens);
        for (i, &t) in cache.tokens.iter().enumerate() {
            let row = dx.row(i);
            let to = idx.tok.off + t as usize * d;
            let po = idx.pos.off + pid[i] * d;
            for j in 0..d {
                grad[to + j] += row[j];
                grad[po + j] += row[j];
            }
        }
    }

    /// Summed target-token cross-entropy of one sample; adds its gradient into `grad`
    /// when given. Returns (loss, number of target tokens).
    pub fn sample_loss(&self, sample: &Sample, grad: Option<&mut [f64]>) -> Result<(f64, usize)> {
        if sample.target.is_empty() || sample.context.is_empty() {
            return Err(Error::invalid("sample needs context and target tokens"));
        }
        let input = sample.input();
        self.check_tokens(&input)?;
        let sup = sample.supervised();
        let rows: Vec<usize> = sup.iter().map(|s| s.0).collect();
        let cache = self.forward(&input);
        let logits = self.logits_at(&cache, &rows);
        let mut loss = 0.0;
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for (r, &(_, y)) in sup.iter().enumerate() {
            let row = logits.row(r);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            loss += m + z.ln() - row[y as usize];
            let mut drow = dlogits.row_mut(r);
            for (j, d) in drow.iter_mut().enumerate() {
                *d = (row[j] - m).exp() / z;
            }
            drow[y as usize] -= 1.0;
        }
        if let Some(g) = grad {
            self.backward(&cache, &rows, &dlogits, g);
        }
        Ok((loss, sup.len()))
    }

    /// Gradient of a sample's loss with respect to the logits at every input position.
    /// Rows for positions that do not predict a target token are exactly zero.
    pub fn logit_gradients(&self, sample: &Sample) -> Result<Array2<f64>> {
        let input = sample.input();
        let all = self.all_logits(&input)?;
        let mut out = Array2::zeros(all.raw_dim());
        for (i, y) in sample.supervised() {
            let probs = super::softmax(all.row(i).as_slice().expect("contiguous"));
            let mut row = out.row_mut(i);
            row.assign(&Array1::from(probs));
            row[y as usize] -= 1.0;
        }
        Ok(out)
    }

    /// Fraction of target positions where the argmax of the full-vocabulary logits is the
    /// true token.
    pub fn next_token_accuracy(&self, samples: &[Sample]) -> Result<f64> {
        let (mut hit, mut n) = (0usize, 0usize);
        for s in samples {
            let input = s.input();
            self.check_tokens(&input)?;
            let sup = s.supervised();
            let rows: Vec<usize> = sup.iter().map(|x| x.0).collect();
            let logits = self.logits_at(&self.forward(&input), &rows);
            for (r, &(_, y)) in sup.iter().enumerate() {
                let row = logits.row(r);
                let best = (0..row.len())
                    .fold(0, |b, j| if row[j] > row[b] { j } else { b });
                hit += (best == y as usize) as usize;
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
    }

    pub fn train(&mut self, train: &[Sample], heldout: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        for s in train.iter().chain(heldout) {
            if s.target.is_empty() || s.context.is_empty() {
                return Err(Error::invalid("sample needs context and target tokens"));
            }
            self.check_tokens(&s.input())?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(cfg.lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let steps_per_epoch = train.len().div_ceil(cfg.batch);
        let total_steps = (steps_per_epoch * cfg.epochs) as f64;
        let mut step = 0usize;
        let mut grad = vec![0.0; self.params.len()];
        let mut report = TrainReport {
            epoch_loss: Vec::new(),
            heldout_accuracy: Vec::new(),
        };
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (mut epoch_loss, mut epoch_tokens) = (0.0, 0usize);
            for chunk in order.chunks(cfg.batch) {
                grad.fill(0.0);
                let mut tokens = 0;
                for &i in chunk {
                    let (l, n) = self.sample_loss(&train[i], Some(&mut grad))?;
                    epoch_loss += l;
                    tokens += n;
                }
                epoch_tokens += tokens;
                let inv = 1.0 / tokens as f64;
                let mut norm = 0.0;
                for g in grad.iter_mut() {
                    *g *= inv;
                    norm += *g * *g;
                }
                let norm = norm.sqrt();
                if !norm.is_finite() {
                    return Err(Error::TrainingFailure {
                        epoch,
                        detail: "non-finite gradient".into(),
                    });
                }
                if norm > cfg.clip_norm {
                    let f = cfg.clip_norm / norm;
                    grad.iter_mut().for_each(|g| *g *= f);
                }
                let frac = step as f64 / total_steps;
                adam.lr = cfg.lr * (1.0 - (1.0 - cfg.lr_floor) * frac);
                adam.step(&mut [&mut self.params[..]], &[&grad[..]]);
                step += 1;
            }
            let mean = epoch_loss / epoch_tokens as f64;
            if !mean.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    detail: format!("loss {mean}"),
                });
            }
            report.epoch_loss.push(mean);
            report.heldout_accuracy.push(self.next_token_accuracy(heldout)?);
        }
        Ok(report)
    }
}

impl Scorer for Transformer {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_window(&self) -> usize {
        self.config.context
    }

    fn next_token_logits(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let cache = self.forward(tokens);
        Ok(self.logits_at(&cache, &[tokens.len() - 1]).into_raw_vec_and_offset().0)
    }

    fn session(&self, prefix: &[TokenId]) -> Result<Session<'_>> {
        self.check_tokens(prefix)?;
        let mut s = KvSession {
            model: self,
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            len: 0,
            next_pos: 0,
            logits: Vec::new(),
        };
        for &t in prefix {
            s.push(t)?;
        }
        Ok(Box::new(s))
    }
}

/// Incremental decoding with cached keys and values.
#[derive(Clone)]
struct KvSession<'a> {
    model: &'a Transformer,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    next_pos: usize,
    logits: Vec<f64>,
}

fn ln_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) * rstd * g + b)
        .collect()
}

/// `x · W (+ bias)` for a row-major `W` stored at `m`.
fn vecmat(x: &[f64], p: &[f64], m: Mat, bias: Option<Mat>) -> Vec<f64> {
    let mut out = match bias {
        Some(b) => p[b.range()].to_vec(),
        None => vec![0.0; m.cols],
    };
    let w = &p[m.range()];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * m.cols..(i + 1) * m.cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

impl<'a> ScoringSession<'a> for KvSession<'a> {
    fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn push(&mut self, token: TokenId) -> Result<()> {
        let m = self.model;
        let c = &m.config;
        if self.len >= c.context {
            return Err(Error::invalid("context window exhausted"));
        }
        if token as usize >= c.vocab_size {
            return Err(Error::invalid(format!("token {token} outside vocabulary")));
        }
        let p = &m.params[..];
        let idx = m.idx();
        let d = c.d_model;
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (to, po) = (idx.tok.off + token as usize * d, idx.pos.off + self.next_pos * d);
        let mut x: Vec<f64> = (0..d).map(|j| p[to + j] + p[po + j]).collect();
        let n = self.len + 1;
        let mut scores = vec![0.0; n];
        for (li, l) in idx.layers.iter().enumerate() {
            let h1 = ln_row(&x, &p[l.ln1_g.range()], &p[l.ln1_b.range()]);
            let q = vecmat(&h1, p, l.wq, None);
            self.keys[li].extend(vecmat(&h1, p, l.wk, None));
            self.values[li].extend(vecmat(&h1, p, l.wv, None));
            let (keys, vals) = (&self.keys[li], &self.values[li]);
            let mut att = vec![0.0; d];
            for h in 0..c.n_heads {
                let r = h * dh..(h + 1) * dh;
                let m = c.slope(h);
                for (j, sc) in scores.iter_mut().enumerate() {
                    let k = &keys[j * d + r.start..j * d + r.end];
                    *sc = k.iter().zip(&q[r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale
                        - m * (n - 1 - j) as f64;
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - mx).exp();
                    z += *sc;
                }
                for (j, &w) in scores.iter().enumerate() {
                    let v = &vals[j * d + r.start..j * d + r.end];
                    for (o, &vv) in att[r.clone()].iter_mut().zip(v) {
                        *o += w / z * vv;
                    }
                }
            }
            for (xi, o) in x.iter_mut().zip(vecmat(&att, p, l.wo, None)) {
                *xi += o;
            }
            let h2 = ln_row(&x, &p[l.ln2_g.range()], &p[l.ln2_b.range()]);
            let g: Vec<f64> = vecmat(&h2, p, l.w1, Some(l.b1)).into_iter().map(gelu).collect();
            for (xi, o) in x.iter_mut().zip(vecmat(&g, p, l.w2, Some(l.b2))) {
                *xi += o;
            }
        }
        let hf = ln_row(&x, &p[idx.lnf_g.range()], &p[idx.lnf_b.range()]);
        self.logits = vecmat(&hf, p, idx.w_out, Some(idx.b_out));
        self.len = n;
        self.next_pos = if c.ends_segment(token) { 0 } else { self.next_pos + 1 };
        Ok(())
    }

    fn fork(&self) -> Session<'a> {
        Box::new(self.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub vocab: Vocabulary,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub report: Option<TrainReport>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn transformer(&self) -> Result<Transformer> {
        if self.model.vocab_size != self.vocab.size() {
            return Err(Error::invalid("checkpoint vocabulary does not match model shape"));
        }
        Transformer::from_params(self.model, self.params.clone())
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint, meta: impl Serialize) -> Result<()> {
    io::write_json(
        path,
        &Header::new(CHECKPOINT_FORMAT, CHECKPOINT_VERSION).with_meta(meta),
        ckpt,
    )
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (_, ckpt) = io::read_json(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
    Ok(ckpt)
}
