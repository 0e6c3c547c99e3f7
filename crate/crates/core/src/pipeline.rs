//! End-to-end orchestration: POI tokenization, sample construction, training, search and
//! evaluation, with switches for each ablation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{fit_anchors, geope_rotate, AnchorSet};
use crate::datagen::{expand_prefixes, split_by_user, LogRecord, Splits};
use crate::decode::{beam_search, DecodeConfig, RetrievalResult};
use crate::embed::{Embedding, PoiRecord, TextEmbedder};
use crate::error::{Error, Result};
use crate::eval::{build_report, AblationFlags, EvalReport, QueryRecord, RecordHit};
use crate::geocode::{encode_geohash, Gid};
use crate::hashing::hash_bytes;
use crate::io::{self, Header};
use crate::pid::{build_pids, Pid, PidLayout, PidTrie, SharedTrie, TokenId};
use crate::proximity::{label_proximity, train_proximity, ProximityConfig, ProximityModel, ProximityReport, ProximitySample};
use crate::quantizer::{train_rq, RqConfig, RqModel, RqTrainReport, SemanticTokenizer, Sid};
use crate::seqmodel::{
    linearize, HistoryEntry, Sample, SearchContext, TrainConfig, TrainReport, Transformer, TransformerConfig,
    Vocabulary,
};

pub const BUNDLE_FORMAT: &str = "poigen.bundle";
pub const BUNDLE_VERSION: u32 = 1;

/// Transformer shape without the vocabulary size, which is only known after tokenization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub context: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Restart position indices at every logged interaction, so the current query always
    /// sits at the same offsets whatever the history length.
    #[serde(default)]
    pub per_entry_positions: bool,
    /// Bias attention toward recent tokens, so the current interaction outweighs history.
    #[serde(default)]
    pub recency_bias: bool,
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            context: self.context,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            segment_ends: None,
            recency_bias: self.recency_bias,
        }
    }

    pub fn for_vocab(&self, vocab: &Vocabulary) -> TransformerConfig {
        let ends = vocab.layout.dedup_range();
        TransformerConfig {
            segment_ends: self.per_entry_positions.then_some((ends.start, ends.end)),
            ..self.with_vocab(vocab.size())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub embed_dim: usize,
    /// Number of GeoPE anchors.
    pub omega: usize,
    pub anchor_iters: usize,
    pub gid_len: usize,
    pub dedup_max: usize,
    pub rq: RqConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub proximity: ProximityConfig,
    pub decode: DecodeConfig,
    pub ks: Vec<usize>,
    pub valid_frac: f64,
    pub test_frac: f64,
    /// Cap on validation samples scored for held-out accuracy each epoch.
    pub max_heldout: usize,
    pub max_eval_queries: Option<usize>,
    /// Train on every logged interaction, not only the final one of each sequence.
    pub train_all_interactions: bool,
    pub flags: AblationFlags,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TransformerConfig::desk(0);
        Self {
            seed: 0,
            embed_dim: 64,
            omega: 8,
            anchor_iters: 100,
            gid_len: 6,
            dedup_max: 16,
            rq: RqConfig::default(),
            model: ModelShape {
                context: t.context,
                d_model: t.d_model,
                n_layers: t.n_layers,
                n_heads: t.n_heads,
                d_ff: t.d_ff,
                per_entry_positions: true,
                recency_bias: true,
            },
            train: TrainConfig::default(),
            proximity: ProximityConfig::default(),
            decode: DecodeConfig::default(),
            ks: vec![5, 10, 20],
            valid_frac: 0.1,
            test_frac: 0.1,
            max_heldout: 200,
            max_eval_queries: None,
            train_all_interactions: true,
            flags: AblationFlags::default(),
        }
    }
}

impl PipelineConfig {
    /// A small model and short schedules that train in about a minute on one core.
    pub fn compact() -> Self {
        Self {
            rq: RqConfig {
                epochs: 15,
                ..RqConfig::default()
            },
            model: ModelShape {
                context: 128,
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                d_ff: 64,
                per_entry_positions: true,
                recency_bias: true,
            },
            train: TrainConfig {
                epochs: 12,
                batch: 16,
                lr: 3e-3,
                ..TrainConfig::default()
            },
            max_heldout: 100,
            ..Self::default()
        }
    }

    /// Effective PID geohash length (zero without explicit geographic IDs).
    pub fn pid_gid_len(&self) -> usize {
        if self.flags.no_egi {
            0
        } else {
            self.gid_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gid_len == 0 || self.gid_len > crate::geocode::MAX_GEOHASH_LEN {
            return Err(Error::Config(format!("gid_len {} out of 1..=12", self.gid_len)));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if !self.flags.no_geope && (self.omega == 0 || !self.embed_dim.is_multiple_of(2 * self.omega)) {
            return Err(Error::Config(format!(
                "embedding dimension {} must be a multiple of 2·omega = {}",
                self.embed_dim,
                2 * self.omega
            )));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&(self.valid_frac + self.test_frac)) || self.test_frac <= 0.0 {
            return Err(Error::Config("split fractions must be in (0, 1) combined".into()));
        }
        self.rq.validate()?;
        self.model.with_vocab(1).validate()?;
        self.train.validate()?;
        self.proximity.validate()?;
        self.decode.validate()
    }

    /// Independent seed for a named stage, derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        hash_bytes(stage.as_bytes(), self.seed)
    }

    pub fn layout(&self) -> PidLayout {
        PidLayout {
            gid_len: self.pid_gid_len(),
            sid_levels: self.rq.levels,
            codebook_size: self.rq.codebook_size,
            dedup_max: self.dedup_max,
        }
    }

    pub fn embedder(&self) -> Result<TextEmbedder> {
        TextEmbedder::new(self.embed_dim, self.stage_seed("embed"))
    }
}

pub fn fit_stage_anchors(pois: &[PoiRecord], cfg: &PipelineConfig) -> Result<Option<AnchorSet>> {
    if cfg.flags.no_geope {
        return Ok(None);
    }
    fit_anchors(pois, cfg.omega, cfg.stage_seed("anchors"), cfg.anchor_iters).map(Some)
}

/// Text embedding of a POI, rotated by its location when anchors are given.
pub fn poi_embedding(poi: &PoiRecord, embedder: &TextEmbedder, anchors: Option<&AnchorSet>) -> Result<Embedding> {
    let e = embedder.embed_poi(poi)?;
    match anchors {
        Some(a) => geope_rotate(&e, poi.location, a),
        None => Ok(e),
    }
}

pub fn train_stage_rq(
    pois: &[PoiRecord],
    anchors: Option<&AnchorSet>,
    cfg: &PipelineConfig,
) -> Result<(RqModel, RqTrainReport)> {
    let embedder = cfg.embedder()?;
    let embeddings = pois
        .iter()
        .map(|p| poi_embedding(p, &embedder, anchors))
        .collect::<Result<Vec<_>>>()?;
    let rq = RqConfig {
        seed: cfg.stage_seed("rq"),
        ..cfg.rq.clone()
    };
    train_rq(&embeddings, &rq)
}

/// Maps POIs to `(gid, sid)` pairs with the trained models.
#[derive(Debug, Clone)]
pub struct PoiTokenizer {
    pub embedder: TextEmbedder,
    pub anchors: Option<AnchorSet>,
    pub rq: RqModel,
    pub layout: PidLayout,
}

impl PoiTokenizer {
    pub fn new(cfg: &PipelineConfig, anchors: Option<AnchorSet>, rq: RqModel) -> Result<Self> {
        let layout = cfg.layout();
        if rq.levels() != layout.sid_levels || rq.codebook_size() != layout.codebook_size {
            return Err(Error::Config("RQ model shape differs from the configured layout".into()));
        }
        Ok(Self {
            embedder: cfg.embedder()?,
            anchors,
            rq,
            layout,
        })
    }

    pub fn sid(&self, poi: &PoiRecord) -> Result<Sid> {
        self.rq
            .tokenize(&poi_embedding(poi, &self.embedder, self.anchors.as_ref())?)
    }

    pub fn gid(&self, poi: &PoiRecord) -> Result<Option<Gid>> {
        if self.layout.gid_len == 0 {
            return Ok(None);
        }
        encode_geohash(poi.location, self.layout.gid_len).map(Some)
    }

    pub fn pids(&self, pois: &[PoiRecord]) -> Result<BTreeMap<String, Pid>> {
        let mut gids = BTreeMap::new();
        let mut sids = BTreeMap::new();
        for p in pois {
            if let Some(g) = self.gid(p)? {
                gids.insert(p.poi_id.clone(), g);
            }
            sids.insert(p.poi_id.clone(), self.sid(p)?);
        }
        build_pids(pois, &gids, &sids, &self.layout)
    }
}

/// Character vocabulary over POI names and all logged queries.
pub fn build_vocab(pois: &[PoiRecord], records: &[LogRecord], cfg: &PipelineConfig) -> Result<Vocabulary> {
    let texts = pois.iter().map(|p| p.name.as_str()).chain(records.iter().flat_map(|r| {
        std::iter::once(r.query.as_str()).chain(r.history.iter().map(|h| h.query.as_str()))
    }));
    Vocabulary::from_texts(cfg.layout(), cfg.gid_len, texts)
}

pub fn context_of(record: &LogRecord, pids: &BTreeMap<String, Pid>, with_history: bool) -> Result<SearchContext> {
    let history = if with_history {
        record
            .history
            .iter()
            .map(|h| {
                let pid = pids
                    .get(&h.poi_id)
                    .ok_or_else(|| Error::invalid(format!("history POI {} has no PID", h.poi_id)))?;
                Ok(HistoryEntry {
                    query: h.query.clone(),
                    location: h.location,
                    pid: pid.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(SearchContext {
        history,
        query: record.query.clone(),
        location: record.location,
    })
}

pub fn make_samples(
    records: &[LogRecord],
    pids: &BTreeMap<String, Pid>,
    vocab: &Vocabulary,
    context_window: usize,
    with_history: bool,
) -> Result<Vec<Sample>> {
    let pid_len = vocab.layout.pid_len();
    let max_ctx = (context_window + 1)
        .checked_sub(pid_len)
        .ok_or_else(|| Error::Config("context window shorter than a PID".into()))?;
    records
        .iter()
        .map(|r| {
            let ctx = context_of(r, pids, with_history)?;
            let target = pids
                .get(&r.target)
                .ok_or_else(|| Error::invalid(format!("target POI {} has no PID", r.target)))?;
            Ok(Sample {
                context: linearize(&ctx, vocab, max_ctx)?,
                target: vocab.layout.tokens(target),
            })
        })
        .collect()
}

pub fn proximity_samples(
    records: &[LogRecord],
    pois: &BTreeMap<String, PoiRecord>,
    gid_len: usize,
) -> Result<Vec<ProximitySample>> {
    records
        .iter()
        .map(|r| {
            let poi = pois
                .get(&r.target)
                .ok_or_else(|| Error::invalid(format!("unknown target POI {}", r.target)))?;
            Ok(ProximitySample {
                query: r.query.clone(),
                label: label_proximity(r.location, poi.location, gid_len)?,
            })
        })
        .collect()
}

pub fn train_stage_proximity(
    records: &[LogRecord],
    pois: &BTreeMap<String, PoiRecord>,
    cfg: &PipelineConfig,
) -> Result<(ProximityModel, ProximityReport)> {
    let pc = ProximityConfig {
        gid_len: cfg.gid_len,
        seed: cfg.stage_seed("proximity"),
        ..cfg.proximity.clone()
    };
    train_proximity(&proximity_samples(records, pois, cfg.gid_len)?, &pc)
}

/// Training records after optional expansion of every interaction into its own sample.
pub fn training_records(train: &[LogRecord], cfg: &PipelineConfig) -> Vec<LogRecord> {
    if cfg.train_all_interactions {
        train.iter().flat_map(expand_prefixes).collect()
    } else {
        train.to_vec()
    }
}

pub fn train_stage_model(
    vocab: &Vocabulary,
    train: &[Sample],
    heldout: &[Sample],
    cfg: &PipelineConfig,
) -> Result<(Transformer, TrainReport)> {
    let mut model = Transformer::new(cfg.model.for_vocab(vocab), cfg.stage_seed("model-init"))?;
    let tc = TrainConfig {
        seed: cfg.stage_seed("model-train"),
        ..cfg.train.clone()
    };
    let heldout = &heldout[..heldout.len().min(cfg.max_heldout)];
    let report = model.train(train, heldout, &tc)?;
    Ok((model, report))
}

/// A trained retrieval stack ready to answer queries.
pub struct Engine {
    pub vocab: Vocabulary,
    pub model: Transformer,
    pub trie: SharedTrie,
    pub proximity: Option<ProximityModel>,
    pub pois: BTreeMap<String, PoiRecord>,
    pub pids: BTreeMap<String, Pid>,
    pub tokenizer: Option<PoiTokenizer>,
}

impl Engine {
    pub fn search(&self, ctx: &SearchContext, cfg: &DecodeConfig) -> Result<RetrievalResult> {
        let trie = self.trie.load();
        let proximity = self.proximity.as_ref().filter(|_| self.vocab.layout.gid_len > 0);
        beam_search(&self.model, &trie, &self.vocab, ctx, proximity, cfg)
    }

    /// Every PID token sequence known to the engine.
    pub fn known_pids(&self) -> BTreeSet<Vec<TokenId>> {
        self.pids.values().map(|p| self.vocab.layout.tokens(p)).collect()
    }

    /// Decodes every record at every K in `cfg.ks` under `cfg.flags`.
    pub fn evaluate(
        &self,
        records: &[LogRecord],
        cfg: &PipelineConfig,
    ) -> Result<(BTreeMap<usize, Vec<QueryRecord>>, EvalReport)> {
        let mut by_k: BTreeMap<usize, Vec<QueryRecord>> = BTreeMap::new();
        for r in records {
            let ctx = context_of(r, &self.pids, !cfg.flags.no_history)?;
            let truth = self
                .pois
                .get(&r.target)
                .ok_or_else(|| Error::invalid(format!("unknown target POI {}", r.target)))?;
            for &k in &cfg.ks {
                let dc = DecodeConfig {
                    k,
                    beam_width: cfg.decode.beam_width.map(|w| w.max(k)),
                    tcg_enabled: cfg.decode.tcg_enabled && !cfg.flags.no_tcg,
                    ssp_enabled: cfg.decode.ssp_enabled && !cfg.flags.no_ssp,
                    ..cfg.decode.clone()
                };
                let res = self.search(&ctx, &dc)?;
                by_k.entry(k).or_default().push(self.record(r, truth, k, res));
            }
        }
        let report = build_report(&by_k, &self.known_pids(), cfg.flags);
        Ok((by_k, report))
    }

    fn record(&self, r: &LogRecord, truth: &PoiRecord, k: usize, res: RetrievalResult) -> QueryRecord {
        QueryRecord {
            query_id: r.query_id.clone(),
            k,
            user_location: r.location,
            truth_poi_id: truth.poi_id.clone(),
            truth_location: truth.location,
            hits: res
                .hits
                .into_iter()
                .map(|h| RecordHit {
                    location: h.poi_id.as_ref().and_then(|id| self.pois.get(id)).map(|p| p.location),
                    poi_id: h.poi_id,
                    tokens: h.tokens,
                    log_prob: h.log_prob,
                })
                .collect(),
            diagnostics: res.diagnostics,
        }
    }

    /// Tokenizes `new` POIs with the frozen models, appends them to a copy of the current
    /// trie and publishes it. Existing PIDs never change; new collisions take the next
    /// free dedup code.
    pub fn insert_pois(&mut self, new: &[PoiRecord]) -> Result<()> {
        let tok = self
            .tokenizer
            .as_ref()
            .ok_or_else(|| Error::invalid("engine was loaded without its POI tokenizer"))?;
        let layout = self.vocab.layout;
        let mut next_dedup: BTreeMap<(Option<Gid>, Sid), u16> = BTreeMap::new();
        for p in self.pids.values() {
            let e = next_dedup.entry((p.gid.clone(), p.sid.clone())).or_default();
            *e = (*e).max(p.dedup + 1);
        }
        let mut trie = (*self.trie.load()).clone();
        let mut added = Vec::with_capacity(new.len());
        let mut sorted: Vec<&PoiRecord> = new.iter().collect();
        sorted.sort_by(|a, b| a.poi_id.cmp(&b.poi_id));
        for p in sorted {
            if self.pois.contains_key(&p.poi_id) {
                return Err(Error::Conflict(format!("POI {} already indexed", p.poi_id)));
            }
            let key = (tok.gid(p)?, tok.sid(p)?);
            let slot = next_dedup.entry(key.clone()).or_default();
            if *slot as usize >= layout.dedup_max {
                return Err(Error::Capacity {
                    cell: format!("{}{}", key.0.as_ref().map_or("", Gid::as_str), key.1),
                    count: *slot as usize + 1,
                    limit: layout.dedup_max,
                });
            }
            let pid = Pid {
                gid: key.0,
                sid: key.1,
                dedup: *slot,
            };
            *slot += 1;
            trie.insert(&layout.tokens(&pid), &p.poi_id)?;
            added.push((p.clone(), pid));
        }
        for (p, pid) in added {
            self.pids.insert(p.poi_id.clone(), pid);
            self.pois.insert(p.poi_id.clone(), p);
        }
        self.trie.swap(trie);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub rq: RqTrainReport,
    pub collision_rate: f64,
    pub model: TrainReport,
    pub proximity: Option<ProximityReport>,
    pub train_samples: usize,
    pub test_queries: usize,
}

pub struct PipelineRun {
    pub engine: Engine,
    pub splits: Splits,
    pub summary: TrainingSummary,
}

/// Tokenizes the POIs, trains every model on the training split and returns a ready
/// engine. Evaluation is left to the caller so one trained engine can serve several
/// decode-time ablations.
pub fn train_pipeline(pois: &[PoiRecord], records: &[LogRecord], cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let anchors = fit_stage_anchors(pois, cfg)?;
    let (rq, rq_report) = train_stage_rq(pois, anchors.as_ref(), cfg)?;
    let tokenizer = PoiTokenizer::new(cfg, anchors, rq)?;
    let pids = tokenizer.pids(pois)?;
    let layout = tokenizer.layout;
    let trie = PidTrie::build(&layout, &pids)?;
    let splits = split_by_user(records, cfg.valid_frac, cfg.test_frac, cfg.stage_seed("split"));
    let vocab = build_vocab(pois, records, cfg)?;
    let with_history = !cfg.flags.no_history;
    let train_records = training_records(&splits.train, cfg);
    let train = make_samples(&train_records, &pids, &vocab, cfg.model.context, with_history)?;
    let valid = make_samples(&splits.valid, &pids, &vocab, cfg.model.context, with_history)?;
    let (model, model_report) = train_stage_model(&vocab, &train, &valid, cfg)?;
    let by_id: BTreeMap<String, PoiRecord> = pois.iter().map(|p| (p.poi_id.clone(), p.clone())).collect();
    let (proximity, prox_report) = if layout.gid_len > 0 {
        let (m, r) = train_stage_proximity(&train_records, &by_id, cfg)?;
        (Some(m), Some(r))
    } else {
        (None, None)
    };
    let summary = TrainingSummary {
        rq: rq_report,
        collision_rate: crate::pid::collision_rate(&pids),
        model: model_report,
        proximity: prox_report,
        train_samples: train.len(),
        test_queries: splits.test.len(),
    };
    Ok(PipelineRun {
        engine: Engine {
            vocab,
            model,
            trie: SharedTrie::new(trie),
            proximity,
            pois: by_id,
            pids,
            tokenizer: Some(tokenizer),
        },
        splits,
        summary,
    })
}

/// Test queries to evaluate, honouring `max_eval_queries`.
pub fn eval_queries<'a>(run: &'a PipelineRun, cfg: &PipelineConfig) -> &'a [LogRecord] {
    let t = &run.splits.test;
    &t[..cfg.max_eval_queries.map_or(t.len(), |m| m.min(t.len()))]
}

/// Anchors, semantic quantizer and proximity estimator persisted together.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub anchors: Option<AnchorSet>,
    pub rq: Option<RqModel>,
    pub proximity: Option<ProximityModel>,
}

#[derive(Serialize)]
struct BundleMeta<'a> {
    config: &'a PipelineConfig,
    activation: &'static str,
}

pub fn write_bundle(path: &Path, bundle: &ModelBundle, cfg: &PipelineConfig) -> Result<()> {
    let activation = bundle
        .rq
        .as_ref()
        .map_or("none", |r| r.encoder.activation.name());
    io::write_json(
        path,
        &Header::new(BUNDLE_FORMAT, BUNDLE_VERSION).with_meta(BundleMeta {
            config: cfg,
            activation,
        }),
        bundle,
    )
}

pub fn read_bundle(path: &Path) -> Result<ModelBundle> {
    Ok(io::read_json(path, BUNDLE_FORMAT, BUNDLE_VERSION)?.1)
}
