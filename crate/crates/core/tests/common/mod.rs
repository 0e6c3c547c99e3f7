//! Fixtures shared by the slower end-to-end tests.

use std::collections::BTreeMap;

use poigen::datagen::{gen_pois, GenConfig, LogRecord, Template};
use poigen::decode::DecodeConfig;
use poigen::pid::PidTrie;
use poigen::pipeline::{
    build_vocab, context_of, fit_stage_anchors, make_samples, train_stage_model, train_stage_rq, Engine,
    PipelineConfig, PoiTokenizer,
};
use poigen::pid::SharedTrie;
use poigen::seqmodel::TrainReport;

pub struct Memorization {
    pub recall_at_1: f64,
    pub report: TrainReport,
}

/// Trains on 50 exact-name queries with distinct targets (tokenizer fitted on a wider
/// corpus) and decodes each training context back with the trie constraint on.
pub fn memorize(seed: u64, epochs: usize) -> Memorization {
    let pois = gen_pois(&GenConfig {
        seed,
        n_pois: 1000,
        ..GenConfig::default()
    })
    .unwrap();
    let mut cfg = PipelineConfig::compact();
    cfg.seed = seed;
    cfg.train.epochs = epochs;
    cfg.train.batch = 10;
    let anchors = fit_stage_anchors(&pois, &cfg).unwrap();
    let (rq, _) = train_stage_rq(&pois, anchors.as_ref(), &cfg).unwrap();
    let tok = PoiTokenizer::new(&cfg, anchors, rq).unwrap();
    let pids = tok.pids(&pois).unwrap();
    let records: Vec<LogRecord> = pois
        .iter()
        .step_by(pois.len() / 50)
        .take(50)
        .enumerate()
        .map(|(i, p)| LogRecord {
            query_id: format!("m{i}"),
            user_id: format!("u{i}"),
            history: Vec::new(),
            query: p.name.clone(),
            location: p.location,
            target: p.poi_id.clone(),
            template: Template::ExactName,
        })
        .collect();
    let vocab = build_vocab(&pois, &records, &cfg).unwrap();
    let samples = make_samples(&records, &pids, &vocab, cfg.model.context, false).unwrap();
    let (model, report) = train_stage_model(&vocab, &samples, &samples, &cfg).unwrap();
    let engine = Engine {
        trie: SharedTrie::new(PidTrie::build(&tok.layout, &pids).unwrap()),
        vocab,
        model,
        proximity: None,
        pois: pois.iter().map(|p| (p.poi_id.clone(), p.clone())).collect(),
        pids: pids.clone(),
        tokenizer: None,
    };
    let dc = DecodeConfig {
        ssp_enabled: false,
        ..DecodeConfig::with_k(1)
    };
    let hits = records
        .iter()
        .filter(|r| {
            let ctx = context_of(r, &BTreeMap::new(), false).unwrap();
            let res = engine.search(&ctx, &dc).unwrap();
            res.hits.first().and_then(|h| h.poi_id.as_deref()) == Some(r.target.as_str())
        })
        .count();
    Memorization {
        recall_at_1: hits as f64 / records.len() as f64,
        report,
    }
}
