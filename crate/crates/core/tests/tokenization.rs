//! Quantizer and PID properties measured on the default 10k-POI synthetic corpus.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poigen::datagen::{gen_pois, GenConfig};
use poigen::embed::PoiRecord;
use poigen::geocode::GeoPoint;
use poigen::pid::collision_rate;
use poigen::pipeline::{fit_stage_anchors, poi_embedding, train_stage_rq, PipelineConfig, PoiTokenizer};
use poigen::quantizer::{quantize, RqTrainReport, Sid};

struct Fixture {
    pois: Vec<PoiRecord>,
    cfg: PipelineConfig,
    tokenizer: PoiTokenizer,
    report: RqTrainReport,
    sids: BTreeMap<String, Sid>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let pois = gen_pois(&GenConfig::default()).unwrap();
        let cfg = PipelineConfig::compact();
        let anchors = fit_stage_anchors(&pois, &cfg).unwrap();
        let (rq, report) = train_stage_rq(&pois, anchors.as_ref(), &cfg).unwrap();
        let tokenizer = PoiTokenizer::new(&cfg, anchors, rq).unwrap();
        let sids = pois
            .iter()
            .map(|p| (p.poi_id.clone(), tokenizer.sid(p).unwrap()))
            .collect();
        Fixture {
            pois,
            cfg,
            tokenizer,
            report,
            sids,
        }
    })
}

/// Plug-in mutual information (nats) between two discrete labelings.
fn mutual_information(pairs: &[(String, u16)]) -> f64 {
    let n = pairs.len() as f64;
    let mut joint: BTreeMap<(&str, u16), f64> = BTreeMap::new();
    let mut a: BTreeMap<&str, f64> = BTreeMap::new();
    let mut b: BTreeMap<u16, f64> = BTreeMap::new();
    for (x, y) in pairs {
        *joint.entry((x, *y)).or_default() += 1.0;
        *a.entry(x).or_default() += 1.0;
        *b.entry(*y).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| c / n * (c * n / (a[x] * b[&y])).ln())
        .sum()
}

#[test]
fn collision_rate_below_one_percent_at_gid_length_six() {
    let f = fixture();
    assert_eq!(f.cfg.gid_len, 6);
    let pids = f.tokenizer.pids(&f.pois).unwrap();
    let rate = collision_rate(&pids);
    assert!(rate < 0.01, "collision rate {rate}");
}

#[test]
fn loss_trace_non_increasing_within_jitter() {
    let loss = &fixture().report.loss;
    for w in loss.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "loss rose from {} to {}", w[0], w[1]);
    }
}

#[test]
fn level_one_codewords_in_use_or_reseeded() {
    let f = fixture();
    let m = f.cfg.rq.codebook_size;
    let mut used = vec![false; m];
    for s in f.sids.values() {
        used[s.0[0] as usize] = true;
    }
    let unused = used.iter().filter(|u| !**u).count();
    let reseeded = *f.report.reseeded.last().unwrap();
    assert!(unused <= reseeded, "{unused} idle level-1 codewords, {reseeded} reseeded");
}

#[test]
fn coarse_level_carries_more_category_information() {
    let f = fixture();
    let level = |l: usize| -> Vec<(String, u16)> {
        f.pois
            .iter()
            .map(|p| (p.category.clone(), f.sids[&p.poi_id].0[l]))
            .collect()
    };
    let (mi1, mi3) = (mutual_information(&level(0)), mutual_information(&level(2)));
    assert!(mi1 > mi3, "MI level 1 {mi1} vs level 3 {mi3}");
}

#[test]
fn same_category_pairs_share_first_token_more_often() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut same, mut cross) = ((0usize, 0usize), (0usize, 0usize));
    while same.1 < 2000 || cross.1 < 2000 {
        let a = f.pois.choose(&mut rng).unwrap();
        let b = f.pois.choose(&mut rng).unwrap();
        if a.poi_id == b.poi_id {
            continue;
        }
        let shared = f.sids[&a.poi_id].0[0] == f.sids[&b.poi_id].0[0];
        let bucket = if a.category == b.category { &mut same } else { &mut cross };
        bucket.0 += shared as usize;
        bucket.1 += 1;
    }
    let (ps, pc) = (same.0 as f64 / same.1 as f64, cross.0 as f64 / cross.1 as f64);
    assert!(ps > pc, "same-category {ps} vs cross-category {pc}");
}

/// Same text moved to a far-away location gets a different SID with GeoPE, and the same
/// SID without it.
#[test]
fn relocated_twins_diverge_only_with_geope() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let twin = |p: &PoiRecord, rng: &mut ChaCha8Rng| {
        let mut t = p.clone();
        let lat = (p.location.lat() + rng.gen_range(5.0..20.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).clamp(-80.0, 80.0);
        let lon = ((p.location.lon() + rng.gen_range(30.0..150.0) + 180.0).rem_euclid(360.0)) - 180.0;
        t.location = GeoPoint::new(lat, lon).unwrap();
        t
    };
    let sample: Vec<&PoiRecord> = f.pois.choose_multiple(&mut rng, 1000).collect();
    let twins: Vec<PoiRecord> = sample.iter().map(|p| twin(p, &mut rng)).collect();
    let differ = sample
        .iter()
        .zip(&twins)
        .filter(|(p, t)| f.sids[&p.poi_id] != f.tokenizer.sid(t).unwrap())
        .count();
    assert!(differ as f64 / 1000.0 > 0.9, "only {differ}/1000 twins diverged");

    let flat = PoiTokenizer::new(&f.cfg, None, f.tokenizer.rq.clone()).unwrap();
    let same = sample
        .iter()
        .zip(&twins)
        .filter(|(p, t)| flat.sid(p).unwrap() == flat.sid(t).unwrap())
        .count();
    assert_eq!(same, 1000);
}

#[test]
fn trained_quantizer_matches_exhaustive_scan_on_random_latents() {
    let f = fixture();
    let books = &f.tokenizer.rq.codebooks;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scale = {
        let e = poi_embedding(&f.pois[0], &f.cfg.embedder().unwrap(), f.tokenizer.anchors.as_ref()).unwrap();
        f.tokenizer.rq.encode(&e).unwrap().iter().map(|v| v.abs()).fold(0.0, f64::max)
    };
    for _ in 0..1000 {
        let h: Vec<f64> = (0..books.dim()).map(|_| rng.gen_range(-scale..scale)).collect();
        let q = quantize(&h, books).unwrap();
        let mut r = h.clone();
        for (level, book) in books.levels.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (i, c) in book.rows().into_iter().enumerate() {
                let d: f64 = r.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (i, d);
                }
            }
            assert_eq!(q.sid.0[level] as usize, best.0);
            for (x, c) in r.iter_mut().zip(book.row(best.0).iter()) {
                *x -= c;
            }
        }
        for j in 0..h.len() {
            assert!((h[j] - q.reconstruction[j] - q.residuals.last().unwrap()[j]).abs() < 1e-9);
        }
    }
}
