//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Slow by design (tens of minutes on one core). Criteria 1, 2, 4, 5 and 6 share one
//! trained checkpoint on the 10k-POI corpus.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poigen::anchors::geope_rotate;
use poigen::datagen::{gen_logs, gen_pois, GenConfig, LogRecord};
use poigen::decode::{beam_search, DecodeConfig};
use poigen::embed::{Embedding, PoiRecord};
use poigen::eval::{EvalReport, QueryRecord};
use poigen::geocode::{cell_diagonal_m, common_prefix_len, encode_geohash, haversine_distance, GeoPoint};
use poigen::pid::{Pid, PidTrie, TokenId};
use poigen::pipeline::{context_of, eval_queries, train_pipeline, PipelineConfig, PipelineRun};
use poigen::quantizer::quantize;
use poigen::seqmodel::{linearize, Sample, Scorer, Transformer, TransformerConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

struct Harness {
    failed: Vec<usize>,
}

impl Harness {
    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Verdict) {
        let t = Instant::now();
        let v = f();
        println!(
            "criterion {id:>2} {name:<32} {}  {} ({:.0}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
        if !v.pass {
            self.failed.push(id);
        }
    }
}

/// The shared 10k-POI checkpoint.
struct Main {
    pois: Vec<PoiRecord>,
    cfg: PipelineConfig,
    run: PipelineRun,
    train_secs: f64,
}

fn main_checkpoint() -> Main {
    let t = Instant::now();
    let g = GenConfig::default();
    let pois = gen_pois(&g).unwrap();
    let logs = gen_logs(&g, &pois).unwrap();
    let mut cfg = PipelineConfig::compact();
    cfg.train_all_interactions = false;
    cfg.max_eval_queries = Some(200);
    let run = train_pipeline(&pois, &logs.records, &cfg).unwrap();
    Main {
        pois,
        cfg,
        run,
        train_secs: t.elapsed().as_secs_f64(),
    }
}

fn eval_with(m: &Main, edit: impl FnOnce(&mut PipelineConfig)) -> (BTreeMap<usize, Vec<QueryRecord>>, EvalReport) {
    let mut cfg = m.cfg.clone();
    edit(&mut cfg);
    m.run.engine.evaluate(eval_queries(&m.run, &cfg), &cfg).unwrap()
}

fn criterion_1(m: &Main) -> (Verdict, BTreeMap<usize, Vec<QueryRecord>>, EvalReport) {
    let t = Instant::now();
    let (by_k, on) = eval_with(m, |_| {});
    let (_, off) = eval_with(m, |c| c.flags.no_tcg = true);
    let total = m.train_secs + t.elapsed().as_secs_f64();
    let igr_on: Vec<f64> = on.per_k.iter().map(|r| r.invalid_rate).collect();
    let igr_off: Vec<f64> = off.per_k.iter().map(|r| r.invalid_rate).collect();
    let pass = igr_on.iter().all(|&r| r == 0.0) && igr_off.iter().all(|&r| r > 0.3) && total < 600.0;
    let v = verdict(
        pass,
        format!(
            "IGR with TCG {:?}, without {:?} at K {:?}; {:.0}s end to end",
            igr_on,
            igr_off.iter().map(|r| format!("{:.3}", r)).collect::<Vec<_>>(),
            m.cfg.ks,
            total
        ),
    );
    (v, by_k, on)
}

fn criterion_2(m: &Main, on_records: &BTreeMap<usize, Vec<QueryRecord>>, on: &EvalReport) -> Verdict {
    let (off_records, off) = eval_with(m, |c| c.flags.no_ssp = true);
    let mut lower = true;
    let mut rates = Vec::new();
    for (a, b) in on.per_k.iter().zip(&off.per_k) {
        lower &= a.outlier_rate < b.outlier_rate;
        rates.push(format!("K{} {:.4}<{:.4}", a.k, a.outlier_rate, b.outlier_rate));
    }
    let mut step_mismatch = 0;
    let mut forced = 0;
    for (k, recs) in on_records {
        for (a, b) in recs.iter().zip(&off_records[k]) {
            assert_eq!(a.query_id, b.query_id);
            forced += a.diagnostics.forced_prefix_len;
            step_mismatch += (b.diagnostics.decode_steps != a.diagnostics.decode_steps + a.diagnostics.forced_prefix_len) as usize;
        }
    }
    verdict(
        lower && step_mismatch == 0 && forced > 0,
        format!("outlier rate with/without SSP: {}; step-count mismatches {step_mismatch}", rates.join(", ")),
    )
}

const SWEEP: [usize; 6] = [3, 4, 5, 6, 7, 8];

fn sweep_recall(seed: u64, gid_len: usize) -> f64 {
    let g = GenConfig {
        seed,
        n_pois: 1500,
        n_sequences: 1500,
        ..GenConfig::default()
    };
    let pois = gen_pois(&g).unwrap();
    let logs = gen_logs(&g, &pois).unwrap();
    let mut cfg = PipelineConfig::compact();
    cfg.seed = seed;
    cfg.gid_len = gid_len;
    cfg.flags.no_history = true;
    cfg.train.epochs = 6;
    cfg.ks = vec![10];
    let run = train_pipeline(&pois, &logs.records, &cfg).unwrap();
    let (_, rep) = run.engine.evaluate(eval_queries(&run, &cfg), &cfg).unwrap();
    rep.at(10).unwrap().recall
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Median curve over seeds must peak strictly inside the range and fall away from the
/// peak on both sides, allowing `tol` of noise per step.
fn criterion_3() -> Verdict {
    const TOL: f64 = 0.02;
    let runs: Vec<Vec<f64>> = SWEEP
        .iter()
        .map(|&l| (0..3).map(|s| sweep_recall(s, l)).collect())
        .collect();
    let curve: Vec<f64> = runs.iter().map(|r| median(r.clone())).collect();
    let peak = (0..curve.len()).fold(0, |b, i| if curve[i] > curve[b] { i } else { b });
    let rises = (0..peak).all(|i| curve[i] <= curve[i + 1] + TOL);
    let falls = (peak..curve.len() - 1).all(|i| curve[i + 1] <= curve[i] + TOL);
    let interior = peak > 0 && peak + 1 < curve.len();
    let shape: Vec<String> = SWEEP.iter().zip(&curve).map(|(l, r)| format!("{l}:{r:.3}")).collect();
    verdict(
        interior && rises && falls,
        format!("median Recall@10 by GID length {}; optimum {}", shape.join(" "), SWEEP[peak]),
    )
}

fn criterion_4(m: &Main) -> Verdict {
    let tok = m.run.engine.tokenizer.as_ref().unwrap();
    let anchors = tok.anchors.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let x = Embedding((0..m.cfg.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let p = GeoPoint::new(rng.gen_range(-80.0..80.0), rng.gen_range(-180.0..180.0)).unwrap();
        worst = worst.max((geope_rotate(&x, p, anchors).unwrap().norm() - x.norm()).abs());
    }
    let sample: Vec<&PoiRecord> = m.pois.choose_multiple(&mut rng, 1000).collect();
    let mut differ = 0;
    for p in &sample {
        let mut twin = (*p).clone();
        let lat = (p.location.lat() + rng.gen_range(5.0..20.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).clamp(-80.0, 80.0);
        let lon = (p.location.lon() + rng.gen_range(30.0..150.0) + 180.0).rem_euclid(360.0) - 180.0;
        twin.location = GeoPoint::new(lat, lon).unwrap();
        differ += (tok.sid(p).unwrap() != tok.sid(&twin).unwrap()) as usize;
    }
    let frac = differ as f64 / sample.len() as f64;
    verdict(
        worst <= 1e-9 && frac > 0.9,
        format!("max norm drift {worst:.1e}; relocated twins with a different SID {frac:.3}"),
    )
}

fn criterion_5(m: &Main) -> Verdict {
    let books = &m.run.engine.tokenizer.as_ref().unwrap().rq.codebooks;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut agree, mut worst) = (0, 0.0f64);
    for _ in 0..1000 {
        let h: Vec<f64> = (0..books.dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let q = quantize(&h, books).unwrap();
        let mut r = h.clone();
        let mut same = true;
        for (level, book) in books.levels.iter().enumerate() {
            let best = (0..book.nrows())
                .map(|i| (i, r.iter().zip(book.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
            same &= q.sid.0[level] as usize == best.0;
            r.iter_mut().zip(book.row(best.0)).for_each(|(x, c)| *x -= c);
        }
        agree += same as usize;
        let last = q.residuals.last().unwrap();
        for j in 0..h.len() {
            worst = worst.max((h[j] - q.reconstruction[j] - last[j]).abs());
        }
    }
    verdict(
        agree == 1000 && worst <= 1e-9,
        format!("{agree}/1000 SIDs match the exhaustive scan; telescoping error {worst:.1e}"),
    )
}

/// Log-probability of `leaf` under per-step softmax over the trie's children.
fn exhaustive_score(model: &Transformer, trie: &PidTrie, context: &[TokenId], leaf: &[TokenId], tau: f64) -> f64 {
    let mut seq = context.to_vec();
    let mut total = 0.0;
    for (i, &t) in leaf.iter().enumerate() {
        let logits = model.next_token_logits(&seq).unwrap();
        let allowed = trie.children(&leaf[..i]);
        let m = allowed.iter().map(|&a| logits[a as usize] / tau).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = allowed.iter().map(|&a| (logits[a as usize] / tau - m).exp()).sum();
        total += logits[t as usize] / tau - m - z.ln();
        seq.push(t);
    }
    total
}

fn criterion_6(m: &Main) -> Verdict {
    let e = &m.run.engine;
    let layout = e.vocab.layout;
    let full = e.trie.load();
    let queries: Vec<&LogRecord> = eval_queries(&m.run, &m.cfg).iter().take(20).collect();
    let (mut exact, mut leaves_total) = (0, 0);
    for r in &queries {
        let truth = layout.tokens(&e.pids[&r.target]);
        // Shortest prefix of the true PID whose subtree holds at most 100 leaves.
        let cut = (0..=truth.len()).find(|&l| full.leaf_count(&truth[..l]) <= 100).unwrap();
        let sub: BTreeMap<String, Pid> = full
            .leaves_under(&truth[..cut])
            .into_iter()
            .map(|(t, id)| (id.to_owned(), layout.parse(&t).unwrap()))
            .collect();
        let trie = PidTrie::build(&layout, &sub).unwrap();
        let ctx = context_of(r, &e.pids, true).unwrap();
        let context = linearize(&ctx, &e.vocab, e.model.context_window() + 1 - layout.pid_len()).unwrap();
        let tau = m.cfg.decode.tau;
        let mut oracle: Vec<(f64, String)> = trie
            .leaves_under(&[])
            .into_iter()
            .map(|(t, id)| (exhaustive_score(&e.model, &trie, &context, &t, tau), id.to_owned()))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0));
        let n = oracle.len();
        let dc = DecodeConfig {
            k: n,
            beam_width: Some(n),
            tau,
            ssp_enabled: false,
            ..DecodeConfig::default()
        };
        let got = beam_search(&e.model, &trie, &e.vocab, &ctx, None, &dc).unwrap();
        let same = got.hits.len() == n
            && got.hits.iter().zip(&oracle).all(|(h, (lp, id))| {
                h.poi_id.as_deref() == Some(id.as_str()) && (h.log_prob - lp).abs() < 1e-9
            });
        exact += same as usize;
        leaves_total += n;
    }
    verdict(
        exact == queries.len(),
        format!("{exact}/{} subtrees ranked identically ({leaves_total} leaves scored)", queries.len()),
    )
}

fn criterion_7() -> Verdict {
    let t = Instant::now();
    let mem = common::memorize(0, 150);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        mem.recall_at_1 == 1.0 && secs < 300.0,
        format!(
            "constrained top-1 recall {:.2} on 50 memorized samples, final loss {:.4}, {secs:.0}s",
            mem.recall_at_1,
            mem.report.epoch_loss.last().unwrap()
        ),
    )
}

/// Dense corpus (600 POIs in 2 cities) so every POI recurs as a target several times.
fn history_recall(seed: u64, history: bool) -> f64 {
    let g = GenConfig {
        seed,
        n_pois: 600,
        n_cities: 2,
        n_sequences: 1200,
        ..GenConfig::default()
    };
    let pois = gen_pois(&g).unwrap();
    let logs = gen_logs(&g, &pois).unwrap();
    let mut cfg = PipelineConfig::compact();
    cfg.seed = seed;
    cfg.flags.no_history = !history;
    cfg.train.epochs = 8;
    cfg.ks = vec![10];
    let run = train_pipeline(&pois, &logs.records, &cfg).unwrap();
    let (_, rep) = run.engine.evaluate(eval_queries(&run, &cfg), &cfg).unwrap();
    rep.at(10).unwrap().recall
}

fn criterion_8() -> Verdict {
    let with: Vec<f64> = (0..3).map(|s| history_recall(s, true)).collect();
    let without: Vec<f64> = (0..3).map(|s| history_recall(s, false)).collect();
    let (a, b) = (median(with.clone()), median(without.clone()));
    verdict(
        a >= b,
        format!("median Recall@10 with history {a:.3} {with:.3?}, without {b:.3} {without:.3?}"),
    )
}

fn criterion_9() -> Verdict {
    let cfg = TransformerConfig {
        vocab_size: 40,
        context: 32,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        segment_ends: Some((30, 34)),
        recency_bias: true,
    };
    let mut model = Transformer::new(cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in model.params_mut() {
        *p += rng.gen_range(-0.1..0.1);
    }
    let sample = Sample {
        context: vec![1, 5, 9, 31, 7, 3, 12, 2],
        target: vec![20, 25, 30],
    };
    let mut grad = vec![0.0; model.num_params()];
    model.sample_loss(&sample, Some(&mut grad)).unwrap();
    let out = model.output_weights_range();
    let mut probes: Vec<usize> = out.clone().step_by(out.len() / 10).take(10).collect();
    probes.extend((0..20).map(|_| rng.gen_range(0..out.start)));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &i in &probes {
        let mut plus = model.clone();
        plus.params_mut()[i] += h;
        let mut minus = model.clone();
        minus.params_mut()[i] -= h;
        let fd = (plus.sample_loss(&sample, None).unwrap().0 - minus.sample_loss(&sample, None).unwrap().0) / (2.0 * h);
        if fd.abs().max(grad[i].abs()) > 1e-7 {
            worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()));
        }
    }
    verdict(
        worst < 1e-4,
        format!("max relative error {worst:.1e} over {} probes (10 on the output layer)", probes.len()),
    )
}

fn criterion_10() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut checked, mut violations) = (0, 0);
    for _ in 0..10_000 {
        let a = GeoPoint::new(rng.gen_range(-89.0..89.0), rng.gen_range(-179.0..179.0)).unwrap();
        // Spread offsets over many scales so every prefix length is exercised.
        let scale = 10f64.powf(rng.gen_range(-6.0..1.0));
        let b = GeoPoint::new(
            (a.lat() + rng.gen_range(-scale..scale)).clamp(-90.0, 90.0),
            (a.lon() + rng.gen_range(-scale..scale)).clamp(-180.0, 180.0),
        )
        .unwrap();
        let shared = common_prefix_len(&encode_geohash(a, 12).unwrap(), &encode_geohash(b, 12).unwrap());
        let d = haversine_distance(a, b);
        for k in 1..=shared {
            checked += 1;
            violations += (d > cell_diagonal_m(k)) as usize;
        }
    }
    verdict(violations == 0, format!("{violations} violations over {checked} (pair, prefix) checks"))
}

fn main() -> ExitCode {
    let mut h = Harness { failed: Vec::new() };
    let m = main_checkpoint();
    let mut c1 = None;
    h.run(1, "invalid generation rate", || {
        let (v, recs, rep) = criterion_1(&m);
        c1 = Some((recs, rep));
        v
    });
    let (recs, rep) = c1.unwrap();
    h.run(2, "proximity pruning direction", || criterion_2(&m, &recs, &rep));
    h.run(3, "GID length sweep shape", criterion_3);
    h.run(4, "GeoPE properties", || criterion_4(&m));
    h.run(5, "quantizer oracle equivalence", || criterion_5(&m));
    h.run(6, "beam vs brute force", || criterion_6(&m));
    h.run(7, "memorization", criterion_7);
    h.run(8, "history ablation direction", criterion_8);
    h.run(9, "gradient check", criterion_9);
    h.run(10, "geohash prefix law", criterion_10);
    if h.failed.is_empty() {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {:?}", h.failed);
        ExitCode::FAILURE
    }
}
