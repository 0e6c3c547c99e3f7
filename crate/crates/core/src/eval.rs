//! Retrieval metrics and persisted per-query result records.
//!
//! Every metric is a pure function of [`QueryRecord`]s, so a report can be recomputed
//! from result files alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::Diagnostics;
use crate::error::Result;
use crate::geocode::{haversine_distance, GeoPoint};
use crate::io::{self, Header};
use crate::pid::TokenId;

pub const RESULTS_FORMAT: &str = "poigen.results";
pub const REPORT_FORMAT: &str = "poigen.report";
pub const EVAL_FILE_VERSION: u32 = 1;

/// Distance floor for the outlier ratio, in metres.
pub const OUTLIER_EPS_M: f64 = 1.0;
pub const OUTLIER_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHit {
    pub poi_id: Option<String>,
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub location: Option<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub k: usize,
    pub user_location: GeoPoint,
    pub truth_poi_id: String,
    pub truth_location: GeoPoint,
    pub hits: Vec<RecordHit>,
    pub diagnostics: Diagnostics,
}

impl QueryRecord {
    /// 1-based rank of the ground truth, if retrieved.
    pub fn truth_rank(&self) -> Option<usize> {
        self.hits
            .iter()
            .position(|h| h.poi_id.as_deref() == Some(self.truth_poi_id.as_str()))
            .map(|r| r + 1)
    }
}

fn rank_of(ranked: &[String], truth: &str) -> Option<usize> {
    ranked.iter().position(|p| p == truth).map(|r| r + 1)
}

/// Fraction of queries whose truth appears among the first `k` results.
pub fn recall_at_k(results: &[Vec<String>], truth: &[String], k: usize) -> f64 {
    mean(results.iter().zip(truth).map(|(r, t)| match rank_of(r, t) {
        Some(rank) if rank <= k => 1.0,
        _ => 0.0,
    }))
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` within the top `k`, else 0.
pub fn ndcg_at_k(results: &[Vec<String>], truth: &[String], k: usize) -> f64 {
    mean(results.iter().zip(truth).map(|(r, t)| match rank_of(r, t) {
        Some(rank) if rank <= k => 1.0 / ((rank + 1) as f64).log2(),
        _ => 0.0,
    }))
}

/// Fraction of generated token sequences that name no known PID.
pub fn invalid_rate(raw: &[Vec<TokenId>], known: &BTreeSet<Vec<TokenId>>) -> f64 {
    mean(raw.iter().map(|t| (!known.contains(t)) as u8 as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierQuery {
    pub user: GeoPoint,
    pub truth: GeoPoint,
    pub retrieved: Vec<GeoPoint>,
}

/// Fraction of retrieved POIs (pooled over queries) lying more than ten times farther
/// from the user than the ground truth.
pub fn spatial_outlier_rate(queries: &[OutlierQuery]) -> f64 {
    let (mut out, mut n) = (0usize, 0usize);
    for q in queries {
        let limit = OUTLIER_FACTOR * haversine_distance(q.user, q.truth).max(OUTLIER_EPS_M);
        for &r in &q.retrieved {
            n += 1;
            out += (haversine_distance(q.user, r) > limit) as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        out as f64 / n as f64
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_egi: bool,
    pub no_geope: bool,
    pub no_tcg: bool,
    pub no_ssp: bool,
    pub no_history: bool,
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (self.no_egi, "no-egi"),
            (self.no_geope, "no-geope"),
            (self.no_tcg, "no-tcg"),
            (self.no_ssp, "no-ssp"),
            (self.no_history, "no-history"),
        ];
        let on: Vec<&str> = names.iter().filter(|x| x.0).map(|x| x.1).collect();
        if on.is_empty() {
            write!(f, "full")
        } else {
            write!(f, "{}", on.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KReport {
    pub k: usize,
    pub queries: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub invalid_rate: f64,
    pub outlier_rate: f64,
    pub median_time_ms: f64,
    pub mean_decode_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub flags: AblationFlags,
    pub per_k: Vec<KReport>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&KReport> {
        self.per_k.iter().find(|r| r.k == k)
    }
}

/// Metrics for one K from its result records. Only hits that resolve to a POI count
/// toward the outlier ratio.
pub fn k_report(records: &[QueryRecord], k: usize, known: &BTreeSet<Vec<TokenId>>) -> KReport {
    let ranked: Vec<Vec<String>> = records
        .iter()
        .map(|r| r.hits.iter().map(|h| h.poi_id.clone().unwrap_or_default()).collect())
        .collect();
    let truth: Vec<String> = records.iter().map(|r| r.truth_poi_id.clone()).collect();
    let raw: Vec<Vec<TokenId>> = records
        .iter()
        .flat_map(|r| r.hits.iter().map(|h| h.tokens.clone()))
        .collect();
    let outliers: Vec<OutlierQuery> = records
        .iter()
        .map(|r| OutlierQuery {
            user: r.user_location,
            truth: r.truth_location,
            retrieved: r.hits.iter().filter_map(|h| h.location).collect(),
        })
        .collect();
    let times: Vec<f64> = records
        .iter()
        .map(|r| r.diagnostics.wall_time_us as f64 / 1000.0)
        .collect();
    KReport {
        k,
        queries: records.len(),
        recall: recall_at_k(&ranked, &truth, k),
        ndcg: ndcg_at_k(&ranked, &truth, k),
        invalid_rate: invalid_rate(&raw, known),
        outlier_rate: spatial_outlier_rate(&outliers),
        median_time_ms: median(&times),
        mean_decode_steps: mean(records.iter().map(|r| r.diagnostics.decode_steps as f64)),
    }
}

pub fn build_report(
    by_k: &BTreeMap<usize, Vec<QueryRecord>>,
    known: &BTreeSet<Vec<TokenId>>,
    flags: AblationFlags,
) -> EvalReport {
    EvalReport {
        flags,
        per_k: by_k.iter().map(|(&k, r)| k_report(r, k, known)).collect(),
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ablation: {}", self.flags)?;
        writeln!(
            f,
            "{:>4} {:>7} {:>9} {:>8} {:>8} {:>9} {:>10} {:>6}",
            "K", "queries", "Recall@K", "NDCG@K", "IGR", "outliers", "median ms", "steps"
        )?;
        for r in &self.per_k {
            writeln!(
                f,
                "{:>4} {:>7} {:>9.4} {:>8.4} {:>7.2}% {:>8.2}% {:>10.3} {:>6.2}",
                r.k,
                r.queries,
                r.recall,
                r.ndcg,
                100.0 * r.invalid_rate,
                100.0 * r.outlier_rate,
                r.median_time_ms,
                r.mean_decode_steps
            )?;
        }
        Ok(())
    }
}

pub fn write_results(path: &Path, records: &[QueryRecord], meta: impl Serialize) -> Result<()> {
    io::write_jsonl(
        path,
        &Header::new(RESULTS_FORMAT, EVAL_FILE_VERSION).with_meta(meta),
        records,
    )
}

pub fn read_results(path: &Path) -> Result<Vec<QueryRecord>> {
    Ok(io::read_jsonl(path, RESULTS_FORMAT, EVAL_FILE_VERSION)?.1)
}

pub fn write_report(path: &Path, report: &EvalReport, meta: impl Serialize) -> Result<()> {
    io::write_json(
        path,
        &Header::new(REPORT_FORMAT, EVAL_FILE_VERSION).with_meta(meta),
        report,
    )
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    Ok(io::read_json(path, REPORT_FORMAT, EVAL_FILE_VERSION)?.1)
}
