//! Seeded synthetic POI databases and search logs with known ground truth.
//!
//! Cities are isotropic Gaussian clusters (in degrees) clipped to a bounding box of
//! `±4σ`. POI names follow `"{brand} {category} {number}"`. Every synthetic user lives
//! in one city, has a favourite local category and brand, and issues one search
//! sequence whose final interaction is the prediction target; earlier interactions form
//! its history.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::embed::PoiRecord;
use crate::error::{Error, Result};
use crate::geocode::{haversine_distance, GeoPoint};
use crate::io::{self, Header};

pub const LOG_FORMAT: &str = "poigen.logs";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Many instances per city; users want the closest one.
    Local,
    /// A handful per city; users travel to them.
    Regional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub scope: Scope,
    /// Relative frequency for local categories; POIs per city for regional ones.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    ExactName,
    CategoryNearby,
    Brand,
    Regional,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::ExactName,
        Template::CategoryNearby,
        Template::Brand,
        Template::Regional,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateMix {
    pub exact_name: f64,
    pub category_nearby: f64,
    pub brand: f64,
    pub regional: f64,
}

impl TemplateMix {
    fn weights(&self) -> [f64; 4] {
        [self.exact_name, self.category_nearby, self.brand, self.regional]
    }
}

impl Default for TemplateMix {
    fn default() -> Self {
        Self {
            exact_name: 0.2,
            category_nearby: 0.5,
            brand: 0.2,
            regional: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub n_pois: usize,
    pub n_cities: usize,
    /// Standard deviation of a city's POI cloud, in degrees.
    pub city_sigma: f64,
    pub categories: Vec<CategorySpec>,
    pub brands: Vec<String>,
    pub n_sequences: usize,
    pub avg_history_len: f64,
    pub max_history_len: usize,
    pub template_mix: TemplateMix,
    /// Spread of a user's search locations around home, in degrees.
    pub user_jitter: f64,
    /// Probability that a category or brand query names the user's favourite one.
    pub favourite_bias: f64,
    /// Exact-name targets are drawn from this many POIs nearest the user.
    pub exact_name_pool: usize,
    pub max_retries: usize,
}

fn local(name: &str, weight: f64) -> CategorySpec {
    CategorySpec {
        name: name.into(),
        scope: Scope::Local,
        weight,
    }
}

fn regional(name: &str, per_city: f64) -> CategorySpec {
    CategorySpec {
        name: name.into(),
        scope: Scope::Regional,
        weight: per_city,
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        let categories = vec![
            local("toilet", 1.0),
            local("cafe", 1.0),
            local("restaurant", 1.5),
            local("convenience store", 1.0),
            local("atm", 1.0),
            local("pharmacy", 0.8),
            local("bakery", 0.7),
            local("bank", 0.8),
            local("hotel", 0.8),
            local("supermarket", 0.6),
            local("gas station", 0.5),
            local("parking", 0.8),
            local("gym", 0.5),
            local("bookstore", 0.4),
            local("hair salon", 0.6),
            local("bar", 0.6),
            regional("airport", 1.0),
            regional("train station", 2.0),
            regional("stadium", 2.0),
            regional("museum", 3.0),
        ];
        let brands = [
            "lucky", "golden", "sunny", "royal", "metro", "happy", "green", "star", "ocean",
            "urban",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Self {
            seed: 0,
            n_pois: 10_000,
            n_cities: 5,
            city_sigma: 0.05,
            categories,
            brands,
            n_sequences: 4_000,
            avg_history_len: 3.2,
            max_history_len: 8,
            template_mix: TemplateMix::default(),
            user_jitter: 0.01,
            favourite_bias: 0.6,
            exact_name_pool: 30,
            max_retries: 8,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_pois == 0 || self.n_cities == 0 || self.n_sequences == 0 {
            return bad("n_pois, n_cities and n_sequences must be positive".into());
        }
        if !(self.city_sigma > 0.0 && self.city_sigma < 5.0) {
            return bad(format!("city_sigma {} outside (0, 5)", self.city_sigma));
        }
        if self.brands.is_empty() {
            return bad("at least one brand is required".into());
        }
        if !self.categories.iter().any(|c| c.scope == Scope::Local) {
            return bad("at least one local category is required".into());
        }
        if self.categories.iter().any(|c| c.weight <= 0.0) {
            return bad("category weights must be positive".into());
        }
        let w = self.template_mix.weights();
        if w.iter().any(|&v| v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("template mix {w:?} must be non-negative and sum to 1"));
        }
        let regional: f64 = self
            .categories
            .iter()
            .filter(|c| c.scope == Scope::Regional)
            .map(|c| c.weight.round())
            .sum();
        if regional as usize * self.n_cities >= self.n_pois {
            return bad("regional POIs would exhaust n_pois".into());
        }
        if self.avg_history_len < 0.0 || self.exact_name_pool == 0 {
            return bad("avg_history_len must be >= 0 and exact_name_pool > 0".into());
        }
        Ok(())
    }

    pub fn local_categories(&self) -> impl Iterator<Item = &CategorySpec> {
        self.categories.iter().filter(|c| c.scope == Scope::Local)
    }

    pub fn regional_categories(&self) -> impl Iterator<Item = &CategorySpec> {
        self.categories.iter().filter(|c| c.scope == Scope::Regional)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub center: GeoPoint,
    pub sigma: f64,
}

impl City {
    pub fn bounding_box(&self) -> ((f64, f64), (f64, f64)) {
        let r = 4.0 * self.sigma;
        (
            (self.center.lat() - r, self.center.lat() + r),
            (self.center.lon() - r, self.center.lon() + r),
        )
    }

    fn contains(&self, lat: f64, lon: f64) -> bool {
        let ((la0, la1), (lo0, lo1)) = self.bounding_box();
        (la0..=la1).contains(&lat) && (lo0..=lo1).contains(&lon)
    }

    fn sample(&self, spread: f64, rng: &mut ChaCha8Rng) -> GeoPoint {
        let normal = Normal::new(0.0, self.sigma * spread).expect("positive sigma");
        loop {
            let lat = self.center.lat() + normal.sample(rng);
            let lon = self.center.lon() + normal.sample(rng);
            if self.contains(lat, lon) {
                return GeoPoint::new(lat, lon).expect("city boxes lie inside valid ranges");
            }
        }
    }
}

/// City centres: uniformly placed in a mid-latitude box, at least 1° apart.
pub fn gen_cities(cfg: &GenConfig) -> Vec<City> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc17e);
    let mut cities: Vec<City> = Vec::with_capacity(cfg.n_cities);
    let mut attempts = 0;
    while cities.len() < cfg.n_cities {
        let lat = rng.gen_range(22.0..40.0);
        let lon = rng.gen_range(104.0..121.0);
        attempts += 1;
        let far = cities.iter().all(|c| {
            (c.center.lat() - lat).abs().max((c.center.lon() - lon).abs()) > 1.0
        });
        if far || attempts > 10_000 {
            cities.push(City {
                center: GeoPoint::new(lat, lon).expect("in range"),
                sigma: cfg.city_sigma,
            });
        }
    }
    cities
}

pub fn city_of(poi: &PoiRecord) -> Option<usize> {
    poi.extra.get("city").and_then(|c| c.parse().ok())
}

pub fn brand_of(poi: &PoiRecord) -> Option<&str> {
    poi.extra.get("brand").map(String::as_str)
}

pub fn gen_pois(cfg: &GenConfig) -> Result<Vec<PoiRecord>> {
    cfg.validate()?;
    let cities = gen_cities(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9015);
    let locals: Vec<&CategorySpec> = cfg.local_categories().collect();
    let local_total: f64 = locals.iter().map(|c| c.weight).sum();
    let mut names = HashSet::new();
    let mut pois = Vec::with_capacity(cfg.n_pois);
    let base = cfg.n_pois / cfg.n_cities;
    let extra = cfg.n_pois % cfg.n_cities;
    for (ci, city) in cities.iter().enumerate() {
        let quota = base + usize::from(ci < extra);
        let mut plan: Vec<(&CategorySpec, f64)> = Vec::with_capacity(quota);
        for r in cfg.regional_categories() {
            for _ in 0..(r.weight.round() as usize) {
                plan.push((r, 2.0));
            }
        }
        plan.truncate(quota);
        while plan.len() < quota {
            let mut pick = rng.gen_range(0.0..local_total);
            let cat = locals
                .iter()
                .find(|c| {
                    pick -= c.weight;
                    pick < 0.0
                })
                .unwrap_or(&locals[locals.len() - 1]);
            plan.push((cat, 1.0));
        }
        for (cat, spread) in plan {
            let location = city.sample(spread, &mut rng);
            let brand = cfg.brands.choose(&mut rng).expect("non-empty");
            let name = loop {
                let n: u32 = rng.gen_range(1..1000);
                let candidate = format!("{brand} {} {n}", cat.name);
                if names.insert(candidate.clone()) {
                    break candidate;
                }
            };
            let mut extra = BTreeMap::new();
            extra.insert("brand".to_string(), brand.clone());
            extra.insert("city".to_string(), ci.to_string());
            pois.push(PoiRecord {
                poi_id: format!("p{:06}", pois.len()),
                location,
                name,
                category: cat.name.clone(),
                extra,
            });
        }
    }
    Ok(pois)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub query: String,
    pub location: GeoPoint,
    pub poi_id: String,
    pub template: Template,
}

/// One user search sequence: earlier interactions plus the target interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub query_id: String,
    pub user_id: String,
    pub history: Vec<Interaction>,
    pub query: String,
    pub location: GeoPoint,
    pub target: String,
    pub template: Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logs {
    pub records: Vec<LogRecord>,
    /// Interactions dropped after exhausting retries.
    pub skipped: usize,
}

struct PoiIndex<'a> {
    pois: &'a [PoiRecord],
    by_category: BTreeMap<&'a str, Vec<usize>>,
    by_city: Vec<Vec<usize>>,
}

impl<'a> PoiIndex<'a> {
    fn new(pois: &'a [PoiRecord], n_cities: usize) -> Self {
        let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut by_city = vec![Vec::new(); n_cities];
        for (i, p) in pois.iter().enumerate() {
            by_category.entry(p.category.as_str()).or_default().push(i);
            if let Some(c) = city_of(p).filter(|&c| c < n_cities) {
                by_city[c].push(i);
            }
        }
        Self {
            pois,
            by_category,
            by_city,
        }
    }

    /// Closest POI satisfying `keep`, ties broken by position in the database.
    fn nearest(&self, from: GeoPoint, candidates: &[usize], keep: impl Fn(&PoiRecord) -> bool) -> Option<(usize, f64)> {
        candidates
            .iter()
            .filter(|&&i| keep(&self.pois[i]))
            .map(|&i| (i, haversine_distance(from, self.pois[i].location)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }
}

/// Radius beyond which a template counts as unsatisfiable for a user.
const LOCAL_RADIUS_M: f64 = 30_000.0;
const REGIONAL_RADIUS_M: f64 = 100_000.0;

struct User {
    city: usize,
    home: GeoPoint,
    favourite: String,
    brand: String,
}

fn draw_interaction(
    cfg: &GenConfig,
    index: &PoiIndex<'_>,
    user: &User,
    rng: &mut ChaCha8Rng,
) -> Option<Interaction> {
    let jitter = Normal::new(0.0, cfg.user_jitter.max(1e-12)).expect("positive");
    let weights = cfg.template_mix.weights();
    let locals: Vec<&CategorySpec> = cfg.local_categories().collect();
    let regionals: Vec<&CategorySpec> = cfg.regional_categories().collect();
    for _ in 0..=cfg.max_retries {
        let lat = (user.home.lat() + jitter.sample(rng)).clamp(-90.0, 90.0);
        let lon = (user.home.lon() + jitter.sample(rng)).clamp(-180.0, 180.0);
        let location = GeoPoint::new(lat, lon).expect("clamped");
        let mut pick = rng.gen_range(0.0..1.0);
        let template = *Template::ALL
            .iter()
            .zip(weights)
            .find(|(_, w)| {
                pick -= w;
                pick < 0.0
            })
            .map(|(t, _)| t)
            .unwrap_or(&Template::CategoryNearby);
        let found = match template {
            Template::CategoryNearby => {
                let cat = if rng.gen_bool(cfg.favourite_bias) {
                    user.favourite.clone()
                } else {
                    locals.choose(rng).expect("non-empty").name.clone()
                };
                let cands = index.by_category.get(cat.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                index
                    .nearest(location, cands, |_| true)
                    .filter(|(_, d)| *d <= LOCAL_RADIUS_M)
                    .map(|(i, _)| (i, format!("{cat} nearby")))
            }
            Template::Regional => {
                let Some(cat) = regionals.choose(rng) else { continue };
                let cands = index.by_category.get(cat.name.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                index
                    .nearest(location, cands, |_| true)
                    .filter(|(_, d)| *d <= REGIONAL_RADIUS_M)
                    .map(|(i, _)| (i, cat.name.clone()))
            }
            Template::Brand => {
                let brand = if rng.gen_bool(cfg.favourite_bias) {
                    &user.brand
                } else {
                    cfg.brands.choose(rng).expect("non-empty")
                };
                let cands = index.by_category.get(user.favourite.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                index
                    .nearest(location, cands, |p| brand_of(p) == Some(brand.as_str()))
                    .filter(|(_, d)| *d <= LOCAL_RADIUS_M)
                    .map(|(i, _)| (i, brand.clone()))
            }
            Template::ExactName => {
                let pool = &index.by_city[user.city];
                let mut ranked: Vec<(usize, f64)> = pool
                    .iter()
                    .map(|&i| (i, haversine_distance(location, index.pois[i].location)))
                    .collect();
                ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                ranked.truncate(cfg.exact_name_pool);
                ranked
                    .choose(rng)
                    .map(|&(i, _)| (i, index.pois[i].name.clone()))
            }
        };
        if let Some((i, query)) = found {
            return Some(Interaction {
                query,
                location,
                poi_id: index.pois[i].poi_id.clone(),
                template,
            });
        }
    }
    None
}

pub fn gen_logs(cfg: &GenConfig, pois: &[PoiRecord]) -> Result<Logs> {
    cfg.validate()?;
    if pois.is_empty() {
        return Err(Error::invalid("cannot generate logs without POIs"));
    }
    let cities = gen_cities(cfg);
    let index = PoiIndex::new(pois, cfg.n_cities);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1065);
    let history_len = Geometric::new(1.0 / (1.0 + cfg.avg_history_len))
        .map_err(|e| Error::Config(format!("avg_history_len: {e}")))?;
    let locals: Vec<&CategorySpec> = cfg.local_categories().collect();
    let mut records = Vec::with_capacity(cfg.n_sequences);
    let mut skipped = 0;
    for u in 0..cfg.n_sequences {
        let city_idx = rng.gen_range(0..cities.len());
        let user = User {
            city: city_idx,
            home: cities[city_idx].sample(1.0, &mut rng),
            favourite: locals.choose(&mut rng).expect("non-empty").name.clone(),
            brand: cfg.brands.choose(&mut rng).expect("non-empty").clone(),
        };
        let h = (history_len.sample(&mut rng) as usize).min(cfg.max_history_len);
        let mut interactions = Vec::with_capacity(h + 1);
        for _ in 0..=h {
            match draw_interaction(cfg, &index, &user, &mut rng) {
                Some(i) => interactions.push(i),
                None => skipped += 1,
            }
        }
        let Some(last) = interactions.pop() else { continue };
        records.push(LogRecord {
            query_id: format!("q{u:06}"),
            user_id: format!("u{u:06}"),
            history: interactions,
            query: last.query,
            location: last.location,
            target: last.poi_id,
            template: last.template,
        });
    }
    Ok(Logs { records, skipped })
}

/// Train/validation/test partition by user id; no user appears in two splits.
/// Every interaction of a record as a prediction target with the interactions before
/// it as history. The record's own target comes last.
pub fn expand_prefixes(record: &LogRecord) -> Vec<LogRecord> {
    let mut out: Vec<LogRecord> = record
        .history
        .iter()
        .enumerate()
        .map(|(i, it)| LogRecord {
            query_id: format!("{}.{i}", record.query_id),
            user_id: record.user_id.clone(),
            history: record.history[..i].to_vec(),
            query: it.query.clone(),
            location: it.location,
            target: it.poi_id.clone(),
            template: it.template,
        })
        .collect();
    out.push(record.clone());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<LogRecord>,
    pub valid: Vec<LogRecord>,
    pub test: Vec<LogRecord>,
}

pub fn split_by_user(records: &[LogRecord], valid_frac: f64, test_frac: f64, seed: u64) -> Splits {
    let mut users: Vec<&str> = records.iter().map(|r| r.user_id.as_str()).collect();
    users.sort_unstable();
    users.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b17);
    users.shuffle(&mut rng);
    let n = users.len();
    let n_test = ((n as f64) * test_frac).round() as usize;
    let n_valid = ((n as f64) * valid_frac).round() as usize;
    let test_users: HashSet<&str> = users[..n_test].iter().copied().collect();
    let valid_users: HashSet<&str> = users[n_test..(n_test + n_valid).min(n)].iter().copied().collect();
    let mut s = Splits {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for r in records {
        if test_users.contains(r.user_id.as_str()) {
            s.test.push(r.clone());
        } else if valid_users.contains(r.user_id.as_str()) {
            s.valid.push(r.clone());
        } else {
            s.train.push(r.clone());
        }
    }
    s
}

pub fn write_logs(path: &Path, logs: &Logs, meta: impl Serialize) -> Result<()> {
    let header = Header::new(LOG_FORMAT, LOG_VERSION).with_meta(serde_json::json!({
        "skipped": logs.skipped,
        "config": serde_json::to_value(meta).unwrap_or_default(),
    }));
    io::write_jsonl(path, &header, &logs.records)
}

pub fn read_logs(path: &Path) -> Result<Logs> {
    let (header, records) = io::read_jsonl(path, LOG_FORMAT, LOG_VERSION)?;
    let skipped = header.meta.get("skipped").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    Ok(Logs { records, skipped })
}

/// Dataset summary in the shape of the usual search-log statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pois: usize,
    pub sequences: usize,
    pub interactions: usize,
    pub avg_history_len: f64,
    pub cities: usize,
    pub templates: BTreeMap<Template, usize>,
}

pub fn dataset_stats(pois: &[PoiRecord], logs: &Logs) -> DatasetStats {
    let interactions: usize = logs.records.iter().map(|r| r.history.len() + 1).sum();
    let mut templates = BTreeMap::new();
    for r in &logs.records {
        *templates.entry(r.template).or_insert(0) += 1;
    }
    let cities: HashSet<usize> = pois.iter().filter_map(city_of).collect();
    DatasetStats {
        pois: pois.len(),
        sequences: logs.records.len(),
        interactions,
        avg_history_len: logs.records.iter().map(|r| r.history.len()).sum::<usize>() as f64
            / logs.records.len().max(1) as f64,
        cities: cities.len(),
        templates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geocode::{common_prefix_len, encode_geohash};

    fn small() -> GenConfig {
        GenConfig {
            n_pois: 2_000,
            n_sequences: 600,
            ..GenConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = small();
        assert_eq!(gen_pois(&cfg).unwrap(), gen_pois(&cfg).unwrap());
        let pois = gen_pois(&cfg).unwrap();
        assert_eq!(gen_logs(&cfg, &pois).unwrap(), gen_logs(&cfg, &pois).unwrap());
        let other = GenConfig { seed: 1, ..small() };
        assert_ne!(gen_pois(&other).unwrap(), pois);
    }

    #[test]
    fn equal_city_allocation_and_boxes() {
        let cfg = GenConfig::default();
        let pois = gen_pois(&cfg).unwrap();
        let cities = gen_cities(&cfg);
        let mut counts = vec![0; cfg.n_cities];
        for p in &pois {
            let c = city_of(p).unwrap();
            counts[c] += 1;
            let ((la0, la1), (lo0, lo1)) = cities[c].bounding_box();
            assert!((la0..=la1).contains(&p.location.lat()));
            assert!((lo0..=lo1).contains(&p.location.lon()));
        }
        assert_eq!(counts, vec![2000; 5]);
        let ids: HashSet<_> = pois.iter().map(|p| &p.poi_id).collect();
        assert_eq!(ids.len(), pois.len());
    }

    #[test]
    fn nearby_targets_are_nearest_in_category() {
        let cfg = small();
        let pois = gen_pois(&cfg).unwrap();
        let logs = gen_logs(&cfg, &pois).unwrap();
        let by_id: BTreeMap<&str, &PoiRecord> = pois.iter().map(|p| (p.poi_id.as_str(), p)).collect();
        let (mut ok, mut total) = (0, 0);
        for r in logs.records.iter().filter(|r| r.template == Template::CategoryNearby) {
            let cat = r.query.trim_end_matches(" nearby");
            // Independent brute force over the whole database.
            let best = pois
                .iter()
                .filter(|p| p.category == cat)
                .min_by(|a, b| {
                    haversine_distance(r.location, a.location)
                        .total_cmp(&haversine_distance(r.location, b.location))
                })
                .unwrap();
            total += 1;
            if best.poi_id == r.target {
                ok += 1;
            }
            assert_eq!(by_id[r.target.as_str()].category, cat);
        }
        assert!(total > 100);
        assert!(ok as f64 >= 0.99 * total as f64, "{ok}/{total}");
    }

    #[test]
    fn exact_name_targets_match_query() {
        let cfg = small();
        let pois = gen_pois(&cfg).unwrap();
        let logs = gen_logs(&cfg, &pois).unwrap();
        let by_id: BTreeMap<&str, &PoiRecord> = pois.iter().map(|p| (p.poi_id.as_str(), p)).collect();
        let mut n = 0;
        for r in logs.records.iter().filter(|r| r.template == Template::ExactName) {
            assert_eq!(by_id[r.target.as_str()].name, r.query);
            n += 1;
        }
        assert!(n > 0);
    }

    #[test]
    fn prefix_histogram_peaks_at_four_or_more() {
        let cfg = small();
        let pois = gen_pois(&cfg).unwrap();
        let logs = gen_logs(&cfg, &pois).unwrap();
        let by_id: BTreeMap<&str, &PoiRecord> = pois.iter().map(|p| (p.poi_id.as_str(), p)).collect();
        let mut hist = [0usize; 7];
        let mut nearby = [0usize; 7];
        for r in &logs.records {
            let u = encode_geohash(r.location, 6).unwrap();
            let p = encode_geohash(by_id[r.target.as_str()].location, 6).unwrap();
            let k = common_prefix_len(&u, &p);
            hist[k] += 1;
            if r.template == Template::CategoryNearby {
                nearby[k] += 1;
            }
        }
        let argmax = |h: &[usize; 7]| (0..7).max_by_key(|&k| (h[k], k)).unwrap();
        assert!(argmax(&hist) >= 4, "{hist:?}");
        assert!(argmax(&nearby) >= 4, "{nearby:?}");
    }

    #[test]
    fn average_history_close_to_target() {
        let cfg = GenConfig {
            n_sequences: 3000,
            ..small()
        };
        let pois = gen_pois(&cfg).unwrap();
        let logs = gen_logs(&cfg, &pois).unwrap();
        let stats = dataset_stats(&pois, &logs);
        assert!((stats.avg_history_len - cfg.avg_history_len).abs() < 0.4, "{stats:?}");
    }

    #[test]
    fn splits_do_not_share_users() {
        let cfg = small();
        let pois = gen_pois(&cfg).unwrap();
        let logs = gen_logs(&cfg, &pois).unwrap();
        let s = split_by_user(&logs.records, 0.1, 0.2, 3);
        let users = |v: &[LogRecord]| v.iter().map(|r| r.user_id.clone()).collect::<HashSet<_>>();
        let (a, b, c) = (users(&s.train), users(&s.valid), users(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), logs.records.len());
        assert!(!s.test.is_empty() && !s.valid.is_empty());
    }

    #[test]
    fn bad_template_mix_rejected() {
        let cfg = GenConfig {
            template_mix: TemplateMix {
                exact_name: 0.5,
                category_nearby: 0.5,
                brand: 0.5,
                regional: 0.0,
            },
            ..small()
        };
        assert!(matches!(gen_pois(&cfg), Err(Error::Config(_))));
    }
}
