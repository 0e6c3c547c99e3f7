//! POI records and the deterministic text embedder that stands in for a pretrained encoder.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geocode::GeoPoint;
use crate::hashing::{char_ngrams, signed_bucket};
use crate::io::{self, Header};

pub const POI_DB_FORMAT: &str = "poigen.pois";
pub const POI_DB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoiLine", into = "PoiLine")]
pub struct PoiRecord {
    pub poi_id: String,
    pub location: GeoPoint,
    pub name: String,
    pub category: String,
    pub extra: BTreeMap<String, String>,
}

/// On-disk shape of a POI line: flat `lat`/`lon` fields.
#[derive(Serialize, Deserialize)]
struct PoiLine {
    poi_id: String,
    lat: f64,
    lon: f64,
    name: String,
    category: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    extra: BTreeMap<String, String>,
}

impl TryFrom<PoiLine> for PoiRecord {
    type Error = Error;
    fn try_from(l: PoiLine) -> Result<Self> {
        if l.name.trim().is_empty() {
            return Err(Error::invalid(format!("POI {} has an empty name", l.poi_id)));
        }
        Ok(PoiRecord {
            location: GeoPoint::new(l.lat, l.lon)?,
            poi_id: l.poi_id,
            name: l.name,
            category: l.category,
            extra: l.extra,
        })
    }
}

impl From<PoiRecord> for PoiLine {
    fn from(p: PoiRecord) -> Self {
        PoiLine {
            poi_id: p.poi_id,
            lat: p.location.lat(),
            lon: p.location.lon(),
            name: p.name,
            category: p.category,
            extra: p.extra,
        }
    }
}

pub fn write_poi_db(path: &Path, pois: &[PoiRecord], meta: impl Serialize) -> Result<()> {
    io::write_jsonl(
        path,
        &Header::new(POI_DB_FORMAT, POI_DB_VERSION).with_meta(meta),
        pois,
    )
}

pub fn read_poi_db(path: &Path) -> Result<Vec<PoiRecord>> {
    let (_, pois): (_, Vec<PoiRecord>) = io::read_jsonl(path, POI_DB_FORMAT, POI_DB_VERSION)?;
    let mut seen = std::collections::HashSet::new();
    for p in &pois {
        if !seen.insert(p.poi_id.as_str()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("duplicate poi_id {}", p.poi_id),
            });
        }
    }
    Ok(pois)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        dot / (self.norm() * other.norm())
    }
}

/// Character n-gram feature hasher producing unit-norm vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEmbedder {
    pub const NGRAMS: std::ops::RangeInclusive<usize> = 2..=4;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    pub fn embed(&self, name: &str, category: &str) -> Result<Embedding> {
        embed_text(name, category, self.dim, self.seed)
    }

    pub fn embed_poi(&self, poi: &PoiRecord) -> Result<Embedding> {
        self.embed(&poi.name, &poi.category)
    }
}

/// Embeds the template `"{name} | {category}"`.
pub fn embed_text(name: &str, category: &str, dim: usize, seed: u64) -> Result<Embedding> {
    if name.trim().is_empty() {
        return Err(Error::invalid("cannot embed an empty name"));
    }
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    let text = format!("{} | {}", name.to_lowercase(), category.to_lowercase());
    let mut v = vec![0.0; dim];
    for gram in char_ngrams(&text, TextEmbedder::NGRAMS) {
        let (idx, sign) = signed_bucket(&gram, dim, seed);
        v[idx] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Every n-gram cancelled out; fall back to a fixed unit vector.
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(Embedding(v))
}
