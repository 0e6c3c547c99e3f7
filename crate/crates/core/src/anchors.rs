//! Reference anchors and the geographic rotation applied to POI embeddings.
//!
//! Each anchor owns one contiguous segment of the embedding. Every consecutive pair of
//! dimensions inside that segment is rotated by the bearing angle from the anchor to the
//! POI, so position enters the embedding without changing its norm.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embed::{Embedding, PoiRecord};
use crate::error::{Error, Result};
use crate::geocode::{bearing_angle, GeoPoint};
use crate::kmeans::kmeans;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub points: Vec<GeoPoint>,
}

impl AnchorSet {
    pub fn new(points: Vec<GeoPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("anchor set must hold at least one point"));
        }
        Ok(Self { points })
    }

    pub fn omega(&self) -> usize {
        self.points.len()
    }

    /// Bearing from every anchor to `p`, in anchor order.
    pub fn angles(&self, p: GeoPoint) -> Vec<f64> {
        self.points.iter().map(|r| bearing_angle(p, *r)).collect()
    }
}

/// Fits `omega` anchors with k-means over raw `(lat, lon)` degrees.
pub fn fit_anchors(pois: &[PoiRecord], omega: usize, seed: u64, max_iters: usize) -> Result<AnchorSet> {
    if pois.is_empty() {
        return Err(Error::invalid("cannot fit anchors on an empty POI set"));
    }
    if omega == 0 {
        return Err(Error::invalid("omega must be at least 1"));
    }
    let distinct: BTreeSet<(u64, u64)> = pois
        .iter()
        .map(|p| (p.location.lat().to_bits(), p.location.lon().to_bits()))
        .collect();
    if omega > distinct.len() {
        return Err(Error::invalid(format!(
            "omega {omega} exceeds the {} distinct POI coordinates",
            distinct.len()
        )));
    }
    let coords: Vec<f64> = pois
        .iter()
        .flat_map(|p| [p.location.lat(), p.location.lon()])
        .collect();
    let km = kmeans(&coords, 2, omega, max_iters, seed);
    let points = (0..omega)
        .map(|i| {
            let c = km.centroid(i);
            GeoPoint::new(c[0], c[1])
        })
        .collect::<Result<Vec<_>>>()?;
    AnchorSet::new(points)
}

/// Rotates each anchor segment of `x` by the bearing of `p` from that anchor.
pub fn geope_rotate(x: &Embedding, p: GeoPoint, anchors: &AnchorSet) -> Result<Embedding> {
    let angles = anchors.angles(p);
    rotate_segments(x, &angles)
}

/// Segment-wise pair rotation with explicit angles, one per segment.
pub fn rotate_segments(x: &Embedding, angles: &[f64]) -> Result<Embedding> {
    let dim = x.dim();
    let omega = angles.len();
    if omega == 0 || !dim.is_multiple_of(2 * omega) {
        return Err(Error::invalid(format!(
            "embedding dimension {dim} is not divisible by 2 * {omega} anchors"
        )));
    }
    let seg = dim / omega;
    let mut out = x.0.clone();
    for (segment, &theta) in out.chunks_exact_mut(seg).zip(angles) {
        let (s, c) = theta.sin_cos();
        for pair in segment.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
    }
    Ok(Embedding(out))
}
