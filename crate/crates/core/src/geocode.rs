//! Geohash encoding and the small amount of spherical geometry the pipeline needs.
//!
//! Encoding follows the standard convention: bits alternate between longitude and
//! latitude (longitude first), each bit halves the current interval, and every five
//! bits become one base-32 character, most significant bit first.

use std::f64::consts::{PI, TAU};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base-32 geohash alphabet (no `a`, `i`, `l`, `o`).
pub const GEOHASH_ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

/// Longest geohash this crate produces; 60 bits fits comfortably in a `u64`.
pub const MAX_GEOHASH_LEN: usize = 12;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// A validated WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = Error;
    fn try_from(raw: RawPoint) -> Result<Self> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lat: p.lat, lon: p.lon }
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::invalid(format!("latitude {lat} outside [-90, 90]")));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::invalid(format!("longitude {lon} outside [-180, 180]")));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// A geohash string of fixed length over [`GEOHASH_ALPHABET`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Gid(String);

impl Gid {
    pub fn parse(s: &str) -> Result<Self> {
        if s.is_empty() || s.len() > MAX_GEOHASH_LEN {
            return Err(Error::Decode(format!(
                "geohash length {} outside [1, {MAX_GEOHASH_LEN}]",
                s.len()
            )));
        }
        if let Some(c) = s.bytes().find(|b| symbol_value(*b).is_none()) {
            return Err(Error::Decode(format!(
                "character {:?} is not in the geohash alphabet",
                c as char
            )));
        }
        Ok(Self(s.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Symbol indices in `0..32`, one per character.
    pub fn symbols(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.bytes().map(|b| symbol_value(b).expect("validated on construction"))
    }

    /// First `len` characters.
    pub fn truncate(&self, len: usize) -> Gid {
        Gid(self.0[..len.min(self.0.len())].to_owned())
    }
}

impl fmt::Display for Gid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Gid {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Gid::parse(&s)
    }
}

impl From<Gid> for String {
    fn from(g: Gid) -> Self {
        g.0
    }
}

/// Index of a geohash character in the alphabet.
pub fn symbol_value(c: u8) -> Option<u8> {
    GEOHASH_ALPHABET.iter().position(|&a| a == c).map(|i| i as u8)
}

/// Character for a symbol index in `0..32`.
pub fn symbol_char(v: u8) -> char {
    GEOHASH_ALPHABET[v as usize] as char
}

// Upper bounds are exclusive in the bisection, so the closed endpoints are nudged inside.
fn clamp_open(v: f64, hi: f64) -> f64 {
    if v >= hi {
        hi.next_down()
    } else {
        v
    }
}

pub fn encode_geohash(p: GeoPoint, len: usize) -> Result<Gid> {
    if !(1..=MAX_GEOHASH_LEN).contains(&len) {
        return Err(Error::invalid(format!(
            "geohash length {len} outside [1, {MAX_GEOHASH_LEN}]"
        )));
    }
    let lat = clamp_open(p.lat, 90.0);
    let lon = clamp_open(p.lon, 180.0);
    let (mut lat_lo, mut lat_hi) = (-90.0f64, 90.0f64);
    let (mut lon_lo, mut lon_hi) = (-180.0f64, 180.0f64);
    let mut out = String::with_capacity(len);
    let mut even = true;
    for _ in 0..len {
        let mut sym = 0u8;
        for _ in 0..5 {
            let (v, lo, hi) = if even {
                (lon, &mut lon_lo, &mut lon_hi)
            } else {
                (lat, &mut lat_lo, &mut lat_hi)
            };
            let mid = (*lo + *hi) / 2.0;
            sym <<= 1;
            if v >= mid {
                sym |= 1;
                *lo = mid;
            } else {
                *hi = mid;
            }
            even = !even;
        }
        out.push(symbol_char(sym));
    }
    Ok(Gid(out))
}

/// The rectangle a geohash denotes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub center: GeoPoint,
    pub half_extent_lat: f64,
    pub half_extent_lon: f64,
}

impl Cell {
    pub fn lat_range(&self) -> (f64, f64) {
        (
            self.center.lat - self.half_extent_lat,
            self.center.lat + self.half_extent_lat,
        )
    }

    pub fn lon_range(&self) -> (f64, f64) {
        (
            self.center.lon - self.half_extent_lon,
            self.center.lon + self.half_extent_lon,
        )
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        let (la0, la1) = self.lat_range();
        let (lo0, lo1) = self.lon_range();
        p.lat >= la0 && p.lat < la1 && p.lon >= lo0 && p.lon < lo1
    }
}

pub fn decode_cell(g: &Gid) -> Cell {
    let (mut lat_lo, mut lat_hi) = (-90.0f64, 90.0f64);
    let (mut lon_lo, mut lon_hi) = (-180.0f64, 180.0f64);
    let mut even = true;
    for sym in g.symbols() {
        for bit in (0..5).rev() {
            let set = (sym >> bit) & 1 == 1;
            let (lo, hi) = if even {
                (&mut lon_lo, &mut lon_hi)
            } else {
                (&mut lat_lo, &mut lat_hi)
            };
            let mid = (*lo + *hi) / 2.0;
            if set {
                *lo = mid;
            } else {
                *hi = mid;
            }
            even = !even;
        }
    }
    Cell {
        center: GeoPoint {
            lat: (lat_lo + lat_hi) / 2.0,
            lon: (lon_lo + lon_hi) / 2.0,
        },
        half_extent_lat: (lat_hi - lat_lo) / 2.0,
        half_extent_lon: (lon_hi - lon_lo) / 2.0,
    }
}

/// Parses and decodes in one step; rejects characters outside the alphabet.
pub fn decode_str(s: &str) -> Result<Cell> {
    Ok(decode_cell(&Gid::parse(s)?))
}

/// Cell dimensions `(lat_degrees, lon_degrees)` at geohash length `len`.
pub fn cell_size_degrees(len: usize) -> (f64, f64) {
    let bits = 5 * len;
    let lon_bits = bits.div_ceil(2);
    let lat_bits = bits / 2;
    (
        180.0 / 2f64.powi(lat_bits as i32),
        360.0 / 2f64.powi(lon_bits as i32),
    )
}

/// Upper bound on the great-circle distance between two points in one level-`len` cell.
///
/// The sphere metric `R²(dφ² + cos²φ dλ²)` is dominated by the flat metric `R²(dφ² + dλ²)`,
/// so the flat diagonal of the cell bounds every in-cell distance.
pub fn cell_diagonal_m(len: usize) -> f64 {
    let (h, w) = cell_size_degrees(len);
    EARTH_RADIUS_M * (h.to_radians().powi(2) + w.to_radians().powi(2)).sqrt()
}

pub fn common_prefix_len(a: &Gid, b: &Gid) -> usize {
    a.0.bytes().zip(b.0.bytes()).take_while(|(x, y)| x == y).count()
}

/// Azimuth of `p` seen from `reference`, in `[0, 2π)`. Coincident points give 0.
pub fn bearing_angle(p: GeoPoint, reference: GeoPoint) -> f64 {
    let dlat = p.lat - reference.lat;
    let dlon = p.lon - reference.lon;
    if dlat == 0.0 && dlon == 0.0 {
        return 0.0;
    }
    let mut theta = dlat.atan2(dlon * reference.lat.to_radians().cos());
    if theta < 0.0 {
        theta += TAU;
    }
    // -0.0 and values that round up to 2π both map to 0.
    if theta == 0.0 || theta >= TAU {
        0.0
    } else {
        debug_assert!(theta < 2.0 * PI);
        theta
    }
}

pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}
