//! Generative point-of-interest retrieval.
//!
//! Each POI gets a compact identifier: a geohash prefix, a semantic code from a residual
//! quantizer over location-rotated text embeddings, and a collision counter. A small
//! decoder-only transformer reads a user's history, query and location and generates
//! identifiers token by token, constrained to a trie of known POIs.

pub mod error;
pub mod hashing;
pub mod io;
pub mod kmeans;
pub mod nn;

pub mod geocode;
pub mod embed;
pub mod anchors;
pub mod quantizer;
pub mod pid;
pub mod seqmodel;
pub mod proximity;
pub mod decode;
pub mod datagen;
pub mod eval;
pub mod pipeline;

pub use error::{Error, Result};
