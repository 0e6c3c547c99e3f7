//! Geo-semantic POI identifiers and the prefix trie that constrains decoding.
//!
//! A PID is `gid ∥ sid ∥ dedup`: the geohash characters of the POI, its semantic codeword
//! indices, and a single token separating POIs that would otherwise collide. Every PID in
//! a database has the same token length, so beams terminate at a fixed depth.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::embed::PoiRecord;
use crate::error::{Error, Result};
use crate::geocode::{symbol_char, Gid};
use crate::io::{self, Header};
use crate::quantizer::Sid;

pub type TokenId = u32;

pub const TRIE_FORMAT: &str = "poigen.trie";
pub const PIDMAP_FORMAT: &str = "poigen.pidmap";
pub const PID_FILE_VERSION: u32 = 1;

/// Number of structural marker tokens at the start of the vocabulary.
pub const MARKER_COUNT: u32 = 4;
pub const PAD: TokenId = 0;
pub const HISTORY_SEP: TokenId = 1;
pub const QUERY_START: TokenId = 2;
pub const TARGET_START: TokenId = 3;
pub const GEO_SYMBOLS: u32 = 32;

/// Token geometry of PIDs and the fixed (corpus-independent) part of the vocabulary:
/// markers, 32 geo symbols shared by all GID positions, level-specific SID tokens and
/// dedup tokens, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PidLayout {
    /// Zero when explicit geographic identifiers are disabled.
    pub gid_len: usize,
    pub sid_levels: usize,
    pub codebook_size: usize,
    pub dedup_max: usize,
}

impl PidLayout {
    pub fn validate(&self) -> Result<()> {
        if self.gid_len > crate::geocode::MAX_GEOHASH_LEN {
            return Err(Error::Config(format!("gid_len {} exceeds 12", self.gid_len)));
        }
        if self.sid_levels == 0 || self.codebook_size == 0 || self.dedup_max == 0 {
            return Err(Error::Config(
                "sid_levels, codebook_size and dedup_max must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn pid_len(&self) -> usize {
        self.gid_len + self.sid_levels + 1
    }

    pub fn geo_range(&self) -> Range<TokenId> {
        MARKER_COUNT..MARKER_COUNT + GEO_SYMBOLS
    }

    pub fn sid_range(&self, level: usize) -> Range<TokenId> {
        let start = MARKER_COUNT + GEO_SYMBOLS + (level * self.codebook_size) as u32;
        start..start + self.codebook_size as u32
    }

    pub fn dedup_range(&self) -> Range<TokenId> {
        let start = MARKER_COUNT + GEO_SYMBOLS + (self.sid_levels * self.codebook_size) as u32;
        start..start + self.dedup_max as u32
    }

    /// First id after the fixed regions; text tokens start here.
    pub fn fixed_size(&self) -> u32 {
        self.dedup_range().end
    }

    /// Token region permitted at PID position `pos`.
    pub fn region_at(&self, pos: usize) -> Range<TokenId> {
        if pos < self.gid_len {
            self.geo_range()
        } else if pos < self.gid_len + self.sid_levels {
            self.sid_range(pos - self.gid_len)
        } else {
            self.dedup_range()
        }
    }

    pub fn geo_token(&self, symbol: u8) -> TokenId {
        MARKER_COUNT + symbol as u32
    }

    pub fn gid_tokens(&self, gid: &Gid) -> Vec<TokenId> {
        gid.symbols().map(|s| self.geo_token(s)).collect()
    }

    pub fn tokens(&self, pid: &Pid) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.pid_len());
        if let Some(g) = &pid.gid {
            out.extend(self.gid_tokens(g));
        }
        for (l, &i) in pid.sid.0.iter().enumerate() {
            out.push(self.sid_range(l).start + i as u32);
        }
        out.push(self.dedup_range().start + pid.dedup as u32);
        out
    }

    /// Inverse of [`PidLayout::tokens`]; `None` if any token is out of its region.
    pub fn parse(&self, tokens: &[TokenId]) -> Option<Pid> {
        if tokens.len() != self.pid_len() {
            return None;
        }
        for (pos, t) in tokens.iter().enumerate() {
            if !self.region_at(pos).contains(t) {
                return None;
            }
        }
        let gid = if self.gid_len > 0 {
            let s: String = tokens[..self.gid_len]
                .iter()
                .map(|t| symbol_char((t - MARKER_COUNT) as u8))
                .collect();
            Some(Gid::parse(&s).ok()?)
        } else {
            None
        };
        let sid = Sid(tokens[self.gid_len..self.gid_len + self.sid_levels]
            .iter()
            .enumerate()
            .map(|(l, t)| (t - self.sid_range(l).start) as u16)
            .collect());
        let dedup = (tokens[self.pid_len() - 1] - self.dedup_range().start) as u16;
        Some(Pid { gid, sid, dedup })
    }

    pub fn check(&self, pid: &Pid) -> Result<()> {
        let gid_len = pid.gid.as_ref().map_or(0, Gid::len);
        if gid_len != self.gid_len
            || pid.sid.levels() != self.sid_levels
            || pid.sid.0.iter().any(|&i| i as usize >= self.codebook_size)
            || pid.dedup as usize >= self.dedup_max
        {
            return Err(Error::invalid(format!("PID {pid} does not fit layout {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pid {
    pub gid: Option<Gid>,
    pub sid: Sid,
    pub dedup: u16,
}

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(g) = &self.gid {
            write!(f, "{g}")?;
        }
        write!(f, "{}#{}", self.sid, self.dedup)
    }
}

/// Assigns dedup codes: POIs sharing `(gid, sid)` get 0, 1, 2, … in `poi_id` order.
pub fn build_pids(
    pois: &[PoiRecord],
    gids: &BTreeMap<String, Gid>,
    sids: &BTreeMap<String, Sid>,
    layout: &PidLayout,
) -> Result<BTreeMap<String, Pid>> {
    let mut groups: BTreeMap<(Option<Gid>, Sid), Vec<&str>> = BTreeMap::new();
    for p in pois {
        let gid = if layout.gid_len > 0 {
            let g = gids
                .get(&p.poi_id)
                .ok_or_else(|| Error::invalid(format!("no GID for POI {}", p.poi_id)))?;
            Some(g.clone())
        } else {
            None
        };
        let sid = sids
            .get(&p.poi_id)
            .ok_or_else(|| Error::invalid(format!("no SID for POI {}", p.poi_id)))?;
        groups.entry((gid, sid.clone())).or_default().push(&p.poi_id);
    }
    let mut out = BTreeMap::new();
    for ((gid, sid), mut ids) in groups {
        if ids.len() > layout.dedup_max {
            return Err(Error::Capacity {
                cell: format!("{}{sid}", gid.as_ref().map_or("", Gid::as_str)),
                count: ids.len(),
                limit: layout.dedup_max,
            });
        }
        ids.sort_unstable();
        for (k, id) in ids.into_iter().enumerate() {
            let pid = Pid {
                gid: gid.clone(),
                sid: sid.clone(),
                dedup: k as u16,
            };
            layout.check(&pid)?;
            out.insert(id.to_owned(), pid);
        }
    }
    Ok(out)
}

/// Fraction of POIs whose `(gid, sid)` is shared with at least one other POI.
pub fn collision_rate(pids: &BTreeMap<String, Pid>) -> f64 {
    let mut groups: BTreeMap<(&Option<Gid>, &Sid), usize> = BTreeMap::new();
    for pid in pids.values() {
        *groups.entry((&pid.gid, &pid.sid)).or_default() += 1;
    }
    let colliding: usize = groups.values().filter(|&&n| n > 1).sum();
    colliding as f64 / pids.len().max(1) as f64
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Node {
    /// Sorted by token id.
    children: Vec<(TokenId, u32)>,
    leaf: Option<u32>,
    leaves: u32,
}

/// Prefix tree over PID token sequences. Leaves carry the owning `poi_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct PidTrie {
    depth: usize,
    nodes: Vec<Node>,
    poi_ids: Vec<String>,
}

impl PidTrie {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            nodes: vec![Node::default()],
            poi_ids: Vec::new(),
        }
    }

    pub fn build<'a>(
        layout: &PidLayout,
        pids: impl IntoIterator<Item = (&'a String, &'a Pid)>,
    ) -> Result<Self> {
        let mut trie = PidTrie::new(layout.pid_len());
        for (id, pid) in pids {
            trie.insert(&layout.tokens(pid), id)?;
        }
        Ok(trie)
    }

    /// Root-to-leaf path length.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.poi_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poi_ids.is_empty()
    }

    fn child(&self, node: u32, token: TokenId) -> Option<u32> {
        let ch = &self.nodes[node as usize].children;
        ch.binary_search_by_key(&token, |c| c.0).ok().map(|i| ch[i].1)
    }

    fn walk(&self, prefix: &[TokenId]) -> Option<u32> {
        prefix.iter().try_fold(0u32, |n, &t| self.child(n, t))
    }

    pub fn insert(&mut self, tokens: &[TokenId], poi_id: &str) -> Result<()> {
        if tokens.len() != self.depth {
            return Err(Error::invalid(format!(
                "PID has {} tokens, trie depth is {}",
                tokens.len(),
                self.depth
            )));
        }
        if let Some(n) = self.walk(tokens) {
            if let Some(owner) = self.nodes[n as usize].leaf {
                return Err(Error::Conflict(format!(
                    "PID {tokens:?} already belongs to {}",
                    self.poi_ids[owner as usize]
                )));
            }
        }
        let mut node = 0u32;
        self.nodes[0].leaves += 1;
        for &t in tokens {
            node = match self.child(node, t) {
                Some(c) => c,
                None => {
                    let id = self.nodes.len() as u32;
                    self.nodes.push(Node::default());
                    let ch = &mut self.nodes[node as usize].children;
                    let at = ch.partition_point(|c| c.0 < t);
                    ch.insert(at, (t, id));
                    id
                }
            };
            self.nodes[node as usize].leaves += 1;
        }
        self.nodes[node as usize].leaf = Some(self.poi_ids.len() as u32);
        self.poi_ids.push(poi_id.to_owned());
        Ok(())
    }

    /// Tokens that extend `prefix` along some stored PID, ascending; empty if the prefix
    /// is absent or already a full PID.
    pub fn children(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        self.walk(prefix)
            .map(|n| self.nodes[n as usize].children.iter().map(|c| c.0).collect())
            .unwrap_or_default()
    }

    pub fn contains_prefix(&self, prefix: &[TokenId]) -> bool {
        self.walk(prefix).is_some()
    }

    /// Number of PIDs below `prefix`.
    pub fn leaf_count(&self, prefix: &[TokenId]) -> usize {
        self.walk(prefix)
            .map_or(0, |n| self.nodes[n as usize].leaves as usize)
    }

    pub fn lookup(&self, tokens: &[TokenId]) -> Option<&str> {
        if tokens.len() != self.depth {
            return None;
        }
        let n = self.walk(tokens)?;
        self.nodes[n as usize]
            .leaf
            .map(|i| self.poi_ids[i as usize].as_str())
    }

    /// Every stored PID under `prefix`, in token order.
    pub fn leaves_under(&self, prefix: &[TokenId]) -> Vec<(Vec<TokenId>, &str)> {
        let mut out = Vec::new();
        if let Some(n) = self.walk(prefix) {
            let mut path = prefix.to_vec();
            self.collect(n, &mut path, &mut out);
        }
        out
    }

    fn collect<'a>(&'a self, node: u32, path: &mut Vec<TokenId>, out: &mut Vec<(Vec<TokenId>, &'a str)>) {
        let n = &self.nodes[node as usize];
        if let Some(i) = n.leaf {
            out.push((path.clone(), self.poi_ids[i as usize].as_str()));
        }
        for &(t, c) in &n.children {
            path.push(t);
            self.collect(c, path, out);
            path.pop();
        }
    }

    /// Number of nodes whose child count exceeds one, keyed by depth.
    pub fn branch_points(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        let mut stack = vec![(0u32, 0usize)];
        while let Some((n, d)) = stack.pop() {
            let node = &self.nodes[n as usize];
            if node.children.len() > 1 {
                *out.entry(d).or_default() += 1;
            }
            stack.extend(node.children.iter().map(|&(_, c)| (c, d + 1)));
        }
        out
    }
}

/// Single-writer, many-reader handle; readers keep whatever snapshot they loaded.
#[derive(Debug, Clone)]
pub struct SharedTrie {
    current: Arc<RwLock<Arc<PidTrie>>>,
}

impl SharedTrie {
    pub fn new(trie: PidTrie) -> Self {
        Self {
            current: Arc::new(RwLock::new(Arc::new(trie))),
        }
    }

    pub fn load(&self) -> Arc<PidTrie> {
        self.current.read().expect("poisoned").clone()
    }

    /// Replaces the published snapshot, returning the previous one.
    pub fn swap(&self, next: PidTrie) -> Arc<PidTrie> {
        let mut guard = self.current.write().expect("poisoned");
        std::mem::replace(&mut *guard, Arc::new(next))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidEntry {
    pub poi_id: String,
    pub pid: Pid,
    pub tokens: Vec<TokenId>,
}

pub fn write_pid_map(path: &Path, layout: &PidLayout, pids: &BTreeMap<String, Pid>) -> Result<()> {
    let entries: Vec<PidEntry> = pids
        .iter()
        .map(|(id, pid)| PidEntry {
            poi_id: id.clone(),
            pid: pid.clone(),
            tokens: layout.tokens(pid),
        })
        .collect();
    io::write_jsonl(
        path,
        &Header::new(PIDMAP_FORMAT, PID_FILE_VERSION).with_meta(layout),
        &entries,
    )
}

pub fn read_pid_map(path: &Path) -> Result<(PidLayout, BTreeMap<String, Pid>)> {
    let (header, entries): (_, Vec<PidEntry>) = io::read_jsonl(path, PIDMAP_FORMAT, PID_FILE_VERSION)?;
    let layout: PidLayout = serde_json::from_value(header.meta).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("layout: {e}"),
    })?;
    let mut out = BTreeMap::new();
    for e in entries {
        layout.check(&e.pid)?;
        out.insert(e.poi_id, e.pid);
    }
    Ok((layout, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrieLine {
    poi_id: String,
    tokens: Vec<TokenId>,
}

/// Persists every stored PID; loading rebuilds the trie by reinsertion.
pub fn write_trie_snapshot(path: &Path, layout: &PidLayout, trie: &PidTrie) -> Result<()> {
    let lines: Vec<TrieLine> = trie
        .leaves_under(&[])
        .into_iter()
        .map(|(tokens, id)| TrieLine {
            poi_id: id.to_owned(),
            tokens,
        })
        .collect();
    io::write_jsonl(
        path,
        &Header::new(TRIE_FORMAT, PID_FILE_VERSION).with_meta(layout),
        &lines,
    )
}

pub fn read_trie_snapshot(path: &Path) -> Result<(PidLayout, PidTrie)> {
    let (header, lines): (_, Vec<TrieLine>) = io::read_jsonl(path, TRIE_FORMAT, PID_FILE_VERSION)?;
    let layout: PidLayout = serde_json::from_value(header.meta).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("layout: {e}"),
    })?;
    let mut trie = PidTrie::new(layout.pid_len());
    for l in lines {
        trie.insert(&l.tokens, &l.poi_id)?;
    }
    Ok((layout, trie))
}
