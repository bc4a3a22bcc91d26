//! Adjacency index over a ConceptNet-style edge dump.
//!
//! Edges are symmetrized at load time and relation labels are kept only as
//! annotations: relatedness queries ignore them. Queries answer direct
//! neighbors, the radius-2 ball (or exact distance 2), and edge membership.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};

/// Interpretation of a 2-hop query: the radius-2 ball minus the center, or
/// only the nodes at exactly distance 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TwoHopMode {
    #[default]
    Ball,
    Exact,
}

impl std::str::FromStr for TwoHopMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ball" => Ok(TwoHopMode::Ball),
            "exact" => Ok(TwoHopMode::Exact),
            other => Err(Error::Config(format!(
                "two_hop_mode must be `ball` or `exact`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EdgeInfo {
    pub relation: String,
    pub weight: f64,
}

/// Per-load accounting, reported by the ingestion commands.
#[derive(Debug, Clone, Default)]
pub struct LoadStats {
    pub lines: usize,
    pub edges: usize,
    pub malformed: usize,
    pub self_loops_dropped: usize,
    pub duplicates_merged: usize,
}

/// Undirected adjacency index over normalized concept strings.
#[derive(Debug, Clone, Default)]
pub struct ConceptNetIndex {
    adjacency: BTreeMap<String, BTreeMap<String, EdgeInfo>>,
}

/// Canonical concept form: lowercase, trimmed, spaces as underscores, with
/// ConceptNet URI prefixes like `/c/en/dog/n` stripped to `dog`.
pub fn normalize_concept(raw: &str) -> String {
    let trimmed = raw.trim();
    let body = if let Some(rest) = trimmed.strip_prefix("/c/") {
        rest.split('/').nth(1).unwrap_or(rest)
    } else {
        trimmed
    };
    body.to_lowercase().replace([' ', '\t'], "_")
}

impl ConceptNetIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse a tab-separated edge dump: `start TAB relation TAB end TAB
    /// weight`, one edge per line, `#` comments ignored. Duplicate edges
    /// collapse keeping the maximum weight. An empty source yields a valid
    /// empty index.
    pub fn load_edges(text: &str) -> (Self, LoadStats) {
        let mut index = ConceptNetIndex::new();
        let mut stats = LoadStats::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            stats.lines += 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                stats.malformed += 1;
                continue;
            }
            let weight: f64 = match fields[3].trim().parse() {
                Ok(w) if w >= 0.0 => w,
                _ => {
                    stats.malformed += 1;
                    continue;
                }
            };
            let start = normalize_concept(fields[0]);
            let end = normalize_concept(fields[2]);
            if start.is_empty() || end.is_empty() {
                stats.malformed += 1;
                continue;
            }
            if start == end {
                stats.self_loops_dropped += 1;
                continue;
            }
            if index.insert_edge(&start, &end, fields[1].trim(), weight) {
                stats.edges += 1;
            } else {
                stats.duplicates_merged += 1;
            }
        }
        (index, stats)
    }

    pub fn load_edges_file(path: &Path) -> Result<(Self, LoadStats)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::load_edges(&text))
    }

    /// Insert one undirected edge. Returns true if the edge is new.
    fn insert_edge(&mut self, a: &str, b: &str, relation: &str, weight: f64) -> bool {
        let existing = self.adjacency.get(a).and_then(|m| m.get(b)).cloned();
        let info = match existing {
            Some(old) if old.weight >= weight => old,
            _ => EdgeInfo {
                relation: relation.to_string(),
                weight,
            },
        };
        let fresh = self
            .adjacency
            .entry(a.to_string())
            .or_default()
            .insert(b.to_string(), info.clone())
            .is_none();
        self.adjacency
            .entry(b.to_string())
            .or_default()
            .insert(a.to_string(), info);
        fresh
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeMap::len).sum::<usize>() / 2
    }

    pub fn contains(&self, concept: &str) -> bool {
        self.adjacency.contains_key(&normalize_concept(concept))
    }

    /// Direct neighbors; empty for unknown concepts.
    pub fn neighbors(&self, concept: &str) -> BTreeSet<String> {
        self.adjacency
            .get(&normalize_concept(concept))
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Radius-2 ball minus the center (default query used for forecasted
    /// concept retrieval).
    pub fn two_hop(&self, concept: &str) -> BTreeSet<String> {
        self.two_hop_mode(concept, TwoHopMode::Ball)
    }

    pub fn two_hop_mode(&self, concept: &str, mode: TwoHopMode) -> BTreeSet<String> {
        let center = normalize_concept(concept);
        let first = match self.adjacency.get(&center) {
            Some(m) => m,
            None => return BTreeSet::new(),
        };
        let mut out = BTreeSet::new();
        let mut second = BTreeSet::new();
        for hop1 in first.keys() {
            if let Some(m) = self.adjacency.get(hop1) {
                for hop2 in m.keys() {
                    second.insert(hop2.clone());
                }
            }
        }
        match mode {
            TwoHopMode::Ball => {
                out.extend(first.keys().cloned());
                out.extend(second);
            }
            TwoHopMode::Exact => {
                for c in second {
                    if !first.contains_key(&c) {
                        out.insert(c);
                    }
                }
            }
        }
        out.remove(&center);
        out
    }

    /// True iff a direct edge exists between the two concepts. Relation
    /// labels do not participate; a concept is never related to itself.
    pub fn related(&self, a: &str, b: &str) -> bool {
        let a = normalize_concept(a);
        let b = normalize_concept(b);
        if a == b {
            return false;
        }
        self.adjacency
            .get(&a)
            .map(|m| m.contains_key(&b))
            .unwrap_or(false)
    }

    /// Canonical dump of the index in the edge-text format; reloading it
    /// reproduces identical query answers.
    pub fn to_edge_text(&self) -> String {
        let mut out = String::new();
        for (a, nbrs) in &self.adjacency {
            for (b, info) in nbrs {
                if a < b {
                    out.push_str(&format!("{a}\t{}\t{b}\t{}\n", info.relation, info.weight));
                }
            }
        }
        out
    }
}
