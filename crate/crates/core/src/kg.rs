//! Forecasted-concept selection and knowledge-graph assembly.
//!
//! The graph holds k x 10 detected nodes (grouped by image, temporal order)
//! followed by the selected forecasted nodes. Edges come from ConceptNet
//! relatedness, with detected-detected pairs across images restricted to
//! adjacent images so the temporal order stays visible to the network.

use std::collections::BTreeSet;

use crate::conceptnet::{normalize_concept, ConceptNetIndex, TwoHopMode};
use crate::concepts::{EmbeddingProvider, Sample};
use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, norm, softmax_rows, Tensor};

/// Where a node came from: a detector pass over image `image`, or the
/// commonsense expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Detected { image: usize },
    Forecasted,
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    nodes: Vec<(String, Provenance)>,
    edges: BTreeSet<(usize, usize)>,
}

impl KnowledgeGraph {
    pub fn new(nodes: Vec<(String, Provenance)>) -> Self {
        Self {
            nodes,
            edges: BTreeSet::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[(String, Provenance)] {
        &self.nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let key = if a < b { (a, b) } else { (b, a) };
        self.edges.contains(&key)
    }

    /// Insert an undirected edge; self-edges are rejected.
    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<()> {
        if a == b {
            return Err(Error::Degenerate {
                op: "add_edge",
                detail: format!("self-edge on node {a}"),
            });
        }
        if a >= self.nodes.len() || b >= self.nodes.len() {
            return Err(Error::Degenerate {
                op: "add_edge",
                detail: format!("edge ({a},{b}) out of range"),
            });
        }
        self.edges.insert(if a < b { (a, b) } else { (b, a) });
        Ok(())
    }

    /// Sorted neighbor lists for every node.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            lists[a].push(b);
            lists[b].push(a);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        lists
    }
}

/// Relevance scoring between the image context and a candidate concept
/// embedding. Cosine mode maps cos to [0,1]; linear-head mode mirrors the
/// encoder-plus-softmax-head shape with a frozen random head.
#[derive(Debug, Clone)]
pub enum RelevanceScorer {
    Cosine,
    LinearHead { head: Tensor },
}

impl RelevanceScorer {
    pub fn cosine() -> Self {
        RelevanceScorer::Cosine
    }

    /// Frozen random head over the concatenated [context; concept] vector,
    /// producing 2 logits whose softmax gives the related probability.
    pub fn linear_head(d: usize, seed: u64) -> Self {
        let mut rng = crate::params::seeded_rng(seed);
        RelevanceScorer::LinearHead {
            head: crate::params::xavier_uniform(2 * d, 2, &mut rng),
        }
    }

    /// Score in [0,1]; deterministic. A zero-norm vector in cosine mode is
    /// neutral (0.5).
    pub fn score(&self, context: &Tensor, concept_emb: &Tensor) -> Result<f64> {
        if context.len() != concept_emb.len() {
            return Err(Error::Shape {
                op: "relevance_score",
                lhs: context.shape().to_vec(),
                rhs: concept_emb.shape().to_vec(),
            });
        }
        match self {
            RelevanceScorer::Cosine => {
                let na = norm(context.data());
                let nb = norm(concept_emb.data());
                if na == 0.0 || nb == 0.0 {
                    return Ok(0.5);
                }
                let cos = dot(context.data(), concept_emb.data()) / (na * nb);
                Ok((1.0 + cos.clamp(-1.0, 1.0)) / 2.0)
            }
            RelevanceScorer::LinearHead { head } => {
                let mut joint = context.data().to_vec();
                joint.extend_from_slice(concept_emb.data());
                let joint = Tensor::new(vec![1, joint.len()], joint)?;
                let logits = matmul(&joint, head)?;
                let probs = softmax_rows(&logits, 1.0)?;
                Ok(probs.data()[1])
            }
        }
    }
}

/// Pool of forecasted-concept candidates: the union of 2-hop queries over
/// every detected concept, minus the detected strings themselves.
pub fn forecast_candidates(
    index: &ConceptNetIndex,
    sample: &Sample,
    mode: TwoHopMode,
) -> BTreeSet<String> {
    let detected: BTreeSet<String> = sample.detected_flat().into_iter().collect();
    let mut pool = BTreeSet::new();
    for concept in &detected {
        pool.extend(index.two_hop_mode(concept, mode));
    }
    for d in &detected {
        pool.remove(d);
    }
    pool
}

/// Outcome of top-M selection. `shortfall` is set when the pool was smaller
/// than requested; the graph simply shrinks in that case.
#[derive(Debug, Clone)]
pub struct Selection {
    pub concepts: Vec<String>,
    pub shortfall: bool,
}

/// Keep the M candidates with the highest relevance scores. Ties break
/// lexicographically by concept string, which makes the ranking prefix-stable
/// in M.
pub fn select_forecasted(
    candidates: &BTreeSet<String>,
    scorer: &RelevanceScorer,
    context: &Tensor,
    provider: &EmbeddingProvider,
    m: usize,
) -> Result<Selection> {
    let mut scored: Vec<(f64, String)> = Vec::with_capacity(candidates.len());
    for c in candidates {
        let emb = provider.embed(c);
        scored.push((scorer.score(context, &emb)?, c.clone()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let shortfall = scored.len() < m;
    let concepts = scored.into_iter().take(m).map(|(_, c)| c).collect();
    Ok(Selection {
        concepts,
        shortfall,
    })
}

/// Relatedness rule used during graph construction: ConceptNet edge, or the
/// same concept string detected in two places.
fn graph_related(index: &ConceptNetIndex, a: &str, b: &str) -> bool {
    a == b || index.related(a, b)
}

/// Assemble the knowledge graph over detected + forecasted nodes.
///
/// Detected-detected pairs in different images connect only when the images
/// are adjacent; forecasted nodes carry no image index and connect to any
/// related node.
pub fn build_graph(
    sample: &Sample,
    forecasted: &[String],
    index: &ConceptNetIndex,
) -> Result<KnowledgeGraph> {
    let detected_set: BTreeSet<String> = sample.detected_flat().into_iter().collect();
    for f in forecasted {
        if detected_set.contains(&normalize_concept(f)) {
            return Err(Error::Degenerate {
                op: "build_graph",
                detail: format!("forecasted concept `{f}` also appears as detected"),
            });
        }
    }

    let mut nodes = Vec::new();
    for (image, list) in sample.detected.iter().enumerate() {
        for concept in list {
            nodes.push((normalize_concept(concept), Provenance::Detected { image }));
        }
    }
    for concept in forecasted {
        nodes.push((normalize_concept(concept), Provenance::Forecasted));
    }

    let mut graph = KnowledgeGraph::new(nodes);
    let n = graph.node_count();
    for a in 0..n {
        for b in (a + 1)..n {
            let (ca, pa) = &graph.nodes[a];
            let (cb, pb) = &graph.nodes[b];
            if !graph_related(index, ca, cb) {
                continue;
            }
            let allowed = match (pa, pb) {
                (Provenance::Detected { image: ia }, Provenance::Detected { image: ib }) => {
                    ia.abs_diff(*ib) <= 1
                }
                _ => true,
            };
            if allowed {
                graph.edges.insert((a, b));
            }
        }
    }
    Ok(graph)
}

/// DOT export with detected and forecasted nodes styled apart. Output is
/// stable across runs for a fixed graph.
pub fn export_dot(graph: &KnowledgeGraph) -> String {
    let mut out = String::from("graph knowledge {\n  node [style=filled];\n");
    for (idx, (concept, prov)) in graph.nodes().iter().enumerate() {
        let (fill, class) = match prov {
            Provenance::Detected { image } => ("lightblue", format!("detected_i{image}")),
            Provenance::Forecasted => ("tan", "forecasted".to_string()),
        };
        out.push_str(&format!(
            "  n{idx} [label=\"{concept}\", fillcolor={fill}, class=\"{class}\"];\n"
        ));
    }
    for (a, b) in graph.edges() {
        out.push_str(&format!("  n{a} -- n{b};\n"));
    }
    out.push_str("}\n");
    out
}

/// Parse node/edge counts back out of a DOT export (test oracle support).
pub fn parse_dot_counts(dot: &str) -> (usize, usize) {
    let nodes = dot
        .lines()
        .filter(|l| l.trim_start().starts_with('n') && l.contains("[label="))
        .count();
    let edges = dot.lines().filter(|l| l.contains(" -- ")).count();
    (nodes, edges)
}

#[derive(Debug, Clone)]
pub struct GraphSummary {
    pub id: String,
    pub nodes: usize,
    pub edges: usize,
    pub forecasted: usize,
}
