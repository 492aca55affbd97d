//! Neighbor sampling of sub-graphs, node IoU and greedy NMS.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SceneGraph;

/// A canonical node/edge subset of one scene graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubGraph {
    node_ids: Vec<usize>,
    edge_ids: Vec<usize>,
    parent: String,
}

impl SubGraph {
    /// Canonicalizes (sort + dedup) and checks the sub-graph against `g`.
    pub fn new(g: &SceneGraph, nodes: Vec<usize>, edges: Vec<usize>) -> Result<Self> {
        let mut node_ids = nodes;
        node_ids.sort_unstable();
        node_ids.dedup();
        let mut edge_ids = edges;
        edge_ids.sort_unstable();
        edge_ids.dedup();
        if node_ids.is_empty() {
            return Err(Error::Validation("sub-graph has no nodes".into()));
        }
        if let Some(&n) = node_ids.last() {
            if n >= g.num_nodes() {
                return Err(Error::NodeOutOfRange {
                    node: n,
                    len: g.num_nodes(),
                });
            }
        }
        for &e in &edge_ids {
            let edge = g.edges.get(e).ok_or_else(|| {
                Error::Validation(format!("sub-graph references missing edge {e}"))
            })?;
            if node_ids.binary_search(&edge.src).is_err()
                || node_ids.binary_search(&edge.dst).is_err()
            {
                return Err(Error::Validation(format!(
                    "edge {e} has an endpoint outside the sub-graph"
                )));
            }
        }
        Ok(SubGraph {
            node_ids,
            edge_ids,
            parent: g.image_id.clone(),
        })
    }

    pub fn nodes(&self) -> &[usize] {
        &self.node_ids
    }

    pub fn edges(&self) -> &[usize] {
        &self.edge_ids
    }

    pub fn parent(&self) -> &str {
        &self.parent
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn contains_node(&self, v: usize) -> bool {
        self.node_ids.binary_search(&v).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSubGraph {
    pub sub: SubGraph,
    pub score: f64,
}

/// A sampled sub-graph together with the seed set that produced it first.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSubGraph {
    pub sub: SubGraph,
    pub seeds: Vec<usize>,
}

/// Neighbour closure of a seed set: the seeds, their undirected neighbours, and
/// every edge incident to a seed.
pub fn closure_from_seeds(g: &SceneGraph, seeds: &[usize]) -> Result<SubGraph> {
    let adj = g.neighbor_lists();
    closure_with(g, &adj, seeds)
}

fn closure_with(g: &SceneGraph, adj: &[Vec<usize>], seeds: &[usize]) -> Result<SubGraph> {
    let mut nodes = seeds.to_vec();
    for &s in seeds {
        let neighbors = adj.get(s).ok_or(Error::NodeOutOfRange {
            node: s,
            len: g.num_nodes(),
        })?;
        nodes.extend_from_slice(neighbors);
    }
    let edges = g
        .edges
        .iter()
        .filter(|e| seeds.contains(&e.src) || seeds.contains(&e.dst))
        .map(|e| e.id)
        .collect();
    SubGraph::new(g, nodes, edges)
}

/// Stable 64-bit FNV-1a, used to give every image its own sampling stream.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// The random stream used by [`sample_subgraphs`] for a given image.
pub fn sampling_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(image_id))
}

/// Draws `num_draws` seed sets, closes each over immediate neighbours and
/// removes duplicates (first occurrence wins).
pub fn sample_subgraphs(
    g: &SceneGraph,
    num_draws: usize,
    seed: u64,
    max_seeds: usize,
) -> Result<Vec<SubGraph>> {
    Ok(sample_subgraphs_audited(g, num_draws, seed, max_seeds)?
        .into_iter()
        .map(|s| s.sub)
        .collect())
}

pub fn sample_subgraphs_audited(
    g: &SceneGraph,
    num_draws: usize,
    seed: u64,
    max_seeds: usize,
) -> Result<Vec<SampledSubGraph>> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    if num_draws == 0 || max_seeds == 0 {
        return Err(Error::InvalidArgument(
            "num_draws and max_seeds must be at least 1".into(),
        ));
    }
    let adj = g.neighbor_lists();
    let mut rng = sampling_rng(seed, &g.image_id);
    let max_k = max_seeds.min(n);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..num_draws {
        let k = rng.random_range(1..=max_k);
        let mut seeds = index::sample(&mut rng, n, k).into_vec();
        seeds.sort_unstable();
        let sub = closure_with(g, &adj, &seeds)?;
        if seen.insert((sub.node_ids.clone(), sub.edge_ids.clone())) {
            out.push(SampledSubGraph { sub, seeds });
        }
    }
    Ok(out)
}

fn iou_sorted(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// `|nodes(a) ∩ nodes(b)| / |nodes(a) ∪ nodes(b)|`.
pub fn node_iou(a: &SubGraph, b: &SubGraph) -> Result<f64> {
    if a.parent != b.parent {
        return Err(Error::ParentMismatch(a.parent.clone(), b.parent.clone()));
    }
    Ok(iou_sorted(&a.node_ids, &b.node_ids))
}

/// Node IoU of a sub-graph against a bare node set.
pub fn node_set_iou(a: &SubGraph, nodes: &[usize]) -> f64 {
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    iou_sorted(&a.node_ids, &sorted)
}

/// Greedy non-maximum suppression on node IoU. Candidates are visited by
/// descending score (ties: smaller node set lexicographically, then input
/// order) and kept iff their IoU with every kept candidate is below
/// `threshold`.
pub fn nms(cands: &[ScoredSubGraph], threshold: f64) -> Vec<ScoredSubGraph> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&i, &j| {
        cands[j]
            .score
            .total_cmp(&cands[i].score)
            .then_with(|| cands[i].sub.node_ids.cmp(&cands[j].sub.node_ids))
            .then(i.cmp(&j))
    });
    let mut kept: Vec<ScoredSubGraph> = Vec::new();
    for i in order {
        let c = &cands[i];
        if kept
            .iter()
            .all(|k| iou_sorted(&k.sub.node_ids, &c.sub.node_ids) < threshold)
        {
            kept.push(c.clone());
        }
    }
    kept
}

/// All nodes and all edges.
pub fn full_graph_subgraph(g: &SceneGraph) -> Result<SubGraph> {
    if g.num_nodes() == 0 {
        return Err(Error::EmptyGraph);
    }
    SubGraph::new(
        g,
        (0..g.num_nodes()).collect(),
        (0..g.num_edges()).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubGraphRecord {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// `{"image_id": ..., "subgraphs": [...]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubGraphList {
    pub image_id: String,
    pub subgraphs: Vec<SubGraphRecord>,
}

impl SubGraphList {
    pub fn from_subgraphs<'a>(
        image_id: &str,
        subs: impl IntoIterator<Item = (&'a SubGraph, Option<f64>)>,
    ) -> Self {
        SubGraphList {
            image_id: image_id.to_string(),
            subgraphs: subs
                .into_iter()
                .map(|(s, score)| SubGraphRecord {
                    nodes: s.node_ids.clone(),
                    edges: s.edge_ids.clone(),
                    score,
                })
                .collect(),
        }
    }

    pub fn to_subgraphs(&self, g: &SceneGraph) -> Result<Vec<SubGraph>> {
        if g.image_id != self.image_id {
            return Err(Error::ParentMismatch(
                self.image_id.clone(),
                g.image_id.clone(),
            ));
        }
        self.subgraphs
            .iter()
            .map(|r| SubGraph::new(g, r.nodes.clone(), r.edges.clone()))
            .collect()
    }
}
