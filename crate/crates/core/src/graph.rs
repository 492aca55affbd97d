//! Scene-graph data model, JSON ingestion, embeddings and the caption
//! vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Validation("box coordinates must be finite".into()));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Validation(format!(
                "box must have positive size, got {}x{}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneNode {
    pub id: usize,
    pub label: String,
    pub visual: Vec<f64>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEdge {
    pub id: usize,
    /// Subject node.
    pub src: usize,
    /// Object node.
    pub dst: usize,
    pub predicate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub nodes: Vec<SceneNode>,
    pub edges: Vec<SceneEdge>,
}

/// Caps applied after validation. Truncation keeps elements in file order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub d_v: usize,
    pub max_nodes: Option<usize>,
    pub max_triplets: Option<usize>,
}

impl LoadOptions {
    pub fn new(d_v: usize) -> Self {
        LoadOptions {
            d_v,
            max_nodes: None,
            max_triplets: None,
        }
    }
}

pub fn load_scene_graph(path: impl AsRef<Path>, d_v: usize) -> Result<SceneGraph> {
    load_scene_graph_with(path, &LoadOptions::new(d_v))
}

pub fn load_scene_graph_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<SceneGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SceneGraph::from_json_with(&text, opts)
}

impl SceneGraph {
    pub fn from_json(text: &str, d_v: usize) -> Result<Self> {
        SceneGraph::from_json_with(text, &LoadOptions::new(d_v))
    }

    pub fn from_json_with(text: &str, opts: &LoadOptions) -> Result<Self> {
        let g: SceneGraph = serde_json::from_str(text)?;
        g.validate(opts.d_v)?;
        Ok(g.truncated(opts.max_nodes, opts.max_triplets))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn d_v(&self) -> Option<usize> {
        self.nodes.first().map(|n| n.visual.len())
    }

    pub fn validate(&self, d_v: usize) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Validation(format!(
                    "node at index {i} has id {}, expected {i}",
                    n.id
                )));
            }
            if n.label.trim().is_empty() {
                return Err(Error::Validation(format!("empty label at node {i}")));
            }
            if n.visual.len() != d_v {
                return Err(Error::Validation(format!(
                    "visual feature of node {i} has length {}, expected {d_v}",
                    n.visual.len()
                )));
            }
            if n.visual.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite visual feature at node {i}"
                )));
            }
            if let Some(b) = &n.bbox {
                b.validate()
                    .map_err(|e| Error::Validation(format!("node {i}: {e}")))?;
            }
        }
        let mut seen = BTreeSet::new();
        for (i, e) in self.edges.iter().enumerate() {
            if e.id != i {
                return Err(Error::Validation(format!(
                    "edge at index {i} has id {}, expected {i}",
                    e.id
                )));
            }
            for end in [e.src, e.dst] {
                if end >= self.nodes.len() {
                    return Err(Error::Validation(format!(
                        "edge {i} references missing node {end}"
                    )));
                }
            }
            if e.src == e.dst {
                return Err(Error::Validation(format!("self-loop at edge {i}")));
            }
            if !seen.insert((e.src, e.dst, e.predicate.as_str())) {
                return Err(Error::Validation(format!("duplicate triplet at edge {i}")));
            }
        }
        Ok(())
    }

    /// Keeps the first `max_nodes` nodes and, among edges between kept nodes,
    /// the first `max_triplets`. Edge ids are renumbered densely.
    pub fn truncated(mut self, max_nodes: Option<usize>, max_triplets: Option<usize>) -> Self {
        if let Some(n) = max_nodes {
            self.nodes.truncate(n);
        }
        let n = self.nodes.len();
        self.edges.retain(|e| e.src < n && e.dst < n);
        if let Some(m) = max_triplets {
            self.edges.truncate(m);
        }
        for (i, e) in self.edges.iter_mut().enumerate() {
            e.id = i;
        }
        self
    }

    /// Undirected adjacency lists, sorted and duplicate-free.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![BTreeSet::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.src].insert(e.dst);
            adj[e.dst].insert(e.src);
        }
        adj.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Mean of the node visual features, the image-level descriptor used for
    /// consensus neighbours.
    pub fn mean_visual(&self) -> Vec<f64> {
        let d = self.d_v().unwrap_or(0);
        let mut out = vec![0.0; d];
        for n in &self.nodes {
            for (o, v) in out.iter_mut().zip(&n.visual) {
                *o += v;
            }
        }
        let k = self.nodes.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }
}

/// Word vectors for node labels and predicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub unk: Vec<f64>,
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EmbeddingTable::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: EmbeddingTable = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.unk.len() != self.dim {
            return Err(Error::Validation(format!(
                "unk vector has length {}, expected {}",
                self.unk.len(),
                self.dim
            )));
        }
        for (k, v) in &self.entries {
            if v.len() != self.dim {
                return Err(Error::Validation(format!(
                    "embedding for `{k}` has length {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
        }
        Ok(())
    }

    /// Stored vector, or the reserved unknown vector for out-of-vocabulary tokens.
    pub fn lookup(&self, token: &str) -> &[f64] {
        self.entries.get(token).unwrap_or(&self.unk)
    }
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Decoder token space. Specials occupy indices 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from the given words (specials are prepended; the
    /// remaining words are sorted and deduplicated).
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Vocabulary::from_tokens(tokens).expect("specials are distinct")
    }

    /// Restores a vocabulary from its ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS.map(String::from) {
            return Err(Error::Validation(
                "vocabulary must start with <pad>, <bos>, <eos>, <unk>".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate vocabulary token `{t}`"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        Vocabulary::new(captions.into_iter().flat_map(tokenize))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens
            .get(id)
            .map(String::as_str)
            .unwrap_or(SPECIALS[UNK])
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// Lowercases and splits on whitespace, stripping surrounding punctuation.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingAnnotation {
    pub word: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// One image's reference captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub image_id: String,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding: Option<Vec<GroundingAnnotation>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CorpusRepr {
    Many(Vec<CaptionEntry>),
    One(CaptionEntry),
}

/// Loads a caption corpus: either a single entry or an array of entries.
pub fn load_caption_corpus(path: impl AsRef<Path>) -> Result<Vec<CaptionEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_caption_corpus(&text)
}

pub fn parse_caption_corpus(text: &str) -> Result<Vec<CaptionEntry>> {
    Ok(match serde_json::from_str::<CorpusRepr>(text)? {
        CorpusRepr::Many(v) => v,
        CorpusRepr::One(e) => vec![e],
    })
}

/// Every `*.json` graph in `dir`, ordered by file name.
pub fn load_graph_dir(dir: impl AsRef<Path>, opts: &LoadOptions) -> Result<Vec<SceneGraph>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| load_scene_graph_with(p, opts))
        .collect()
}
