//! Sentence-to-graph matching: noun extraction with a lexicon, noun/label
//! similarity matching, and reference sub-graph construction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decompose::SubGraph;
use crate::error::{Error, Result};
use crate::graph::SceneGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosClass {
    Noun,
    Other,
}

/// Token -> part-of-speech class. Unlisted tokens are `Other`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon {
    classes: BTreeMap<String, PosClass>,
}

impl Lexicon {
    pub fn new<I, S>(nouns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Lexicon {
            classes: nouns
                .into_iter()
                .map(|n| (n.into(), PosClass::Noun))
                .collect(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, class: PosClass) {
        self.classes.insert(token.into(), class);
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn class(&self, token: &str) -> PosClass {
        self.classes.get(token).copied().unwrap_or(PosClass::Other)
    }

    pub fn is_noun(&self, token: &str) -> bool {
        self.class(token) == PosClass::Noun
    }
}

/// Symmetric token similarity in [0, 1]; identical tokens score 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityTable {
    scores: BTreeMap<(String, String), f64>,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl SimilarityTable {
    pub fn new() -> Self {
        SimilarityTable::default()
    }

    pub fn insert(&mut self, a: &str, b: &str, score: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Validation(format!(
                "similarity ({a}, {b}) = {score} is outside [0, 1]"
            )));
        }
        self.scores.insert(ordered(a, b), score);
        Ok(())
    }

    pub fn score(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 1.0;
        }
        self.scores.get(&ordered(a, b)).copied().unwrap_or(0.0)
    }

    pub fn from_triples(triples: Vec<(String, String, f64)>) -> Result<Self> {
        let mut t = SimilarityTable::new();
        for (a, b, s) in triples {
            t.insert(&a, &b, s)?;
        }
        Ok(t)
    }

    pub fn to_triples(&self) -> Vec<(String, String, f64)> {
        self.scores
            .iter()
            .map(|((a, b), s)| (a.clone(), b.clone(), *s))
            .collect()
    }

    /// Reads `[[tokenA, tokenB, score], ...]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SimilarityTable::from_triples(serde_json::from_str(&text)?)
    }
}

/// Nouns in caption order, duplicates kept.
pub fn extract_nouns(caption: &[String], lex: &Lexicon) -> Vec<String> {
    caption.iter().filter(|t| lex.is_noun(t)).cloned().collect()
}

/// Every node whose label is at least `tau`-similar to some noun.
pub fn match_nouns_to_nodes(
    nouns: &[String],
    g: &SceneGraph,
    sim: &SimilarityTable,
    tau: f64,
) -> BTreeSet<usize> {
    let mut matched = BTreeSet::new();
    for noun in nouns {
        for n in &g.nodes {
            if sim.score(noun, &n.label) >= tau {
                matched.insert(n.id);
            }
        }
    }
    matched
}

/// Matched nodes plus their immediate neighbours, with every induced edge.
/// `None` when no noun matches a node.
pub fn reference_subgraph(
    caption: &[String],
    g: &SceneGraph,
    lex: &Lexicon,
    sim: &SimilarityTable,
    tau: f64,
) -> Result<Option<SubGraph>> {
    let nouns = extract_nouns(caption, lex);
    let matched = match_nouns_to_nodes(&nouns, g, sim, tau);
    if matched.is_empty() {
        return Ok(None);
    }
    let adj = g.neighbor_lists();
    let mut nodes = matched.clone();
    for &v in &matched {
        nodes.extend(adj[v].iter().copied());
    }
    let edges = g
        .edges
        .iter()
        .filter(|e| nodes.contains(&e.src) && nodes.contains(&e.dst))
        .map(|e| e.id)
        .collect();
    SubGraph::new(g, nodes.into_iter().collect(), edges).map(Some)
}
