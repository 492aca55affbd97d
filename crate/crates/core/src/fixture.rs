//! Synthetic corpus generator. Each image plants two isolated
//! subject-predicate-object pairs among unrelated background nodes and gets
//! one template caption per pair, so every caption has an exact reference
//! sub-graph.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decompose::SubGraph;
use crate::error::{Error, Result};
use crate::graph::{
    load_caption_corpus, load_graph_dir, BoundingBox, CaptionEntry, EmbeddingTable,
    GroundingAnnotation, LoadOptions, SceneEdge, SceneGraph, SceneNode,
};
use crate::matcher::{reference_subgraph, Lexicon, PosClass, SimilarityTable};
use crate::model::write_json;

const SUBJECTS: [&str; 6] = ["man", "woman", "boy", "girl", "dog", "cat"];
const OBJECTS: [&str; 8] = [
    "horse",
    "bike",
    "ball",
    "kite",
    "table",
    "car",
    "surfboard",
    "umbrella",
];
const PREDICATES: [&str; 4] = ["riding", "holding", "near", "under"];
const BACKGROUND: [&str; 6] = ["sky", "wall", "tree", "grass", "road", "building"];
const BACKGROUND_PREDICATES: [&str; 2] = ["behind", "above"];
const SYNONYMS: [(&str, &str, f64); 5] = [
    ("man", "person", 0.92),
    ("boy", "kid", 0.95),
    ("dog", "puppy", 0.93),
    ("bike", "bicycle", 0.97),
    ("car", "vehicle", 0.8),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureSpec {
    pub images: usize,
    /// Background nodes per image, on top of the four planted ones.
    pub background: usize,
    pub d_v: usize,
    pub d_e: usize,
    /// Uniform noise amplitude added to each label's visual prototype.
    pub noise: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            images: 20,
            background: 3,
            d_v: 16,
            d_e: 8,
            noise: 0.05,
            seed: 1,
        }
    }
}

impl FixtureSpec {
    fn validate(&self) -> Result<()> {
        if self.images == 0 || self.images > 50 {
            return Err(Error::InvalidArgument(format!(
                "fixture corpora hold 1..=50 images, got {}",
                self.images
            )));
        }
        if self.background > BACKGROUND.len() || self.background + 4 > 15 {
            return Err(Error::InvalidArgument(format!(
                "at most {} background nodes per image",
                BACKGROUND.len()
            )));
        }
        if self.d_v == 0 || self.d_e == 0 {
            return Err(Error::InvalidArgument(
                "feature sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureCorpus {
    pub graphs: Vec<SceneGraph>,
    pub captions: Vec<CaptionEntry>,
    pub lexicon: Lexicon,
    pub similarity: SimilarityTable,
    pub embeddings: EmbeddingTable,
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn grid_box(id: usize) -> BoundingBox {
    let (col, row) = ((id % 4) as f64, (id / 4) as f64);
    BoundingBox::new(col * 100.0 + 10.0, row * 100.0 + 10.0, 80.0, 80.0).expect("positive size")
}

#[derive(Clone, Copy)]
enum Role {
    Subject(usize),
    Object(usize),
    Background(usize),
}

pub fn generate_fixture_corpus(spec: &FixtureSpec) -> Result<FixtureCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<&str> = SUBJECTS
        .iter()
        .chain(&OBJECTS)
        .chain(&BACKGROUND)
        .copied()
        .collect();
    let prototypes: BTreeMap<&str, Vec<f64>> = labels
        .iter()
        .map(|&l| (l, uniform_vec(&mut rng, spec.d_v, 1.0)))
        .collect();
    let mut entries = BTreeMap::new();
    for &tok in labels
        .iter()
        .chain(&PREDICATES)
        .chain(&BACKGROUND_PREDICATES)
    {
        entries.insert(tok.to_string(), uniform_vec(&mut rng, spec.d_e, 1.0));
    }
    let embeddings = EmbeddingTable {
        dim: spec.d_e,
        unk: vec![0.0; spec.d_e],
        entries,
    };

    let mut graphs = Vec::with_capacity(spec.images);
    let mut captions = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let subjects: Vec<&str> = SUBJECTS.choose_multiple(&mut rng, 2).copied().collect();
        let objects: Vec<&str> = OBJECTS.choose_multiple(&mut rng, 2).copied().collect();
        let preds: Vec<&str> = (0..2)
            .map(|_| *PREDICATES.choose(&mut rng).unwrap())
            .collect();
        let background: Vec<&str> = BACKGROUND
            .choose_multiple(&mut rng, spec.background)
            .copied()
            .collect();

        let mut roles: Vec<Role> = vec![
            Role::Subject(0),
            Role::Object(0),
            Role::Subject(1),
            Role::Object(1),
        ];
        roles.extend((0..spec.background).map(Role::Background));
        roles.shuffle(&mut rng);
        let id_of =
            |want: &dyn Fn(&Role) -> bool| roles.iter().position(want).expect("role present");

        let nodes: Vec<SceneNode> = roles
            .iter()
            .enumerate()
            .map(|(id, role)| {
                let label = match *role {
                    Role::Subject(k) => subjects[k],
                    Role::Object(k) => objects[k],
                    Role::Background(k) => background[k],
                };
                let visual = prototypes[label]
                    .iter()
                    .map(|p| p + rng.random_range(-spec.noise..=spec.noise))
                    .collect();
                SceneNode {
                    id,
                    label: label.to_string(),
                    visual,
                    bbox: Some(grid_box(id)),
                }
            })
            .collect();

        let mut edges = Vec::new();
        let mut caps = Vec::new();
        let mut grounding = Vec::new();
        for k in 0..2 {
            let s = id_of(&|r| matches!(r, Role::Subject(j) if *j == k));
            let o = id_of(&|r| matches!(r, Role::Object(j) if *j == k));
            edges.push(SceneEdge {
                id: edges.len(),
                src: s,
                dst: o,
                predicate: preds[k].to_string(),
            });
            caps.push(format!("a {} {} a {}", subjects[k], preds[k], objects[k]));
            for (word, node) in [(subjects[k], s), (objects[k], o)] {
                grounding.push(GroundingAnnotation {
                    word: word.to_string(),
                    bbox: grid_box(node),
                });
            }
        }
        for k in 1..spec.background {
            if rng.random_bool(0.5) {
                let a = id_of(&|r| matches!(r, Role::Background(j) if *j == k - 1));
                let b = id_of(&|r| matches!(r, Role::Background(j) if *j == k));
                edges.push(SceneEdge {
                    id: edges.len(),
                    src: a,
                    dst: b,
                    predicate: BACKGROUND_PREDICATES.choose(&mut rng).unwrap().to_string(),
                });
            }
        }
        let image_id = format!("img{i:03}");
        graphs.push(SceneGraph {
            image_id: image_id.clone(),
            nodes,
            edges,
        });
        captions.push(CaptionEntry {
            image_id,
            captions: caps,
            grounding: Some(grounding),
        });
    }

    let mut lexicon = Lexicon::new(labels.iter().copied().chain(SYNONYMS.iter().map(|s| s.1)));
    lexicon.insert("a", PosClass::Other);
    for p in PREDICATES.iter().chain(&BACKGROUND_PREDICATES) {
        lexicon.insert(*p, PosClass::Other);
    }
    let similarity = SimilarityTable::from_triples(
        SYNONYMS
            .iter()
            .map(|&(a, b, s)| (a.to_string(), b.to_string(), s))
            .collect(),
    )?;
    Ok(FixtureCorpus {
        graphs,
        captions,
        lexicon,
        similarity,
        embeddings,
    })
}

#[derive(Serialize)]
struct Triple<'a>(&'a str, &'a str, f64);

impl FixtureCorpus {
    /// Writes `graphs/<image_id>.json`, `captions.json`, `lexicon.json`,
    /// `sim.json` and `embeddings.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let gdir = dir.join("graphs");
        std::fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
        for g in &self.graphs {
            write_json(gdir.join(format!("{}.json", g.image_id)), g)?;
        }
        write_json(dir.join("captions.json"), &self.captions)?;
        write_json(dir.join("lexicon.json"), &self.lexicon)?;
        let triples = self.similarity.to_triples();
        let triples: Vec<Triple> = triples.iter().map(|(a, b, s)| Triple(a, b, *s)).collect();
        write_json(dir.join("sim.json"), &triples)?;
        write_json(dir.join("embeddings.json"), &self.embeddings)
    }

    pub fn load(dir: impl AsRef<Path>, d_v: usize) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(FixtureCorpus {
            graphs: load_graph_dir(dir.join("graphs"), &LoadOptions::new(d_v))?,
            captions: load_caption_corpus(dir.join("captions.json"))?,
            lexicon: Lexicon::load(dir.join("lexicon.json"))?,
            similarity: SimilarityTable::load(dir.join("sim.json"))?,
            embeddings: EmbeddingTable::load(dir.join("embeddings.json"))?,
        })
    }

    /// Reference sub-graph of every caption of image `i`, in caption order.
    pub fn references(&self, i: usize, tau: f64) -> Result<Vec<Option<SubGraph>>> {
        let g = &self.graphs[i];
        self.captions[i]
            .captions
            .iter()
            .map(|c| {
                reference_subgraph(
                    &crate::graph::tokenize(c),
                    g,
                    &self.lexicon,
                    &self.similarity,
                    tau,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let spec = FixtureSpec {
            images: 5,
            ..Default::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_fixture_corpus(&spec)
            .unwrap()
            .write(a.path())
            .unwrap();
        generate_fixture_corpus(&spec)
            .unwrap()
            .write(b.path())
            .unwrap();
        for rel in [
            "captions.json",
            "lexicon.json",
            "sim.json",
            "embeddings.json",
            "graphs/img003.json",
        ] {
            let x = std::fs::read(a.path().join(rel)).unwrap();
            assert_eq!(x, std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
        let back = FixtureCorpus::load(a.path(), spec.d_v).unwrap();
        assert_eq!(back, generate_fixture_corpus(&spec).unwrap());
    }

    #[test]
    fn every_caption_has_its_planted_reference() {
        let c = generate_fixture_corpus(&FixtureSpec::default()).unwrap();
        for (i, g) in c.graphs.iter().enumerate() {
            g.validate(16).unwrap();
            for (k, r) in c.references(i, 0.9).unwrap().into_iter().enumerate() {
                let r = r.expect("caption matches");
                let e = &g.edges[k];
                assert_eq!(r.nodes(), {
                    let mut v = vec![e.src, e.dst];
                    v.sort();
                    v
                });
                assert_eq!(r.edges(), &[k]);
            }
        }
    }

    #[test]
    fn rejects_oversized_specs() {
        let spec = FixtureSpec {
            images: 51,
            ..Default::default()
        };
        assert!(generate_fixture_corpus(&spec).is_err());
    }
}
