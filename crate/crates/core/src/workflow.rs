//! Corpus-level glue: builds training sets from graphs and captions and
//! runs the two training stages.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::decoder::{train_decoder, CaptionPair, DecoderTrainOptions};
use crate::decompose::{sample_subgraphs, ScoredSubGraph, SubGraph};
use crate::encoder::GraphInputs;
use crate::error::{Error, Result};
use crate::graph::{tokenize, CaptionEntry, SceneGraph, Vocabulary};
use crate::matcher::{reference_subgraph, Lexicon, SimilarityTable};
use crate::model::Model;
use crate::pipeline::{best_matching_subgraph, match_regions};
use crate::sgpn::{train_sgpn, Label, LabeledSubGraph, SgpnImage, SgpnTrainOptions};
use crate::tensor::{grad_check, GradCheckReport};

/// Caption resources shared by the training stages.
pub struct CaptionData<'a> {
    pub graphs: &'a [SceneGraph],
    pub captions: &'a [CaptionEntry],
    pub lexicon: &'a Lexicon,
    pub similarity: &'a SimilarityTable,
}

impl CaptionData<'_> {
    /// `(graph index, captions)` for every graph that has an entry.
    fn paired(&self) -> Vec<(usize, &CaptionEntry)> {
        let by_id: BTreeMap<&str, &CaptionEntry> = self
            .captions
            .iter()
            .map(|c| (c.image_id.as_str(), c))
            .collect();
        self.graphs
            .iter()
            .enumerate()
            .filter_map(|(i, g)| by_id.get(g.image_id.as_str()).map(|c| (i, *c)))
            .collect()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_captions(
            self.captions
                .iter()
                .flat_map(|c| c.captions.iter().map(String::as_str)),
        )
    }
}

/// Sampled and reference sub-graphs per image. Captions with no matching
/// node contribute no reference.
pub fn sgpn_corpus(data: &CaptionData, model: &Model, cfg: &RunConfig) -> Result<Vec<SgpnImage>> {
    data.paired()
        .into_iter()
        .map(|(i, entry)| {
            let g = &data.graphs[i];
            model.check_graph(g)?;
            let refs = entry
                .captions
                .iter()
                .map(|c| {
                    reference_subgraph(
                        &tokenize(c),
                        g,
                        data.lexicon,
                        data.similarity,
                        cfg.thresholds.tau,
                    )
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            Ok(SgpnImage {
                inputs: GraphInputs::new(g, &model.embeddings)?,
                subs: sample_subgraphs(g, cfg.sampling.num, cfg.seed, cfg.sampling.max_seeds)?,
                refs,
            })
        })
        .collect()
}

/// `(sub-graph, caption)` pairs. By default the sub-graph is the caption's
/// reference; with `supervised_control` it is the sampled sub-graph that best
/// covers the nodes under the caption's grounding boxes.
pub fn decoder_pairs(
    data: &CaptionData,
    vocab: &Vocabulary,
    cfg: &RunConfig,
) -> Result<(Vec<usize>, Vec<CaptionPair>)> {
    let mut images = Vec::new();
    let mut pairs = Vec::new();
    for (i, entry) in data.paired() {
        let g = &data.graphs[i];
        let slot = images.len();
        let samples: Vec<ScoredSubGraph> = if cfg.train.supervised_control {
            sample_subgraphs(g, cfg.sampling.num, cfg.seed, cfg.sampling.max_seeds)?
                .into_iter()
                .map(|sub| ScoredSubGraph { sub, score: 0.0 })
                .collect()
        } else {
            vec![]
        };
        let mut any = false;
        for c in &entry.captions {
            let words = tokenize(c);
            let sub = if cfg.train.supervised_control {
                let grounding = entry.grounding.as_deref().unwrap_or(&[]);
                let boxes: Vec<_> = grounding
                    .iter()
                    .filter(|a| words.contains(&a.word))
                    .map(|a| a.bbox)
                    .collect();
                if boxes.is_empty() {
                    None
                } else {
                    let nodes = match_regions(g, &boxes)?;
                    best_matching_subgraph(&samples, &nodes).map(|k| samples[k].sub.clone())
                }
            } else {
                reference_subgraph(&words, g, data.lexicon, data.similarity, cfg.thresholds.tau)?
            };
            if let Some(sub) = sub {
                pairs.push(CaptionPair {
                    image: slot,
                    sub,
                    tokens: vocab.encode(&words),
                });
                any = true;
            }
        }
        if any {
            images.push(i);
        }
    }
    Ok((images, pairs))
}

/// Trains the proposal network (jointly with the encoder).
pub fn run_sgpn_training(
    data: &CaptionData,
    model: &mut Model,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let corpus = sgpn_corpus(data, model, cfg)?;
    if corpus.is_empty() {
        return Err(Error::Validation("no graph has captions".into()));
    }
    train_sgpn(
        &corpus,
        &mut model.store,
        &SgpnTrainOptions::from_config(cfg),
        seed,
    )
}

/// Trains the decoder; the model must already carry a vocabulary.
pub fn run_decoder_training(
    data: &CaptionData,
    model: &mut Model,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let vocab = model.vocab()?.clone();
    let (images, pairs) = decoder_pairs(data, &vocab, cfg)?;
    if pairs.is_empty() {
        return Err(Error::Validation(
            "no caption matched its scene graph".into(),
        ));
    }
    let inputs = images
        .iter()
        .map(|&i| {
            model.check_graph(&data.graphs[i])?;
            GraphInputs::new(&data.graphs[i], &model.embeddings)
        })
        .collect::<Result<Vec<_>>>()?;
    train_decoder(
        &inputs,
        &pairs,
        &mut model.store,
        &DecoderTrainOptions::from_config(cfg),
        seed,
    )
}

/// Reports for the complete proposal loss and the complete teacher-forced
/// decoder loss (encoder included) on a small 4-node graph.
#[derive(Debug, Clone)]
pub struct FullGradCheck {
    pub sgpn: GradCheckReport,
    pub decoder: GradCheckReport,
}

impl FullGradCheck {
    pub fn passed(&self) -> bool {
        self.sgpn.passed() && self.decoder.passed()
    }
}

/// A 4-node graph (two related pairs) with labels from a tiny vocabulary.
pub fn gradcheck_graph(d_v: usize, seed: u64) -> SceneGraph {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let labels = ["man", "horse", "dog", "ball"];
    SceneGraph {
        image_id: "gradcheck".into(),
        nodes: labels
            .iter()
            .enumerate()
            .map(|(id, l)| crate::graph::SceneNode {
                id,
                label: l.to_string(),
                visual: (0..d_v).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bbox: None,
            })
            .collect(),
        edges: [(0, 1, "riding"), (2, 3, "near"), (1, 2, "behind")]
            .iter()
            .enumerate()
            .map(|(id, &(src, dst, p))| crate::graph::SceneEdge {
                id,
                src,
                dst,
                predicate: p.into(),
            })
            .collect(),
    }
}

pub fn full_grad_check(cfg: &RunConfig, seed: u64, h: f64, tol: f64) -> Result<FullGradCheck> {
    use rand::{Rng, SeedableRng};
    let d = cfg.dims;
    let g = gradcheck_graph(d.d_v, seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut entries = BTreeMap::new();
    for tok in ["man", "horse", "dog", "ball", "riding", "near", "behind"] {
        entries.insert(
            tok.to_string(),
            (0..d.d_e).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
    }
    let emb = crate::graph::EmbeddingTable {
        dim: d.d_e,
        unk: vec![0.0; d.d_e],
        entries,
    };
    let vocab = Vocabulary::new(["a", "man", "riding", "horse", "dog", "near", "ball"]);
    let model = Model::init(cfg.clone(), emb, Some(vocab.clone()), seed)?;
    let inputs = vec![GraphInputs::new(&g, &model.embeddings)?];

    let sub = |nodes: Vec<usize>, edges: Vec<usize>| SubGraph::new(&g, nodes, edges);
    let man_horse = sub(vec![0, 1], vec![0])?;
    let dog_ball = sub(vec![2, 3], vec![1])?;
    let labeled: Vec<(usize, LabeledSubGraph)> = [
        (man_horse.clone(), Label::Positive),
        (dog_ball.clone(), Label::Positive),
        (sub(vec![1, 2], vec![2])?, Label::Negative),
        (sub(vec![0, 1, 2, 3], vec![0, 1, 2])?, Label::Negative),
    ]
    .into_iter()
    .map(|(s, label)| {
        (
            0,
            LabeledSubGraph {
                sub: s,
                label,
                best_iou: 0.0,
                matched_caption: None,
                injected: false,
            },
        )
    })
    .collect();
    let sgpn_images = vec![SgpnImage {
        inputs: inputs[0].clone(),
        subs: vec![],
        refs: vec![],
    }];
    let items: Vec<&(usize, LabeledSubGraph)> = labeled.iter().collect();
    let depth = d.gcn_depth;
    let sgpn = grad_check(
        |tape, p| crate::sgpn::batch_loss_on(tape, p, &sgpn_images, &items, depth),
        &model.store,
        h,
        tol,
    )?;

    let pairs = [
        CaptionPair {
            image: 0,
            sub: man_horse,
            tokens: vocab.encode(&tokenize("a man riding a horse")),
        },
        CaptionPair {
            image: 0,
            sub: dog_ball,
            tokens: vocab.encode(&tokenize("a dog near a ball")),
        },
    ];
    let refs: Vec<&CaptionPair> = pairs.iter().collect();
    let decoder = grad_check(
        |tape, p| crate::decoder::batch_loss_on(tape, p, &inputs, &refs, None, depth),
        &model.store,
        h,
        tol,
    )?;
    Ok(FullGradCheck { sgpn, decoder })
}
