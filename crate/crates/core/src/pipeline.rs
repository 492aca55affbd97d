//! End-to-end inference: sample, score, suppress, decode and rank; plus
//! region-controlled captioning, consensus re-ranking and oracle selection.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::{beam_decode, greedy_decode, topk_sample_decode, GroundedCaption};
use crate::decompose::{nms, node_set_iou, sample_subgraphs, ScoredSubGraph, SubGraph};
use crate::encoder::EncodedGraph;
use crate::error::{Error, Result};
use crate::graph::{tokenize, BoundingBox, CaptionEntry, SceneGraph, Vocabulary};
use crate::metrics::bleu_or_zero;
use crate::model::Model;
use crate::sgpn::score_subgraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    Sgpn,
    Consensus,
    SgpnConsensus,
}

impl FromStr for RankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgpn" => Ok(RankMode::Sgpn),
            "consensus" => Ok(RankMode::Consensus),
            "sgpn+consensus" | "sgpn_consensus" => Ok(RankMode::SgpnConsensus),
            other => Err(Error::InvalidArgument(format!(
                "unknown rank mode `{other}` (expected sgpn, consensus or sgpn+consensus)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
    TopK {
        k: usize,
        temperature: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub nms_threshold: f64,
    pub rank_mode: RankMode,
    pub top_n: usize,
    pub decode_mode: DecodeMode,
    /// Nearest neighbours pooled for consensus scores.
    pub consensus_k: usize,
    /// How many top sGPN captions consensus may reorder in `SgpnConsensus`.
    pub consensus_pool: usize,
    pub num_samples: usize,
    pub max_seeds: usize,
    pub seed: u64,
    pub max_len: usize,
}

impl PipelineConfig {
    pub fn from_run_config(cfg: &RunConfig) -> Self {
        PipelineConfig {
            nms_threshold: cfg.thresholds.nms,
            rank_mode: RankMode::Sgpn,
            top_n: 5,
            decode_mode: DecodeMode::Beam(cfg.decode.beam),
            consensus_k: 20,
            consensus_pool: 4,
            num_samples: cfg.sampling.num,
            max_seeds: cfg.sampling.max_seeds,
            seed: cfg.seed,
            max_len: cfg.decode.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(Error::Validation(format!(
                "NMS threshold must be in (0, 1], got {}",
                self.nms_threshold
            )));
        }
        if self.top_n == 0 {
            return Err(Error::Validation("top_n must be at least 1".into()));
        }
        Ok(())
    }
}

/// One image's retrieval entry for consensus re-ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusEntry {
    pub image_id: String,
    pub feature: Vec<f64>,
    pub captions: Vec<Vec<String>>,
}

/// Pairs graphs with their captions by image id; the feature is the mean
/// node visual vector.
pub fn build_consensus_db(graphs: &[SceneGraph], corpus: &[CaptionEntry]) -> Vec<ConsensusEntry> {
    graphs
        .iter()
        .filter_map(|g| {
            let entry = corpus.iter().find(|c| c.image_id == g.image_id)?;
            Some(ConsensusEntry {
                image_id: g.image_id.clone(),
                feature: g.mean_visual(),
                captions: entry.captions.iter().map(|c| tokenize(c)).collect(),
            })
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Indices of the `k` most cosine-similar entries (ties to the lower index).
pub fn nearest_neighbors(query: &[f64], db: &[ConsensusEntry], k: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = db
        .iter()
        .enumerate()
        .map(|(i, e)| (i, cosine(query, &e.feature)))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().take(k).map(|x| x.0).collect()
}

/// Scores each candidate by its mean BLEU-2 against every caption of the
/// `k` nearest images and returns `(candidate index, score)` sorted by score
/// (stable).
pub fn consensus_rerank(
    cands: &[Vec<String>],
    query: &[f64],
    db: &[ConsensusEntry],
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if db.is_empty() {
        return Err(Error::EmptyReferenceDb);
    }
    let pooled: Vec<&Vec<String>> = nearest_neighbors(query, db, k.max(1))
        .into_iter()
        .flat_map(|i| &db[i].captions)
        .collect();
    let mut scored = Vec::with_capacity(cands.len());
    for (i, c) in cands.iter().enumerate() {
        let mut total = 0.0;
        for r in &pooled {
            total += bleu_or_zero(c, std::slice::from_ref(*r), 2)?;
        }
        let score = if pooled.is_empty() {
            0.0
        } else {
            total / pooled.len() as f64
        };
        scored.push((i, score));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCaption {
    pub caption: GroundedCaption,
    pub sub: ScoredSubGraph,
    pub rank_score: f64,
    pub consensus: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCaptions {
    pub image_id: String,
    pub items: Vec<RankedCaption>,
}

/// Samples and scores every sub-graph of `g`, in sampling order.
pub fn score_all(
    g: &SceneGraph,
    model: &Model,
    enc: &EncodedGraph,
    num_samples: usize,
    max_seeds: usize,
    seed: u64,
) -> Result<Vec<ScoredSubGraph>> {
    let p = model.sgpn()?;
    sample_subgraphs(g, num_samples, seed, max_seeds)?
        .into_iter()
        .map(|sub| {
            let score = score_subgraph(&sub, enc, &p)?;
            Ok(ScoredSubGraph { sub, score })
        })
        .collect()
}

/// Decodes one sub-graph. Sampling decodes use `seed + index` so parallel
/// runs stay reproducible.
pub fn decode_subgraph(
    model: &Model,
    enc: &EncodedGraph,
    sub: &SubGraph,
    mode: DecodeMode,
    index: usize,
    max_len: usize,
) -> Result<GroundedCaption> {
    match mode {
        DecodeMode::Greedy => greedy_decode(sub, enc, &model.store, max_len),
        DecodeMode::Beam(b) => Ok(beam_decode(sub, enc, &model.store, b, max_len)?.remove(0)),
        DecodeMode::TopK {
            k,
            temperature,
            seed,
        } => topk_sample_decode(
            sub,
            enc,
            &model.store,
            k,
            temperature,
            seed.wrapping_add(index as u64),
            max_len,
        ),
    }
}

pub fn caption_image(
    g: &SceneGraph,
    model: &Model,
    cfg: &PipelineConfig,
    refs_db: Option<&[ConsensusEntry]>,
) -> Result<RankedCaptions> {
    cfg.validate()?;
    let vocab = model.vocab()?;
    let (_, enc) = model.encode(g)?;
    let scored = score_all(g, model, &enc, cfg.num_samples, cfg.max_seeds, cfg.seed)?;
    let mut survivors = nms(&scored, cfg.nms_threshold);
    survivors.truncate(cfg.top_n);
    let captions = survivors
        .par_iter()
        .enumerate()
        .map(|(i, s)| decode_subgraph(model, &enc, &s.sub, cfg.decode_mode, i, cfg.max_len))
        .collect::<Result<Vec<_>>>()?;
    let mut items: Vec<RankedCaption> = survivors
        .into_iter()
        .zip(captions)
        .map(|(sub, caption)| RankedCaption {
            rank_score: sub.score,
            caption,
            sub,
            consensus: None,
        })
        .collect();
    if cfg.rank_mode != RankMode::Sgpn {
        let db = refs_db
            .filter(|d| !d.is_empty())
            .ok_or(Error::EmptyReferenceDb)?;
        let pool = match cfg.rank_mode {
            RankMode::Consensus => items.len(),
            _ => cfg.consensus_pool.min(items.len()),
        };
        let words: Vec<Vec<String>> = items[..pool]
            .iter()
            .map(|it| vocab.decode(&it.caption.tokens))
            .collect();
        let order = consensus_rerank(&words, &g.mean_visual(), db, cfg.consensus_k)?;
        let sgpn_scores: Vec<f64> = items[..pool].iter().map(|it| it.rank_score).collect();
        let head: Vec<RankedCaption> = order
            .iter()
            .enumerate()
            .map(|(slot, &(i, c))| {
                let mut it = items[i].clone();
                it.consensus = Some(c);
                it.rank_score = match cfg.rank_mode {
                    RankMode::Consensus => c,
                    _ => sgpn_scores[slot],
                };
                it
            })
            .collect();
        items.splice(..pool, head);
    }
    Ok(RankedCaptions {
        image_id: g.image_id.clone(),
        items,
    })
}

/// Result of region-controlled captioning.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledCaption {
    pub caption: GroundedCaption,
    pub sub: ScoredSubGraph,
    /// Node matched to each region, in region order.
    pub matched: Vec<usize>,
}

/// Node with the highest box IoU for each region; IoU must reach 0.5.
pub fn match_regions(g: &SceneGraph, regions: &[BoundingBox]) -> Result<Vec<usize>> {
    regions
        .iter()
        .enumerate()
        .map(|(r, region)| {
            let mut best: Option<(usize, f64)> = None;
            for n in &g.nodes {
                if let Some(b) = &n.bbox {
                    let iou = b.iou(region);
                    if best.is_none_or(|(_, s)| iou > s) {
                        best = Some((n.id, iou));
                    }
                }
            }
            match best {
                Some((id, iou)) if iou >= 0.5 => Ok(id),
                _ => Err(Error::NoRegionMatch(r)),
            }
        })
        .collect()
}

/// The candidate with the highest node IoU against `nodes` (ties: higher
/// score, then earlier).
pub fn best_matching_subgraph(cands: &[ScoredSubGraph], nodes: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cands.iter().enumerate() {
        let iou = node_set_iou(&c.sub, nodes);
        let better = match best {
            None => true,
            Some((j, b)) => iou > b || (iou == b && c.score > cands[j].score),
        };
        if better {
            best = Some((i, iou));
        }
    }
    best.map(|b| b.0)
}

pub fn control_caption(
    g: &SceneGraph,
    model: &Model,
    regions: &[BoundingBox],
    cfg: &PipelineConfig,
) -> Result<ControlledCaption> {
    if regions.is_empty() {
        return Err(Error::InvalidArgument("no control regions given".into()));
    }
    model.vocab()?;
    let matched = match_regions(g, regions)?;
    let (_, enc) = model.encode(g)?;
    let scored = score_all(g, model, &enc, cfg.num_samples, cfg.max_seeds, cfg.seed)?;
    let best = best_matching_subgraph(&scored, &matched).ok_or(Error::EmptyGraph)?;
    let sub = scored[best].clone();
    let caption = decode_subgraph(model, &enc, &sub.sub, cfg.decode_mode, 0, cfg.max_len)?;
    Ok(ControlledCaption {
        caption,
        sub,
        matched,
    })
}

/// Index of the candidate with the best metric value against `refs`
/// (ties: first). Metrics: `bleu1`..`bleu4`.
pub fn oracle_select(cands: &[Vec<String>], refs: &[Vec<String>], metric: &str) -> Result<usize> {
    let n = match metric {
        "bleu1" => 1,
        "bleu2" => 2,
        "bleu3" => 3,
        "bleu4" | "bleu" => 4,
        other => return Err(Error::UnknownMetric(other.to_string())),
    };
    if cands.is_empty() {
        return Err(Error::InvalidArgument(
            "no candidates to select from".into(),
        ));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in cands.iter().enumerate() {
        let s = bleu_or_zero(c, refs, n)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub t: usize,
    pub node: usize,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgraphNodes {
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedCaption {
    pub tokens: Vec<String>,
    pub score: f64,
    pub subgraph: SubgraphNodes,
    pub alignments: Vec<AlignmentRecord>,
}

/// `{"image_id": ..., "captions": [...]}` in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub captions: Vec<PredictedCaption>,
}

pub fn predicted_caption(
    caption: &GroundedCaption,
    sub: &SubGraph,
    score: f64,
    vocab: &Vocabulary,
) -> PredictedCaption {
    PredictedCaption {
        tokens: vocab.decode(&caption.tokens),
        score,
        subgraph: SubgraphNodes {
            nodes: sub.nodes().to_vec(),
        },
        alignments: caption
            .alignments
            .iter()
            .enumerate()
            .filter_map(|(t, a)| {
                a.as_ref().map(|a| AlignmentRecord {
                    t,
                    node: a.node,
                    alpha: a.alpha.clone(),
                })
            })
            .collect(),
    }
}

impl RankedCaptions {
    pub fn to_prediction(&self, vocab: &Vocabulary) -> Prediction {
        Prediction {
            image_id: self.image_id.clone(),
            captions: self
                .items
                .iter()
                .map(|it| predicted_caption(&it.caption, &it.sub.sub, it.rank_score, vocab))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn entry(feature: Vec<f64>, caps: &[&str]) -> ConsensusEntry {
        ConsensusEntry {
            image_id: String::new(),
            feature,
            captions: caps.iter().map(|c| t(c)).collect(),
        }
    }

    #[test]
    fn consensus_prefers_neighbor_caption() {
        let db = vec![
            entry(vec![1.0, 0.0], &["a dog on grass"]),
            entry(vec![0.0, 1.0], &["a man riding a horse"]),
        ];
        let cands = vec![t("a man riding a horse"), t("a dog on grass")];
        let order = consensus_rerank(&cands, &[1.0, 0.1], &db, 1).unwrap();
        assert_eq!(order[0], (1, 1.0));
    }

    #[test]
    fn consensus_is_stable_for_identical_candidates() {
        let db = vec![entry(vec![1.0], &["a b c"])];
        let cands = vec![t("a b"); 3];
        let order: Vec<usize> = consensus_rerank(&cands, &[1.0], &db, 1)
            .unwrap()
            .iter()
            .map(|x| x.0)
            .collect();
        assert_eq!(order, vec![0, 1, 2]);
        assert!(matches!(
            consensus_rerank(&cands, &[1.0], &[], 1),
            Err(Error::EmptyReferenceDb)
        ));
    }

    #[test]
    fn oracle_examples() {
        let refs = vec![t("a man riding a horse")];
        assert_eq!(oracle_select(&[t("x y")], &refs, "bleu4").unwrap(), 0);
        assert_eq!(
            oracle_select(&[t("zz qq rr"), t("a man riding a horse")], &refs, "bleu4").unwrap(),
            1
        );
        assert!(matches!(
            oracle_select(&[t("a")], &refs, "cider"),
            Err(Error::UnknownMetric(_))
        ));
    }

    #[test]
    fn rank_mode_names() {
        assert_eq!(
            "sgpn+consensus".parse::<RankMode>().unwrap(),
            RankMode::SgpnConsensus
        );
        assert!("best".parse::<RankMode>().is_err());
    }
}
