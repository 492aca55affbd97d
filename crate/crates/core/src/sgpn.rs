//! Sub-graph proposal network: scores `sigmoid(mlp(readout))`, IoU-based
//! labels, balanced batches and BCE training.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelDims, RunConfig};
use crate::decompose::{node_set_iou, SubGraph};
use crate::encoder::{encode_on, readout_on, EncodedGraph, GraphInputs};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, Bindings, ParamStore, Tape, Tensor, Var};

pub const W1: &str = "sgpn.w1";
pub const B1: &str = "sgpn.b1";
pub const W2: &str = "sgpn.w2";
pub const B2: &str = "sgpn.b2";

pub fn init_sgpn_params(store: &mut ParamStore, dims: &ModelDims, rng: &mut impl Rng) {
    store.init_uniform(W1, dims.h, 2 * dims.d_f, rng);
    store.init_zeros(B1, dims.h, 1);
    store.init_uniform(W2, 1, dims.h, rng);
    store.init_zeros(B2, 1, 1);
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgpnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl SgpnParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(SgpnParams {
            w1: store.get(W1)?.clone(),
            b1: store.get(B1)?.clone(),
            w2: store.get(W2)?.clone(),
            b2: store.get(B2)?.clone(),
        })
    }

    pub fn zeros(d_f: usize, h: usize) -> Self {
        SgpnParams {
            w1: Tensor::zeros(h, 2 * d_f),
            b1: Tensor::zeros(h, 1),
            w2: Tensor::zeros(1, h),
            b2: Tensor::zeros(1, 1),
        }
    }

    fn check(&self, readout_len: usize) -> Result<()> {
        let h = self.w1.rows();
        let ok = self.w1.cols() == readout_len
            && self.b1.shape() == [h, 1]
            && self.w2.shape() == [1, h]
            && self.b2.shape() == [1, 1];
        if ok {
            Ok(())
        } else {
            Err(Error::DimMismatch(format!(
                "proposal MLP shapes {:?}/{:?}/{:?}/{:?} do not fit a readout of length {readout_len}",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            )))
        }
    }
}

/// Handles for the proposal MLP on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SgpnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl SgpnVars {
    pub fn bind(p: &Bindings) -> Result<Self> {
        Ok(SgpnVars {
            w1: p.var(W1)?,
            b1: p.var(B1)?,
            w2: p.var(W2)?,
            b2: p.var(B2)?,
        })
    }
}

/// Pre-sigmoid score of a readout vector.
pub fn logit_on(tape: &mut Tape, p: &SgpnVars, readout: Var) -> Result<Var> {
    let z1 = tape.matmul(p.w1, readout)?;
    let z1 = tape.add(z1, p.b1)?;
    let a1 = tape.relu(z1)?;
    let z2 = tape.matmul(p.w2, a1)?;
    tape.add(z2, p.b2)
}

pub fn score_subgraph(sub: &SubGraph, enc: &EncodedGraph, p: &SgpnParams) -> Result<f64> {
    p.check(2 * enc.d_f())?;
    let mut tape = Tape::new();
    let feats = tape.leaf(enc.node_feats.clone());
    let vars = SgpnVars {
        w1: tape.leaf(p.w1.clone()),
        b1: tape.leaf(p.b1.clone()),
        w2: tape.leaf(p.w2.clone()),
        b2: tape.leaf(p.b2.clone()),
    };
    let r = readout_on(&mut tape, feats, sub.nodes())?;
    let z = logit_on(&mut tape, &vars, r)?;
    let s = tape.sigmoid(z)?;
    Ok(tape.value(s).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSubGraph {
    pub sub: SubGraph,
    pub label: Label,
    pub best_iou: f64,
    /// Reference (caption) index with the highest IoU.
    pub matched_caption: Option<usize>,
    /// Added as the positive for a caption that no sampled sub-graph matched.
    pub injected: bool,
}

impl LabeledSubGraph {
    pub fn target(&self) -> f64 {
        match self.label {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }
}

/// Positive iff the best node IoU against any reference is strictly above
/// `iou_threshold`.
pub fn label_subgraphs(
    subs: &[SubGraph],
    refs: &[SubGraph],
    iou_threshold: f64,
) -> Vec<LabeledSubGraph> {
    subs.iter()
        .map(|s| {
            let mut best = (0.0, None);
            for (j, r) in refs.iter().enumerate() {
                let iou = node_set_iou(s, r.nodes());
                if best.1.is_none() || iou > best.0 {
                    best = (iou, Some(j));
                }
            }
            LabeledSubGraph {
                sub: s.clone(),
                label: if best.0 > iou_threshold {
                    Label::Positive
                } else {
                    Label::Negative
                },
                best_iou: best.0,
                matched_caption: best.1,
                injected: false,
            }
        })
        .collect()
}

/// Positive and negative pools across images, tagged with an image index.
#[derive(Debug, Clone, Default)]
pub struct TrainingPools {
    pub positives: Vec<(usize, LabeledSubGraph)>,
    pub negatives: Vec<(usize, LabeledSubGraph)>,
}

impl TrainingPools {
    /// Adds one image's labels. A reference with no positive sub-graph
    /// matched to it joins the positive pool itself.
    pub fn add_image(&mut self, image: usize, labeled: &[LabeledSubGraph], refs: &[SubGraph]) {
        for l in labeled {
            match l.label {
                Label::Positive => self.positives.push((image, l.clone())),
                Label::Negative => self.negatives.push((image, l.clone())),
            }
        }
        for (j, r) in refs.iter().enumerate() {
            let covered = labeled
                .iter()
                .any(|l| l.label == Label::Positive && l.matched_caption == Some(j));
            if !covered {
                self.positives.push((
                    image,
                    LabeledSubGraph {
                        sub: r.clone(),
                        label: Label::Positive,
                        best_iou: 1.0,
                        matched_caption: Some(j),
                        injected: true,
                    },
                ));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, LabeledSubGraph)> {
        self.positives.iter().chain(&self.negatives)
    }

    /// `batch_size / 2` draws from each pool: without replacement when the
    /// pool is large enough, with replacement otherwise.
    pub fn sample_batch(
        &self,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<&(usize, LabeledSubGraph)>> {
        if self.negatives.is_empty() {
            return Err(Error::NoNegatives);
        }
        let half = batch_size / 2;
        let mut out = Vec::with_capacity(batch_size);
        for pool in [&self.positives, &self.negatives] {
            if pool.is_empty() {
                continue;
            }
            if pool.len() >= half {
                out.extend(
                    index::sample(rng, pool.len(), half)
                        .into_iter()
                        .map(|i| &pool[i]),
                );
            } else {
                out.extend((0..half).map(|_| &pool[rng.random_range(0..pool.len())]));
            }
        }
        Ok(out)
    }
}

pub fn make_training_batch(
    labeled: &[LabeledSubGraph],
    refs: &[SubGraph],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<LabeledSubGraph>> {
    if !batch_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "batch size must be even, got {batch_size}"
        )));
    }
    let mut pools = TrainingPools::default();
    pools.add_image(0, labeled, refs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pools
        .sample_batch(batch_size, &mut rng)?
        .into_iter()
        .map(|(_, l)| l.clone())
        .collect())
}

/// One training image: constant inputs plus sampled and reference sub-graphs.
#[derive(Debug, Clone)]
pub struct SgpnImage {
    pub inputs: GraphInputs,
    pub subs: Vec<SubGraph>,
    pub refs: Vec<SubGraph>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgpnTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub iou_threshold: f64,
    pub gcn_depth: usize,
    /// Also update fusion and GCN weights.
    pub train_encoder: bool,
}

impl SgpnTrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        SgpnTrainOptions {
            steps: cfg.train.sgpn_steps,
            batch_size: cfg.train.sgpn_batch,
            adam: cfg.optimizer,
            iou_threshold: cfg.thresholds.iou_label,
            gcn_depth: cfg.dims.gcn_depth,
            train_encoder: true,
        }
    }
}

pub fn build_pools(corpus: &[SgpnImage], iou_threshold: f64) -> TrainingPools {
    let mut pools = TrainingPools::default();
    for (i, img) in corpus.iter().enumerate() {
        let labeled = label_subgraphs(&img.subs, &img.refs, iou_threshold);
        pools.add_image(i, &labeled, &img.refs);
    }
    pools
}

fn is_encoder_param(name: &str) -> bool {
    name.starts_with("fusion.") || name.starts_with("gcn.")
}

/// Mean BCE over `items` recorded on `tape`.
pub fn batch_loss_on(
    tape: &mut Tape,
    p: &Bindings,
    corpus: &[SgpnImage],
    items: &[&(usize, LabeledSubGraph)],
    gcn_depth: usize,
) -> Result<Var> {
    let sg = SgpnVars::bind(p)?;
    let mut encoded: BTreeMap<usize, Var> = BTreeMap::new();
    let mut terms = Vec::with_capacity(items.len());
    for (image, l) in items {
        let feats = match encoded.get(image) {
            Some(&f) => f,
            None => {
                let gv = corpus[*image].inputs.record(tape);
                let f = encode_on(tape, p, &gv, gcn_depth)?;
                encoded.insert(*image, f);
                f
            }
        };
        let r = readout_on(tape, feats, l.sub.nodes())?;
        let z = logit_on(tape, &sg, r)?;
        terms.push(tape.bce_with_logits(z, l.target())?);
    }
    tape.scaled_total(&terms, 1.0 / items.len() as f64)
}

/// Trains the proposal network (and by default the encoder) with balanced
/// BCE batches. Returns the per-step loss.
pub fn train_sgpn(
    corpus: &[SgpnImage],
    store: &mut ParamStore,
    opts: &SgpnTrainOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let pools = build_pools(corpus, opts.iou_threshold);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let batch = pools.sample_batch(opts.batch_size, &mut rng)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let loss = batch_loss_on(&mut tape, &p, corpus, &batch, opts.gcn_depth)?;
        trace.push(tape.value(loss).item());
        let grads = tape.backward(loss)?;
        let grads = p.gradients(&grads, |n| {
            n.starts_with("sgpn.") || (opts.train_encoder && is_encoder_param(n))
        });
        store.adam_step(&grads, &opts.adam)?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgpnEval {
    pub bce: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Mean BCE and accuracy at the 0.5 cutoff over every pooled sub-graph.
pub fn evaluate_sgpn(
    corpus: &[SgpnImage],
    store: &ParamStore,
    iou_threshold: f64,
    gcn_depth: usize,
) -> Result<SgpnEval> {
    let pools = build_pools(corpus, iou_threshold);
    let (mut bce, mut correct, mut count) = (0.0, 0usize, 0usize);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let sg = SgpnVars::bind(&p)?;
    let mut encoded = BTreeMap::new();
    for (image, l) in pools.iter() {
        let feats = match encoded.get(image) {
            Some(&f) => f,
            None => {
                let gv = corpus[*image].inputs.record(&mut tape);
                let f = encode_on(&mut tape, &p, &gv, gcn_depth)?;
                encoded.insert(*image, f);
                f
            }
        };
        let r = readout_on(&mut tape, feats, l.sub.nodes())?;
        let z = logit_on(&mut tape, &sg, r)?;
        let logit = tape.value(z).item();
        let loss = tape.bce_with_logits(z, l.target())?;
        bce += tape.value(loss).item();
        if (logit > 0.0) == (l.label == Label::Positive) {
            correct += 1;
        }
        count += 1;
    }
    let n = count.max(1) as f64;
    Ok(SgpnEval {
        bce: bce / n,
        accuracy: correct as f64 / n,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{SceneGraph, SceneNode};

    fn graph(n: usize) -> SceneGraph {
        SceneGraph {
            image_id: "s".into(),
            nodes: (0..n)
                .map(|i| SceneNode {
                    id: i,
                    label: "x".into(),
                    visual: vec![0.0],
                    bbox: None,
                })
                .collect(),
            edges: vec![],
        }
    }

    fn sub(g: &SceneGraph, nodes: &[usize]) -> SubGraph {
        SubGraph::new(g, nodes.to_vec(), vec![]).unwrap()
    }

    #[test]
    fn zero_mlp_scores_half() {
        let g = graph(3);
        let enc = EncodedGraph {
            node_feats: Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap(),
        };
        let p = SgpnParams::zeros(2, 4);
        for nodes in [&[0][..], &[1, 2], &[0, 1, 2]] {
            assert_eq!(score_subgraph(&sub(&g, nodes), &enc, &p).unwrap(), 0.5);
        }
    }

    #[test]
    fn score_dim_mismatch() {
        let g = graph(1);
        let enc = EncodedGraph {
            node_feats: Tensor::zeros(3, 1),
        };
        let p = SgpnParams::zeros(2, 4);
        assert!(matches!(
            score_subgraph(&sub(&g, &[0]), &enc, &p),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn labels_use_strict_threshold() {
        let g = graph(10);
        // 4/5 = 0.8 and 3/4 = 0.75 against the reference {0,1,2,3}.
        let refs = vec![sub(&g, &[0, 1, 2, 3])];
        let subs = vec![sub(&g, &[0, 1, 2, 3, 4]), sub(&g, &[0, 1, 2])];
        let labeled = label_subgraphs(&subs, &refs, 0.75);
        assert_eq!(labeled[0].label, Label::Positive);
        assert!((labeled[0].best_iou - 0.8).abs() < 1e-12);
        assert_eq!(labeled[1].label, Label::Negative);
        assert_eq!(labeled[1].best_iou, 0.75);
        let none = label_subgraphs(&subs, &[], 0.75);
        assert!(none
            .iter()
            .all(|l| l.label == Label::Negative && l.matched_caption.is_none()));
    }

    #[test]
    fn batch_is_balanced() {
        let g = graph(20);
        let refs = vec![sub(&g, &[0, 1])];
        let mut subs = vec![
            sub(&g, &[0, 1]),
            sub(&g, &[0, 1, 2, 3, 4, 5, 6, 7, 8]),
            sub(&g, &[1, 0]),
        ];
        subs.dedup();
        let mut labeled = label_subgraphs(&subs, &refs, 0.75);
        // 3 positives, 10 negatives.
        labeled.truncate(1);
        labeled.push(labeled[0].clone());
        labeled.push(labeled[0].clone());
        for i in 10..20 {
            labeled.extend(label_subgraphs(&[sub(&g, &[i])], &refs, 0.75));
        }
        let batch = make_training_batch(&labeled, &refs, 6, 1).unwrap();
        let pos = batch.iter().filter(|l| l.label == Label::Positive).count();
        assert_eq!((pos, batch.len() - pos), (3, 3));
        assert_eq!(batch, make_training_batch(&labeled, &refs, 6, 1).unwrap());
    }

    #[test]
    fn reference_is_injected_when_nothing_matches() {
        let g = graph(6);
        let refs = vec![sub(&g, &[0, 1])];
        let labeled = label_subgraphs(&[sub(&g, &[3]), sub(&g, &[4, 5])], &refs, 0.75);
        let mut pools = TrainingPools::default();
        pools.add_image(0, &labeled, &refs);
        assert_eq!(pools.positives.len(), 1);
        assert!(pools.positives[0].1.injected);
        assert_eq!(pools.positives[0].1.sub, refs[0]);
    }

    #[test]
    fn no_negatives_is_an_error() {
        let g = graph(2);
        let refs = vec![sub(&g, &[0, 1])];
        let labeled = label_subgraphs(&[sub(&g, &[0, 1])], &refs, 0.75);
        assert!(matches!(
            make_training_batch(&labeled, &refs, 2, 0),
            Err(Error::NoNegatives)
        ));
    }
}
