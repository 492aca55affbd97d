//! Property tests over randomly generated graphs, sub-graphs and models.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use subgc::config::{ModelDims, RunConfig};
use subgc::decoder::{beam_decode, sample_from, topk_distribution, topk_sample_decode};
use subgc::decompose::{
    closure_from_seeds, nms, node_iou, sample_subgraphs_audited, ScoredSubGraph, SubGraph,
};
use subgc::encoder::{encode_with_store, readout};
use subgc::graph::{
    tokenize, BoundingBox, EmbeddingTable, SceneEdge, SceneGraph, SceneNode, Vocabulary,
};
use subgc::metrics::{bleu, div_n};
use subgc::model::Model;
use subgc::sgpn::score_subgraph;

const LABELS: [&str; 5] = ["man", "horse", "dog", "ball", "tree"];
const PREDS: [&str; 3] = ["riding", "near", "behind"];
const D_V: usize = 3;

fn small_dims() -> ModelDims {
    ModelDims {
        d_v: D_V,
        d_e: 2,
        d_f: 4,
        gcn_depth: 2,
        h: 3,
        d_w: 3,
        d_h: 4,
        d_l: 4,
        d_a: 3,
        d_g: 3,
    }
}

fn small_model(seed: u64) -> Model {
    let mut entries = BTreeMap::new();
    for (i, t) in LABELS.iter().chain(&PREDS).enumerate() {
        entries.insert(
            t.to_string(),
            vec![(i as f64 * 0.37).sin(), (i as f64 * 0.71).cos()],
        );
    }
    let emb = EmbeddingTable {
        dim: 2,
        unk: vec![0.0, 0.0],
        entries,
    };
    let cfg = RunConfig {
        dims: small_dims(),
        ..Default::default()
    };
    let vocab = Vocabulary::new(["a", "man", "riding", "horse"]);
    Model::init(cfg, emb, Some(vocab), seed).unwrap()
}

/// Graphs with 1..=7 nodes and up to 10 distinct non-loop triplets.
fn arb_graph() -> impl Strategy<Value = SceneGraph> {
    (1usize..=7).prop_flat_map(|n| {
        let nodes = prop::collection::vec(
            (
                0..LABELS.len(),
                prop::collection::vec(-1.0f64..1.0, D_V),
                prop::option::of((0.0f64..100.0, 0.0f64..100.0, 1.0f64..50.0, 1.0f64..50.0)),
            ),
            n,
        );
        let edges = prop::collection::vec((0..n, 0..n, 0..PREDS.len()), 0..=10);
        (nodes, edges).prop_map(|(nodes, edges)| {
            let nodes: Vec<SceneNode> = nodes
                .into_iter()
                .enumerate()
                .map(|(id, (l, visual, b))| SceneNode {
                    id,
                    label: LABELS[l].into(),
                    visual,
                    bbox: b.map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap()),
                })
                .collect();
            let mut seen = BTreeSet::new();
            let edges = edges
                .into_iter()
                .filter(|&(s, d, p)| s != d && seen.insert((s, d, p)))
                .enumerate()
                .map(|(id, (src, dst, p))| SceneEdge {
                    id,
                    src,
                    dst,
                    predicate: PREDS[p].into(),
                })
                .collect();
            SceneGraph {
                image_id: "g".into(),
                nodes,
                edges,
            }
        })
    })
}

fn arb_graph_and_perm() -> impl Strategy<Value = (SceneGraph, Vec<usize>)> {
    arb_graph().prop_flat_map(|g| {
        let n = g.num_nodes();
        (Just(g), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    })
}

fn permute(g: &SceneGraph, perm: &[usize]) -> (SceneGraph, Vec<usize>) {
    let mut new_of = vec![0; perm.len()];
    for (j, &old) in perm.iter().enumerate() {
        new_of[old] = j;
    }
    let nodes = perm
        .iter()
        .enumerate()
        .map(|(j, &old)| SceneNode {
            id: j,
            ..g.nodes[old].clone()
        })
        .collect();
    let edges = g
        .edges
        .iter()
        .map(|e| SceneEdge {
            src: new_of[e.src],
            dst: new_of[e.dst],
            ..e.clone()
        })
        .collect();
    (
        SceneGraph {
            image_id: g.image_id.clone(),
            nodes,
            edges,
        },
        new_of,
    )
}

fn scored(g: &SceneGraph, scores: &[f64]) -> Vec<ScoredSubGraph> {
    sample_subgraphs_audited(g, 40, 1, 3)
        .unwrap()
        .into_iter()
        .zip(scores.iter().cycle())
        .map(|(s, &score)| ScoredSubGraph { sub: s.sub, score })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn graph_json_round_trips(g in arb_graph()) {
        g.validate(D_V).unwrap();
        let back = SceneGraph::from_json(&g.to_json().unwrap(), D_V).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn sampled_subgraphs_are_seed_closures(g in arb_graph(), seed in any::<u64>()) {
        let a = sample_subgraphs_audited(&g, 30, seed, 3).unwrap();
        prop_assert_eq!(&a, &sample_subgraphs_audited(&g, 30, seed, 3).unwrap());
        let mut seen = BTreeSet::new();
        for s in &a {
            prop_assert!(!s.seeds.is_empty() && s.seeds.len() <= 3);
            prop_assert_eq!(&s.sub, &closure_from_seeds(&g, &s.seeds).unwrap());
            prop_assert!(seen.insert((s.sub.nodes().to_vec(), s.sub.edges().to_vec())), "duplicate sub-graph");
            for &e in s.sub.edges() {
                let edge = &g.edges[e];
                prop_assert!(s.seeds.contains(&edge.src) || s.seeds.contains(&edge.dst));
            }
        }
    }

    #[test]
    fn node_iou_is_a_bounded_symmetric_similarity(g in arb_graph(), seed in any::<u64>()) {
        let subs: Vec<SubGraph> = sample_subgraphs_audited(&g, 20, seed, 3).unwrap().into_iter().map(|s| s.sub).collect();
        for a in &subs {
            prop_assert_eq!(node_iou(a, a).unwrap(), 1.0);
            for b in &subs {
                let x = node_iou(a, b).unwrap();
                prop_assert!((0.0..=1.0).contains(&x));
                prop_assert_eq!(x, node_iou(b, a).unwrap());
            }
        }
    }

    #[test]
    fn nms_post_state(g in arb_graph(), scores in prop::collection::vec(0.0f64..1.0, 1..20), thr in 0.0f64..=1.0) {
        let cands = scored(&g, &scores);
        let kept = nms(&cands, thr);
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(node_iou(&a.sub, &b.sub).unwrap() < thr);
            }
        }
        for c in &cands {
            if !kept.iter().any(|k| k.sub == c.sub) {
                prop_assert!(kept.iter().any(|k| k.score >= c.score && node_iou(&k.sub, &c.sub).unwrap() >= thr));
            }
        }
        prop_assert_eq!(nms(&kept, thr), kept.clone());
    }

    #[test]
    fn top_k_support(logits in prop::collection::vec(-5.0f64..5.0, 1..12), k in 1usize..6, t in 0.1f64..2.0, seed in any::<u64>()) {
        let dist = topk_distribution(&logits, k, t);
        prop_assert_eq!(dist.len(), k.min(logits.len()));
        prop_assert!((dist.iter().map(|d| d.1).sum::<f64>() - 1.0).abs() < 1e-12);
        let floor = dist.iter().map(|&(i, _)| logits[i]).fold(f64::INFINITY, f64::min);
        let outside = (0..logits.len()).filter(|i| !dist.iter().any(|d| d.0 == *i));
        for i in outside {
            prop_assert!(logits[i] <= floor);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let tok = sample_from(&dist, &mut rng);
            prop_assert!(dist.iter().any(|d| d.0 == tok));
        }
    }

    #[test]
    fn bleu_bounds(a in prop::collection::vec(0usize..4, 1..8), b in prop::collection::vec(0usize..4, 1..8), n in 1usize..=4) {
        let w = |v: &[usize]| v.iter().map(|x| ["a", "b", "c", "d"][*x].to_string()).collect::<Vec<_>>();
        let (a, b) = (w(&a), w(&b));
        let s = bleu(&a, std::slice::from_ref(&b), n).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        if a.len() >= n {
            prop_assert!((bleu(&a, std::slice::from_ref(&a), n).unwrap() - 1.0).abs() < 1e-12);
        }
        let d = div_n(&[a.clone(), b.clone()], 1);
        prop_assert!(d > 0.0 && d <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gcn_equivariance_and_readout_invariance((g, perm) in arb_graph_and_perm(), seed in 0u64..1000) {
        let m = small_model(seed);
        let (pg, new_of) = permute(&g, &perm);
        let depth = m.config.dims.gcn_depth;
        let a = encode_with_store(&g, &m.embeddings, &m.store, depth).unwrap();
        let b = encode_with_store(&pg, &m.embeddings, &m.store, depth).unwrap();
        for (old, &new) in new_of.iter().enumerate() {
            for r in 0..a.d_f() {
                prop_assert!((a.node_feats.get(r, old) - b.node_feats.get(r, new)).abs() <= 1e-9);
            }
        }
        let p = m.sgpn().unwrap();
        for s in sample_subgraphs_audited(&g, 10, seed, 3).unwrap() {
            let mapped = SubGraph::new(&pg, s.sub.nodes().iter().map(|&v| new_of[v]).collect(), s.sub.edges().to_vec()).unwrap();
            let (ra, rb) = (readout(&s.sub, &a).unwrap(), readout(&mapped, &b).unwrap());
            for (x, y) in ra.iter().zip(&rb) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            let (sa, sb) = (score_subgraph(&s.sub, &a, &p).unwrap(), score_subgraph(&mapped, &b, &p).unwrap());
            prop_assert!((sa - sb).abs() <= 1e-9 && (0.0..=1.0).contains(&sa));
        }
    }

    #[test]
    fn attention_is_a_distribution_over_the_subgraph(g in arb_graph(), seed in 0u64..1000) {
        let m = small_model(seed);
        let (_, enc) = m.encode(&g).unwrap();
        for s in sample_subgraphs_audited(&g, 6, seed, 3).unwrap() {
            let caps = beam_decode(&s.sub, &enc, &m.store, 2, 6).unwrap();
            let sampled = topk_sample_decode(&s.sub, &enc, &m.store, 3, 0.6, seed, 6).unwrap();
            for cap in caps.iter().chain(std::iter::once(&sampled)) {
                prop_assert_eq!(cap.alignments.len(), cap.tokens.len());
                for al in cap.alignments.iter().map(|a| a.as_ref().unwrap()) {
                    prop_assert_eq!(al.alpha.len(), s.sub.len());
                    prop_assert!((al.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    prop_assert!(al.alpha.iter().all(|&x| x >= 0.0));
                    prop_assert!(s.sub.contains_node(al.node));
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..1000) {
        let m = small_model(seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        prop_assert_eq!(back.to_checkpoint(), m.to_checkpoint());
        prop_assert_eq!(std::fs::read(&path).unwrap(), {
            back.save(dir.path().join("again.json")).unwrap();
            std::fs::read(dir.path().join("again.json")).unwrap()
        });
    }
}

#[test]
fn tokenizer_is_idempotent_on_joined_output() {
    for s in ["A man, riding a HORSE.", "  two   dogs ", "it's a cat!"] {
        let t = tokenize(s);
        assert_eq!(tokenize(&t.join(" ")), t);
    }
}
