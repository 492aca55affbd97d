//! Feature fusion, role adjacency, stacked graph convolutions and the
//! max/mean readout.
//!
//! Node features are stored column-wise: a `d_f x |V|` matrix whose column `v`
//! belongs to node `v`. Messages flow predicate -> subject/object through
//! `A_ps`/`A_po` and subject/object -> predicate through `A_sp`/`A_op`. Each
//! adjacency is normalized over its receiving column, so a node with several
//! incoming messages averages them.

use rand::Rng;

use crate::config::ModelDims;
use crate::decompose::SubGraph;
use crate::error::{Error, Result};
use crate::graph::{EmbeddingTable, SceneGraph};
use crate::tensor::{Bindings, ParamStore, Tape, Tensor, Var};

pub const FUSION_W1: &str = "fusion.W1";
pub const FUSION_W2: &str = "fusion.W2";
pub const FUSION_W3: &str = "fusion.W3";

pub fn gcn_param(layer: usize, which: &str) -> String {
    format!("gcn.{layer}.{which}")
}

const GCN_WEIGHTS: [&str; 4] = ["W_ps", "W_po", "W_sp", "W_op"];

/// Registers fusion and GCN weights in `store`.
pub fn init_encoder_params(store: &mut ParamStore, dims: &ModelDims, rng: &mut impl Rng) {
    store.init_uniform(FUSION_W1, dims.d_f, dims.d_v, rng);
    store.init_uniform(FUSION_W2, dims.d_f, dims.d_e, rng);
    store.init_uniform(FUSION_W3, dims.d_f, dims.d_e, rng);
    for layer in 0..dims.gcn_depth {
        for w in GCN_WEIGHTS {
            store.init_uniform(&gcn_param(layer, w), dims.d_f, dims.d_f, rng);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

impl FusionParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(FusionParams {
            w1: store.get(FUSION_W1)?.clone(),
            w2: store.get(FUSION_W2)?.clone(),
            w3: store.get(FUSION_W3)?.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayerParams {
    pub w_ps: Tensor,
    pub w_po: Tensor,
    pub w_sp: Tensor,
    pub w_op: Tensor,
}

impl GcnLayerParams {
    pub fn from_store(store: &ParamStore, layer: usize) -> Result<Self> {
        Ok(GcnLayerParams {
            w_ps: store.get(&gcn_param(layer, "W_ps"))?.clone(),
            w_po: store.get(&gcn_param(layer, "W_po"))?.clone(),
            w_sp: store.get(&gcn_param(layer, "W_sp"))?.clone(),
            w_op: store.get(&gcn_param(layer, "W_op"))?.clone(),
        })
    }

    pub fn zeros(d_f: usize) -> Self {
        GcnLayerParams {
            w_ps: Tensor::zeros(d_f, d_f),
            w_po: Tensor::zeros(d_f, d_f),
            w_sp: Tensor::zeros(d_f, d_f),
            w_op: Tensor::zeros(d_f, d_f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencySet {
    /// `|E| x |V|`, predicate -> subject.
    pub a_ps: Tensor,
    /// `|E| x |V|`, predicate -> object.
    pub a_po: Tensor,
    /// `|V| x |E|`, subject -> predicate.
    pub a_sp: Tensor,
    /// `|V| x |E|`, object -> predicate.
    pub a_op: Tensor,
}

fn normalize_columns(t: &mut Tensor) {
    for c in 0..t.cols() {
        let total: f64 = (0..t.rows()).map(|r| t.get(r, c)).sum();
        if total > 0.0 {
            for r in 0..t.rows() {
                let v = t.get(r, c);
                t.set(r, c, v / total);
            }
        }
    }
}

pub fn build_adjacency(g: &SceneGraph) -> AdjacencySet {
    let (nv, ne) = (g.num_nodes(), g.num_edges());
    let mut a_ps = Tensor::zeros(ne, nv);
    let mut a_po = Tensor::zeros(ne, nv);
    let mut a_sp = Tensor::zeros(nv, ne);
    let mut a_op = Tensor::zeros(nv, ne);
    for e in &g.edges {
        a_ps.set(e.id, e.src, 1.0);
        a_po.set(e.id, e.dst, 1.0);
        a_sp.set(e.src, e.id, 1.0);
        a_op.set(e.dst, e.id, 1.0);
    }
    for t in [&mut a_ps, &mut a_po, &mut a_sp, &mut a_op] {
        normalize_columns(t);
    }
    AdjacencySet {
        a_ps,
        a_po,
        a_sp,
        a_op,
    }
}

/// Per-graph constant inputs: raw features and adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInputs {
    /// `d_v x |V|`
    pub node_visual: Tensor,
    /// `d_e x |V|`
    pub node_text: Tensor,
    /// `d_e x |E|`
    pub edge_text: Tensor,
    pub adjacency: AdjacencySet,
}

impl GraphInputs {
    pub fn new(g: &SceneGraph, emb: &EmbeddingTable) -> Result<Self> {
        let d_v = g.d_v().unwrap_or(0);
        let visual: Vec<&[f64]> = g.nodes.iter().map(|n| n.visual.as_slice()).collect();
        let node_text: Vec<&[f64]> = g.nodes.iter().map(|n| emb.lookup(&n.label)).collect();
        let edge_text: Vec<&[f64]> = g.edges.iter().map(|e| emb.lookup(&e.predicate)).collect();
        Ok(GraphInputs {
            node_visual: Tensor::from_columns(d_v, &visual)?,
            node_text: Tensor::from_columns(emb.dim, &node_text)?,
            edge_text: Tensor::from_columns(emb.dim, &edge_text)?,
            adjacency: build_adjacency(g),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_visual.cols()
    }
}

/// Tape handles for one graph's constants.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    pub node_visual: Var,
    pub node_text: Var,
    pub edge_text: Var,
    pub a_ps: Var,
    pub a_po: Var,
    pub a_sp: Var,
    pub a_op: Var,
}

impl GraphInputs {
    pub fn record(&self, tape: &mut Tape) -> GraphVars {
        GraphVars {
            node_visual: tape.leaf(self.node_visual.clone()),
            node_text: tape.leaf(self.node_text.clone()),
            edge_text: tape.leaf(self.edge_text.clone()),
            a_ps: tape.leaf(self.adjacency.a_ps.clone()),
            a_po: tape.leaf(self.adjacency.a_po.clone()),
            a_sp: tape.leaf(self.adjacency.a_sp.clone()),
            a_op: tape.leaf(self.adjacency.a_op.clone()),
        }
    }
}

fn check_fusion(inputs: &GraphInputs, w1: &Tensor, w2: &Tensor, w3: &Tensor) -> Result<()> {
    let d_f = w1.rows();
    if w1.cols() != inputs.node_visual.rows() {
        return Err(Error::DimMismatch(format!(
            "W1 expects visual features of size {}, graph has {}",
            w1.cols(),
            inputs.node_visual.rows()
        )));
    }
    for (name, w) in [("W2", w2), ("W3", w3)] {
        if w.rows() != d_f || w.cols() != inputs.node_text.rows() {
            return Err(Error::DimMismatch(format!(
                "{name} has shape {:?}, expected [{d_f}, {}]",
                w.shape(),
                inputs.node_text.rows()
            )));
        }
    }
    Ok(())
}

/// `X_v = ReLU(W1 x_v + W2 e_v)`, `X_e = W3 e_e`.
pub fn fuse_on(tape: &mut Tape, gv: &GraphVars, w1: Var, w2: Var, w3: Var) -> Result<(Var, Var)> {
    let vis = tape.matmul(w1, gv.node_visual)?;
    let txt = tape.matmul(w2, gv.node_text)?;
    let sum = tape.add(vis, txt)?;
    let xv = tape.relu(sum)?;
    let xe = tape.matmul(w3, gv.edge_text)?;
    Ok((xv, xe))
}

/// `ReLU(W · X · A)`
fn message(tape: &mut Tape, w: Var, x: Var, a: Var) -> Result<Var> {
    let wx = tape.matmul(w, x)?;
    let m = tape.matmul(wx, a)?;
    tape.relu(m)
}

/// One graph convolution with residual connections on nodes and edges.
pub fn gcn_layer_on(
    tape: &mut Tape,
    gv: &GraphVars,
    xv: Var,
    xe: Var,
    w: [Var; 4],
) -> Result<(Var, Var)> {
    let [w_ps, w_po, w_sp, w_op] = w;
    let from_subj = message(tape, w_ps, xe, gv.a_ps)?;
    let from_obj = message(tape, w_po, xe, gv.a_po)?;
    let to_subj = message(tape, w_sp, xv, gv.a_sp)?;
    let to_obj = message(tape, w_op, xv, gv.a_op)?;
    let v1 = tape.add(xv, from_subj)?;
    let new_v = tape.add(v1, from_obj)?;
    let e1 = tape.add(xe, to_subj)?;
    let new_e = tape.add(e1, to_obj)?;
    Ok((new_v, new_e))
}

/// Fusion followed by `depth` GCN layers; returns the node features.
pub fn encode_on(tape: &mut Tape, p: &Bindings, gv: &GraphVars, depth: usize) -> Result<Var> {
    let (mut xv, mut xe) = fuse_on(
        tape,
        gv,
        p.var(FUSION_W1)?,
        p.var(FUSION_W2)?,
        p.var(FUSION_W3)?,
    )?;
    for layer in 0..depth {
        let w = [
            p.var(&gcn_param(layer, "W_ps"))?,
            p.var(&gcn_param(layer, "W_po"))?,
            p.var(&gcn_param(layer, "W_sp"))?,
            p.var(&gcn_param(layer, "W_op"))?,
        ];
        (xv, xe) = gcn_layer_on(tape, gv, xv, xe, w)?;
    }
    Ok(xv)
}

/// `|V| x k` selector whose product with node features keeps the sub-graph's columns.
fn selector(nodes: &[usize], num_nodes: usize) -> Result<Tensor> {
    let mut s = Tensor::zeros(num_nodes, nodes.len());
    for (j, &v) in nodes.iter().enumerate() {
        if v >= num_nodes {
            return Err(Error::NodeOutOfRange {
                node: v,
                len: num_nodes,
            });
        }
        s.set(v, j, 1.0);
    }
    Ok(s)
}

/// Sub-graph node features (`d_f x k`) gathered from the full feature matrix.
pub fn gather_on(tape: &mut Tape, feats: Var, nodes: &[usize]) -> Result<Var> {
    let num_nodes = tape.value(feats).cols();
    let s = tape.leaf(selector(nodes, num_nodes)?);
    tape.matmul(feats, s)
}

/// `[max-pool; mean-pool]` over the sub-graph columns, `2 d_f x 1`.
pub fn readout_on(tape: &mut Tape, feats: Var, nodes: &[usize]) -> Result<Var> {
    let xs = gather_on(tape, feats, nodes)?;
    let max = tape.row_max_pool(xs)?;
    let mean = tape.row_mean_pool(xs)?;
    tape.concat_rows(&[max, mean])
}

/// Final node features `X^u_v`, one column per node in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGraph {
    pub node_feats: Tensor,
}

impl EncodedGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_feats.cols()
    }

    pub fn d_f(&self) -> usize {
        self.node_feats.rows()
    }
}

pub fn fuse_features(
    g: &SceneGraph,
    emb: &EmbeddingTable,
    p: &FusionParams,
) -> Result<(Tensor, Tensor)> {
    let inputs = GraphInputs::new(g, emb)?;
    check_fusion(&inputs, &p.w1, &p.w2, &p.w3)?;
    let mut tape = Tape::new();
    let gv = inputs.record(&mut tape);
    let (w1, w2, w3) = (
        tape.leaf(p.w1.clone()),
        tape.leaf(p.w2.clone()),
        tape.leaf(p.w3.clone()),
    );
    let (xv, xe) = fuse_on(&mut tape, &gv, w1, w2, w3)?;
    Ok((tape.value(xv).clone(), tape.value(xe).clone()))
}

pub fn gcn_layer(
    xv: &Tensor,
    xe: &Tensor,
    adj: &AdjacencySet,
    p: &GcnLayerParams,
) -> Result<(Tensor, Tensor)> {
    let d_f = xv.rows();
    for w in [&p.w_ps, &p.w_po, &p.w_sp, &p.w_op] {
        if w.shape() != [d_f, d_f] {
            return Err(Error::DimMismatch(format!(
                "GCN weight has shape {:?}, expected [{d_f}, {d_f}]",
                w.shape()
            )));
        }
    }
    if xe.rows() != d_f || adj.a_ps.shape() != [xe.cols(), xv.cols()] {
        return Err(Error::DimMismatch(
            "node/edge features do not match the adjacency".into(),
        ));
    }
    let mut tape = Tape::new();
    let gv = GraphVars {
        node_visual: tape.leaf(Tensor::zeros(0, 0)),
        node_text: tape.leaf(Tensor::zeros(0, 0)),
        edge_text: tape.leaf(Tensor::zeros(0, 0)),
        a_ps: tape.leaf(adj.a_ps.clone()),
        a_po: tape.leaf(adj.a_po.clone()),
        a_sp: tape.leaf(adj.a_sp.clone()),
        a_op: tape.leaf(adj.a_op.clone()),
    };
    let xv_var = tape.leaf(xv.clone());
    let xe_var = tape.leaf(xe.clone());
    let w = [
        tape.leaf(p.w_ps.clone()),
        tape.leaf(p.w_po.clone()),
        tape.leaf(p.w_sp.clone()),
        tape.leaf(p.w_op.clone()),
    ];
    let (v, e) = gcn_layer_on(&mut tape, &gv, xv_var, xe_var, w)?;
    Ok((tape.value(v).clone(), tape.value(e).clone()))
}

pub fn encode(
    g: &SceneGraph,
    emb: &EmbeddingTable,
    fusion: &FusionParams,
    layers: &[GcnLayerParams],
) -> Result<EncodedGraph> {
    let (mut xv, mut xe) = fuse_features(g, emb, fusion)?;
    let adj = build_adjacency(g);
    for layer in layers {
        (xv, xe) = gcn_layer(&xv, &xe, &adj, layer)?;
    }
    Ok(EncodedGraph { node_feats: xv })
}

/// Encodes a graph with the weights held in `store`.
pub fn encode_with_store(
    g: &SceneGraph,
    emb: &EmbeddingTable,
    store: &ParamStore,
    depth: usize,
) -> Result<EncodedGraph> {
    let fusion = FusionParams::from_store(store)?;
    let layers = (0..depth)
        .map(|l| GcnLayerParams::from_store(store, l))
        .collect::<Result<Vec<_>>>()?;
    encode(g, emb, &fusion, &layers)
}

/// Same as [`encode_with_store`] from precomputed inputs.
pub fn encode_inputs(
    inputs: &GraphInputs,
    store: &ParamStore,
    depth: usize,
) -> Result<EncodedGraph> {
    check_fusion(
        inputs,
        store.get(FUSION_W1)?,
        store.get(FUSION_W2)?,
        store.get(FUSION_W3)?,
    )?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let gv = inputs.record(&mut tape);
    let feats = encode_on(&mut tape, &p, &gv, depth)?;
    Ok(EncodedGraph {
        node_feats: tape.value(feats).clone(),
    })
}

pub fn readout(sub: &SubGraph, enc: &EncodedGraph) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let feats = tape.leaf(enc.node_feats.clone());
    let r = readout_on(&mut tape, feats, sub.nodes())?;
    Ok(tape.value(r).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{SceneEdge, SceneNode};
    use std::collections::BTreeMap;

    fn graph(n: usize, edges: &[(usize, usize)]) -> SceneGraph {
        SceneGraph {
            image_id: "g".into(),
            nodes: (0..n)
                .map(|i| SceneNode {
                    id: i,
                    label: format!("n{i}"),
                    visual: vec![i as f64 - 1.0, 0.5],
                    bbox: None,
                })
                .collect(),
            edges: edges
                .iter()
                .enumerate()
                .map(|(i, &(s, d))| SceneEdge {
                    id: i,
                    src: s,
                    dst: d,
                    predicate: "p".into(),
                })
                .collect(),
        }
    }

    fn emb() -> EmbeddingTable {
        EmbeddingTable {
            dim: 2,
            unk: vec![0.1, -0.2],
            entries: BTreeMap::new(),
        }
    }

    #[test]
    fn single_edge_adjacency() {
        let adj = build_adjacency(&graph(2, &[(0, 1)]));
        assert_eq!(adj.a_ps.get(0, 0), 1.0);
        assert_eq!(adj.a_po.get(0, 1), 1.0);
        assert_eq!(adj.a_sp.get(0, 0), 1.0);
        assert_eq!(adj.a_op.get(1, 0), 1.0);
    }

    #[test]
    fn subject_of_two_edges_averages() {
        let adj = build_adjacency(&graph(3, &[(0, 1), (0, 2)]));
        assert_eq!(adj.a_ps.column_vec(0), vec![0.5, 0.5]);
        // The reverse direction is not normalized the same way.
        assert_eq!(adj.a_sp.get(0, 0), 1.0);
    }

    #[test]
    fn zero_fusion_gives_zero_features() {
        let g = graph(2, &[(0, 1)]);
        let p = FusionParams {
            w1: Tensor::zeros(3, 2),
            w2: Tensor::zeros(3, 2),
            w3: Tensor::zeros(3, 2),
        };
        let (xv, xe) = fuse_features(&g, &emb(), &p).unwrap();
        assert_eq!(xv, Tensor::zeros(3, 2));
        assert_eq!(xe, Tensor::zeros(3, 1));
    }

    #[test]
    fn identity_fusion_is_relu_of_visual() {
        let g = graph(2, &[]);
        let p = FusionParams {
            w1: Tensor::identity(2),
            w2: Tensor::zeros(2, 2),
            w3: Tensor::zeros(2, 2),
        };
        let (xv, _) = fuse_features(&g, &emb(), &p).unwrap();
        assert_eq!(xv.column_vec(0), vec![0.0, 0.5]);
        assert_eq!(xv.column_vec(1), vec![0.0, 0.5]);
    }

    #[test]
    fn fusion_dim_mismatch() {
        let g = graph(2, &[]);
        let p = FusionParams {
            w1: Tensor::zeros(3, 5),
            w2: Tensor::zeros(3, 2),
            w3: Tensor::zeros(3, 2),
        };
        assert!(matches!(
            fuse_features(&g, &emb(), &p),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn zero_layer_is_residual_only() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let xv = Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 1.5]).unwrap();
        let xe = Tensor::from_vec(2, 2, vec![0.3, 0.1, -0.7, 2.0]).unwrap();
        let (v, e) = gcn_layer(&xv, &xe, &build_adjacency(&g), &GcnLayerParams::zeros(2)).unwrap();
        assert_eq!(v, xv);
        assert_eq!(e, xe);
    }

    #[test]
    fn edgeless_graph_keeps_node_features() {
        let g = graph(2, &[]);
        let xv = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let xe = Tensor::zeros(2, 0);
        let p = GcnLayerParams {
            w_ps: Tensor::identity(2),
            w_po: Tensor::identity(2),
            w_sp: Tensor::identity(2),
            w_op: Tensor::identity(2),
        };
        let (v, _) = gcn_layer(&xv, &xe, &build_adjacency(&g), &p).unwrap();
        assert_eq!(v, xv);
    }

    #[test]
    fn readout_example() {
        let enc = EncodedGraph {
            node_feats: Tensor::from_columns(2, &[&[1.0, 2.0], &[3.0, 0.0]]).unwrap(),
        };
        let g = graph(2, &[]);
        let sub = SubGraph::new(&g, vec![0, 1], vec![]).unwrap();
        assert_eq!(readout(&sub, &enc).unwrap(), vec![3.0, 2.0, 2.0, 1.0]);
        let single = SubGraph::new(&g, vec![1], vec![]).unwrap();
        assert_eq!(readout(&single, &enc).unwrap(), vec![3.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn readout_out_of_range() {
        let enc = EncodedGraph {
            node_feats: Tensor::zeros(2, 1),
        };
        let g = graph(3, &[]);
        let sub = SubGraph::new(&g, vec![2], vec![]).unwrap();
        assert!(matches!(
            readout(&sub, &enc),
            Err(Error::NodeOutOfRange { .. })
        ));
    }
}
