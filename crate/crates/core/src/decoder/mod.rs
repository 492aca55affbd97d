//! Attention LSTM + language LSTM decoder over one sub-graph.
//!
//! Per step `t` with previous token `w`:
//!
//! ```text
//! h_A, c_A = LSTM_att([h_L; E w; x_s], h_A, c_A)
//! alpha    = softmax(w_a^T tanh(W_v X_s + W_h h_A 1^T))
//! h_L, c_L = LSTM_lang([h_A; X_s alpha^T], h_L, c_L)
//! logits   = W_out h_L + b_out
//! ```
//!
//! `X_s` holds the sub-graph's node features as columns and `x_s = g(readout)`
//! is computed once per sub-graph. States start at zero.

mod search;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use search::{
    argmax, beam_search, greedy_search, log_softmax, sample_from, topk_distribution, topk_search,
    Alignment, GroundedCaption, ModelStep, StepModel,
};

use crate::config::{ModelDims, RunConfig};
use crate::decompose::SubGraph;
use crate::encoder::{encode_inputs, encode_on, gather_on, readout_on, EncodedGraph, GraphInputs};
use crate::error::{Error, Result};
use crate::graph::{BOS, EOS};
use crate::tensor::{AdamConfig, Bindings, ParamStore, Tape, Tensor, Var};

pub const EMBED: &str = "dec.embed";
pub const WV: &str = "dec.Wv";
pub const WH: &str = "dec.Wh";
pub const WA: &str = "dec.wa";
pub const G_W1: &str = "dec.g.W1";
pub const G_B1: &str = "dec.g.b1";
pub const G_W2: &str = "dec.g.W2";
pub const G_B2: &str = "dec.g.b2";
pub const OUT_W: &str = "dec.out.W";
pub const OUT_B: &str = "dec.out.b";

const GATES: [&str; 4] = ["i", "f", "o", "c"];

/// `dec.att.W_i`, `dec.lang.b_c`, ...
pub fn lstm_param(lstm: &str, kind: &str, gate: &str) -> String {
    format!("dec.{lstm}.{kind}_{gate}")
}

/// Decoder sizes, recovered from (and checked against) a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderShape {
    pub vocab: usize,
    pub d_f: usize,
    pub d_w: usize,
    pub d_h: usize,
    pub d_l: usize,
    pub d_a: usize,
    pub d_g: usize,
}

impl DecoderShape {
    pub fn new(dims: &ModelDims, vocab: usize) -> Self {
        DecoderShape {
            vocab,
            d_f: dims.d_f,
            d_w: dims.d_w,
            d_h: dims.d_h,
            d_l: dims.d_l,
            d_a: dims.d_a,
            d_g: dims.d_g,
        }
    }

    fn expected(&self) -> Vec<(String, [usize; 2])> {
        let s = self;
        let mut out = vec![
            (EMBED.to_string(), [s.d_w, s.vocab]),
            (WV.to_string(), [s.d_a, s.d_f]),
            (WH.to_string(), [s.d_a, s.d_h]),
            (WA.to_string(), [1, s.d_a]),
            (G_W1.to_string(), [s.d_g, 2 * s.d_f]),
            (G_B1.to_string(), [s.d_g, 1]),
            (G_W2.to_string(), [2 * s.d_f, s.d_g]),
            (G_B2.to_string(), [2 * s.d_f, 1]),
            (OUT_W.to_string(), [s.vocab, s.d_l]),
            (OUT_B.to_string(), [s.vocab, 1]),
        ];
        let att_in = s.d_l + s.d_w + 2 * s.d_f + s.d_h;
        let lang_in = s.d_h + s.d_f + s.d_l;
        for g in GATES {
            out.push((lstm_param("att", "W", g), [s.d_h, att_in]));
            out.push((lstm_param("att", "b", g), [s.d_h, 1]));
            out.push((lstm_param("lang", "W", g), [s.d_l, lang_in]));
            out.push((lstm_param("lang", "b", g), [s.d_l, 1]));
        }
        out
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let [d_w, vocab] = store.get(EMBED)?.shape();
        let [d_a, d_f] = store.get(WV)?.shape();
        let d_h = store.get(WH)?.cols();
        let d_g = store.get(G_W1)?.rows();
        let d_l = store.get(OUT_W)?.cols();
        let shape = DecoderShape {
            vocab,
            d_f,
            d_w,
            d_h,
            d_l,
            d_a,
            d_g,
        };
        if vocab < 4 {
            return Err(Error::DimMismatch(format!(
                "decoder vocabulary has {vocab} tokens, need at least the 4 specials"
            )));
        }
        for (name, want) in shape.expected() {
            let got = store.get(&name)?.shape();
            if got != want {
                return Err(Error::DimMismatch(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        Ok(shape)
    }
}

/// Registers every decoder parameter: weights Xavier-uniform, biases zero.
pub fn init_decoder_params(
    store: &mut ParamStore,
    dims: &ModelDims,
    vocab: usize,
    rng: &mut impl Rng,
) {
    for (name, [r, c]) in DecoderShape::new(dims, vocab).expected() {
        if c == 1 {
            store.init_zeros(&name, r, c);
        } else {
            store.init_uniform(&name, r, c, rng);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmVars {
    w: [Var; 4],
    b: [Var; 4],
}

impl LstmVars {
    fn bind(p: &Bindings, lstm: &str) -> Result<Self> {
        let mut w = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for g in GATES {
            w.push(p.var(&lstm_param(lstm, "W", g))?);
            b.push(p.var(&lstm_param(lstm, "b", g))?);
        }
        Ok(LstmVars {
            w: [w[0], w[1], w[2], w[3]],
            b: [b[0], b[1], b[2], b[3]],
        })
    }

    fn cell(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let z = tape.concat_rows(&[x, h])?;
        let mut pre = [z; 4];
        for (k, p) in pre.iter_mut().enumerate() {
            let m = tape.matmul(self.w[k], z)?;
            *p = tape.add(m, self.b[k])?;
        }
        let i = tape.sigmoid(pre[0])?;
        let f = tape.sigmoid(pre[1])?;
        let o = tape.sigmoid(pre[2])?;
        let g = tape.tanh(pre[3])?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next)?;
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

/// Decoder parameter handles on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    embed: Var,
    att: LstmVars,
    lang: LstmVars,
    wv: Var,
    wh: Var,
    wa: Var,
    g_w1: Var,
    g_b1: Var,
    g_w2: Var,
    g_b2: Var,
    out_w: Var,
    out_b: Var,
    shape: DecoderShape,
}

impl DecoderVars {
    pub fn bind(tape: &Tape, p: &Bindings) -> Result<Self> {
        let embed = p.var(EMBED)?;
        let wv = p.var(WV)?;
        let [d_w, vocab] = tape.value(embed).shape();
        let [d_a, d_f] = tape.value(wv).shape();
        let wh = p.var(WH)?;
        let g_w1 = p.var(G_W1)?;
        let out_w = p.var(OUT_W)?;
        Ok(DecoderVars {
            embed,
            att: LstmVars::bind(p, "att")?,
            lang: LstmVars::bind(p, "lang")?,
            wv,
            wh,
            wa: p.var(WA)?,
            g_w1,
            g_b1: p.var(G_B1)?,
            g_w2: p.var(G_W2)?,
            g_b2: p.var(G_B2)?,
            out_w,
            out_b: p.var(OUT_B)?,
            shape: DecoderShape {
                vocab,
                d_f,
                d_w,
                d_h: tape.value(wh).cols(),
                d_l: tape.value(out_w).cols(),
                d_a,
                d_g: tape.value(g_w1).rows(),
            },
        })
    }

    pub fn shape(&self) -> DecoderShape {
        self.shape
    }
}

/// Step-invariant values for one sub-graph.
#[derive(Debug, Clone, Copy)]
pub struct SubgraphContext {
    /// `d_f x k` node features.
    nodes: Var,
    /// `x_s`, `2 d_f x 1`.
    feature: Var,
    /// `W_v X_s`.
    projected: Var,
    /// `1 x k` ones, broadcasts the hidden projection across nodes.
    ones: Var,
}

/// `x_s = W2 relu(W1 r + b1) + b2` on the readout `r`.
pub fn subgraph_feature_on(tape: &mut Tape, v: &DecoderVars, readout: Var) -> Result<Var> {
    let z = tape.matmul(v.g_w1, readout)?;
    let z = tape.add(z, v.g_b1)?;
    let a = tape.relu(z)?;
    let z = tape.matmul(v.g_w2, a)?;
    tape.add(z, v.g_b2)
}

pub fn context_on(
    tape: &mut Tape,
    v: &DecoderVars,
    feats: Var,
    nodes: &[usize],
) -> Result<SubgraphContext> {
    let gathered = gather_on(tape, feats, nodes)?;
    let r = readout_on(tape, feats, nodes)?;
    let feature = subgraph_feature_on(tape, v, r)?;
    let projected = tape.matmul(v.wv, gathered)?;
    let ones = tape.leaf(Tensor::filled(1, nodes.len(), 1.0));
    Ok(SubgraphContext {
        nodes: gathered,
        feature,
        projected,
        ones,
    })
}

/// Hidden and cell states of both LSTMs.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h_att: Var,
    pub c_att: Var,
    pub h_lang: Var,
    pub c_lang: Var,
}

pub fn initial_state_on(tape: &mut Tape, v: &DecoderVars) -> DecoderState {
    let s = v.shape;
    DecoderState {
        h_att: tape.leaf(Tensor::zeros(s.d_h, 1)),
        c_att: tape.leaf(Tensor::zeros(s.d_h, 1)),
        h_lang: tape.leaf(Tensor::zeros(s.d_l, 1)),
        c_lang: tape.leaf(Tensor::zeros(s.d_l, 1)),
    }
}

/// One recurrence step; returns the next state, `vocab x 1` logits and the
/// `1 x k` attention row.
pub fn step_on(
    tape: &mut Tape,
    v: &DecoderVars,
    ctx: &SubgraphContext,
    state: &DecoderState,
    prev: usize,
) -> Result<(DecoderState, Var, Var)> {
    if prev >= v.shape.vocab {
        return Err(Error::DimMismatch(format!(
            "token {prev} is outside a vocabulary of {}",
            v.shape.vocab
        )));
    }
    let mut onehot = Tensor::zeros(v.shape.vocab, 1);
    onehot.set(prev, 0, 1.0);
    let onehot = tape.leaf(onehot);
    let e = tape.matmul(v.embed, onehot)?;
    let x_att = tape.concat_rows(&[state.h_lang, e, ctx.feature])?;
    let (h_att, c_att) = v.att.cell(tape, x_att, state.h_att, state.c_att)?;

    let wh = tape.matmul(v.wh, h_att)?;
    let wh = tape.matmul(wh, ctx.ones)?;
    let pre = tape.add(ctx.projected, wh)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul(v.wa, act)?;
    let alpha = tape.softmax_rows(scores)?;
    let alpha_col = tape.transpose(alpha)?;
    let attended = tape.matmul(ctx.nodes, alpha_col)?;

    let x_lang = tape.concat_rows(&[h_att, attended])?;
    let (h_lang, c_lang) = v.lang.cell(tape, x_lang, state.h_lang, state.c_lang)?;
    let logits = tape.matmul(v.out_w, h_lang)?;
    let logits = tape.add(logits, v.out_b)?;
    Ok((
        DecoderState {
            h_att,
            c_att,
            h_lang,
            c_lang,
        },
        logits,
        alpha,
    ))
}

/// Mean next-token cross-entropy of `BOS tokens EOS` under teacher forcing.
pub fn caption_loss_on(
    tape: &mut Tape,
    v: &DecoderVars,
    feats: Var,
    nodes: &[usize],
    tokens: &[usize],
) -> Result<Var> {
    let ctx = context_on(tape, v, feats, nodes)?;
    let mut state = initial_state_on(tape, v);
    let mut prev = BOS;
    let mut terms = Vec::with_capacity(tokens.len() + 1);
    for &target in tokens.iter().chain(std::iter::once(&EOS)) {
        let (next, logits, _) = step_on(tape, v, &ctx, &state, prev)?;
        terms.push(tape.cross_entropy(logits, target)?);
        state = next;
        prev = target;
    }
    tape.scaled_total(&terms, 1.0 / terms.len() as f64)
}

fn check_encoded(shape: &DecoderShape, enc: &EncodedGraph, sub: &SubGraph) -> Result<()> {
    if enc.d_f() != shape.d_f {
        return Err(Error::DimMismatch(format!(
            "decoder expects node features of size {}, encoder produced {}",
            shape.d_f,
            enc.d_f()
        )));
    }
    if let Some(&v) = sub.nodes().iter().find(|&&v| v >= enc.num_nodes()) {
        return Err(Error::NodeOutOfRange {
            node: v,
            len: enc.num_nodes(),
        });
    }
    Ok(())
}

/// `x_s` for a sub-graph as a plain vector.
pub fn subgraph_feature(
    sub: &SubGraph,
    enc: &EncodedGraph,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    let shape = DecoderShape::from_store(store)?;
    check_encoded(&shape, enc, sub)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let v = DecoderVars::bind(&tape, &p)?;
    let feats = tape.leaf(enc.node_feats.clone());
    let r = readout_on(&mut tape, feats, sub.nodes())?;
    let x = subgraph_feature_on(&mut tape, &v, r)?;
    Ok(tape.value(x).data().to_vec())
}

/// Inference-time decoder bound to one sub-graph. All hypotheses share one
/// tape, so states are cheap handles.
pub struct SubgraphDecoder {
    tape: Tape,
    vars: DecoderVars,
    ctx: SubgraphContext,
    nodes: Vec<usize>,
}

/// Output of [`SubgraphDecoder::step`].
#[derive(Debug, Clone)]
pub struct DecodedStep {
    pub state: DecoderState,
    pub logits: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Graph node id with the largest attention weight.
    pub node: usize,
}

impl SubgraphDecoder {
    pub fn new(sub: &SubGraph, enc: &EncodedGraph, store: &ParamStore) -> Result<Self> {
        let shape = DecoderShape::from_store(store)?;
        check_encoded(&shape, enc, sub)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let vars = DecoderVars::bind(&tape, &p)?;
        let feats = tape.leaf(enc.node_feats.clone());
        let ctx = context_on(&mut tape, &vars, feats, sub.nodes())?;
        Ok(SubgraphDecoder {
            tape,
            vars,
            ctx,
            nodes: sub.nodes().to_vec(),
        })
    }

    pub fn shape(&self) -> DecoderShape {
        self.vars.shape
    }

    pub fn feature(&self) -> &[f64] {
        self.tape.value(self.ctx.feature).data()
    }

    pub fn initial_state(&mut self) -> DecoderState {
        initial_state_on(&mut self.tape, &self.vars)
    }

    pub fn step(&mut self, state: &DecoderState, prev: usize) -> Result<DecodedStep> {
        let (state, logits, alpha) = step_on(&mut self.tape, &self.vars, &self.ctx, state, prev)?;
        let alpha = self.tape.value(alpha).data().to_vec();
        Ok(DecodedStep {
            state,
            logits: self.tape.value(logits).data().to_vec(),
            node: self.nodes[argmax(&alpha)],
            alpha,
        })
    }
}

impl StepModel for SubgraphDecoder {
    type State = DecoderState;

    fn initial(&mut self) -> DecoderState {
        self.initial_state()
    }

    fn step(&mut self, state: &DecoderState, prev: usize) -> Result<ModelStep<DecoderState>> {
        let s = SubgraphDecoder::step(self, state, prev)?;
        Ok(ModelStep {
            state: s.state,
            logits: s.logits,
            alignment: Some(Alignment {
                node: s.node,
                alpha: s.alpha,
            }),
        })
    }
}

pub fn greedy_decode(
    sub: &SubGraph,
    enc: &EncodedGraph,
    store: &ParamStore,
    max_len: usize,
) -> Result<GroundedCaption> {
    greedy_search(&mut SubgraphDecoder::new(sub, enc, store)?, max_len)
}

pub fn beam_decode(
    sub: &SubGraph,
    enc: &EncodedGraph,
    store: &ParamStore,
    beam: usize,
    max_len: usize,
) -> Result<Vec<GroundedCaption>> {
    beam_search(&mut SubgraphDecoder::new(sub, enc, store)?, beam, max_len)
}

pub fn topk_sample_decode(
    sub: &SubGraph,
    enc: &EncodedGraph,
    store: &ParamStore,
    k: usize,
    temperature: f64,
    seed: u64,
    max_len: usize,
) -> Result<GroundedCaption> {
    if temperature <= 0.0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "top-K sampling needs K >= 1 and T > 0, got K={k}, T={temperature}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    topk_search(
        &mut SubgraphDecoder::new(sub, enc, store)?,
        k,
        temperature,
        &mut rng,
        max_len,
    )
}

/// A training caption paired with the sub-graph it describes.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionPair {
    /// Index into the image list passed to [`train_decoder`].
    pub image: usize,
    pub sub: SubGraph,
    /// Token ids without BOS/EOS.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub gcn_depth: usize,
    pub freeze_encoder: bool,
}

impl DecoderTrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        DecoderTrainOptions {
            steps: cfg.train.decoder_steps,
            batch_size: cfg.train.decoder_batch,
            adam: cfg.optimizer,
            gcn_depth: cfg.dims.gcn_depth,
            freeze_encoder: cfg.train.freeze_encoder,
        }
    }
}

enum Features {
    Frozen(Vec<Tensor>),
    Joint,
}

/// Mean teacher-forced loss of `batch` recorded on `tape`.
pub fn batch_loss_on(
    tape: &mut Tape,
    p: &Bindings,
    images: &[GraphInputs],
    pairs: &[&CaptionPair],
    frozen: Option<&[Tensor]>,
    gcn_depth: usize,
) -> Result<Var> {
    let v = DecoderVars::bind(tape, p)?;
    let mut feats = std::collections::BTreeMap::new();
    let mut terms = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let f = match feats.get(&pair.image) {
            Some(&f) => f,
            None => {
                let f = match frozen {
                    Some(fs) => tape.leaf(fs[pair.image].clone()),
                    None => {
                        let gv = images[pair.image].record(tape);
                        encode_on(tape, p, &gv, gcn_depth)?
                    }
                };
                feats.insert(pair.image, f);
                f
            }
        };
        terms.push(caption_loss_on(
            tape,
            &v,
            f,
            pair.sub.nodes(),
            &pair.tokens,
        )?);
    }
    tape.scaled_total(&terms, 1.0 / terms.len() as f64)
}

/// Teacher-forced training with Adam. Returns the per-step batch loss.
pub fn train_decoder(
    images: &[GraphInputs],
    pairs: &[CaptionPair],
    store: &mut ParamStore,
    opts: &DecoderTrainOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    if opts.steps == 0 {
        return Ok(vec![]);
    }
    if pairs.is_empty() || opts.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "decoder training needs pairs and a batch size".into(),
        ));
    }
    if let Some(p) = pairs.iter().find(|p| p.image >= images.len()) {
        return Err(Error::InvalidArgument(format!(
            "caption pair refers to image {} of {}",
            p.image,
            images.len()
        )));
    }
    DecoderShape::from_store(store)?;
    let features = if opts.freeze_encoder {
        Features::Frozen(
            images
                .iter()
                .map(|i| encode_inputs(i, store, opts.gcn_depth).map(|e| e.node_feats))
                .collect::<Result<_>>()?,
        )
    } else {
        Features::Joint
    };
    let frozen = match &features {
        Features::Frozen(f) => Some(f.as_slice()),
        Features::Joint => None,
    };
    let batch = opts.batch_size.min(pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let chosen: Vec<&CaptionPair> = index::sample(&mut rng, pairs.len(), batch)
            .into_iter()
            .map(|i| &pairs[i])
            .collect();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let loss = batch_loss_on(&mut tape, &p, images, &chosen, frozen, opts.gcn_depth)?;
        trace.push(tape.value(loss).item());
        let grads = tape.backward(loss)?;
        let grads = p.gradients(&grads, |n| {
            n.starts_with("dec.")
                || (!opts.freeze_encoder && (n.starts_with("fusion.") || n.starts_with("gcn.")))
        });
        store.adam_step(&grads, &opts.adam)?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{SceneGraph, SceneNode};

    pub(crate) fn dims() -> ModelDims {
        ModelDims {
            d_v: 3,
            d_e: 2,
            d_f: 3,
            gcn_depth: 1,
            h: 4,
            d_w: 2,
            d_h: 3,
            d_l: 3,
            d_a: 2,
            d_g: 2,
        }
    }

    fn setup(n: usize, seed: u64) -> (SubGraph, EncodedGraph, ParamStore) {
        let g = SceneGraph {
            image_id: "d".into(),
            nodes: (0..n)
                .map(|i| SceneNode {
                    id: i,
                    label: "x".into(),
                    visual: vec![0.0; 3],
                    bbox: None,
                })
                .collect(),
            edges: vec![],
        };
        let sub = SubGraph::new(&g, (0..n).collect(), vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let enc = EncodedGraph {
            node_feats: Tensor::from_vec(3, n, data).unwrap(),
        };
        let mut store = ParamStore::new();
        init_decoder_params(&mut store, &dims(), 6, &mut rng);
        (sub, enc, store)
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn mv(m: &Tensor, x: &[f64]) -> Vec<f64> {
        (0..m.rows())
            .map(|r| (0..m.cols()).map(|c| m.get(r, c) * x[c]).sum())
            .collect()
    }

    fn lstm_oracle(
        store: &ParamStore,
        lstm: &str,
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let z: Vec<f64> = x.iter().chain(h).copied().collect();
        let gate = |g: &str| -> Vec<f64> {
            let w = store.get(&lstm_param(lstm, "W", g)).unwrap();
            let b = store.get(&lstm_param(lstm, "b", g)).unwrap();
            mv(w, &z).iter().zip(b.data()).map(|(a, b)| a + b).collect()
        };
        let (i, f, o, gg) = (gate("i"), gate("f"), gate("o"), gate("c"));
        let mut c2 = vec![0.0; h.len()];
        let mut h2 = vec![0.0; h.len()];
        for k in 0..h.len() {
            c2[k] = sigmoid(f[k]) * c[k] + sigmoid(i[k]) * gg[k].tanh();
            h2[k] = sigmoid(o[k]) * c2[k].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn two_step_rollout_matches_scalar_oracle() {
        let (sub, enc, mut store) = setup(3, 4);
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            if name.contains(".b") {
                let t = store.get_mut(&name).unwrap();
                for (i, x) in t.data_mut().iter_mut().enumerate() {
                    *x = 0.1 * (i as f64) - 0.05;
                }
            }
        }
        let x = enc.node_feats.clone();
        let k = x.cols();
        let col = |j: usize| (0..x.rows()).map(|r| x.get(r, j)).collect::<Vec<f64>>();
        let mut r = vec![f64::NEG_INFINITY; 3];
        let mut mean = vec![0.0; 3];
        for j in 0..k {
            for (i, v) in col(j).into_iter().enumerate() {
                r[i] = r[i].max(v);
                mean[i] += v / k as f64;
            }
        }
        r.extend(mean);
        let add = |a: Vec<f64>, b: &Tensor| {
            a.iter()
                .zip(b.data())
                .map(|(x, y)| x + y)
                .collect::<Vec<f64>>()
        };
        let hidden: Vec<f64> = add(mv(store.get(G_W1).unwrap(), &r), store.get(G_B1).unwrap())
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let xs = add(
            mv(store.get(G_W2).unwrap(), &hidden),
            store.get(G_B2).unwrap(),
        );

        let (mut ha, mut ca, mut hl, mut cl) =
            (vec![0.0; 3], vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]);
        let mut dec = SubgraphDecoder::new(&sub, &enc, &store).unwrap();
        let mut state = dec.initial_state();
        for prev in [BOS, 4] {
            let e: Vec<f64> = (0..2)
                .map(|r| store.get(EMBED).unwrap().get(r, prev))
                .collect();
            let xa: Vec<f64> = hl.iter().chain(&e).chain(&xs).copied().collect();
            (ha, ca) = lstm_oracle(&store, "att", &xa, &ha, &ca);
            let whh = mv(store.get(WH).unwrap(), &ha);
            let scores: Vec<f64> = (0..k)
                .map(|j| {
                    let act: Vec<f64> = mv(store.get(WV).unwrap(), &col(j))
                        .iter()
                        .zip(&whh)
                        .map(|(a, b)| (a + b).tanh())
                        .collect();
                    mv(store.get(WA).unwrap(), &act)[0]
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let alpha: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
            let att: Vec<f64> = (0..3)
                .map(|i| (0..k).map(|j| x.get(i, j) * alpha[j]).sum())
                .collect();
            let xl: Vec<f64> = ha.iter().chain(&att).copied().collect();
            (hl, cl) = lstm_oracle(&store, "lang", &xl, &hl, &cl);
            let logits = add(
                mv(store.get(OUT_W).unwrap(), &hl),
                store.get(OUT_B).unwrap(),
            );

            let out = dec.step(&state, prev).unwrap();
            for (a, b) in out.logits.iter().zip(&logits) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            for (a, b) in out.alpha.iter().zip(&alpha) {
                assert!((a - b).abs() < 1e-12);
            }
            state = out.state;
        }
    }

    #[test]
    fn single_node_attention_is_one() {
        let (sub, enc, store) = setup(1, 2);
        let mut dec = SubgraphDecoder::new(&sub, &enc, &store).unwrap();
        let mut s = dec.initial_state();
        for prev in [BOS, 5, 4] {
            let out = dec.step(&s, prev).unwrap();
            assert_eq!(out.alpha, vec![1.0]);
            assert_eq!(out.node, 0);
            s = out.state;
        }
    }

    #[test]
    fn zero_attention_weights_give_uniform_alpha() {
        let (sub, enc, mut store) = setup(4, 3);
        for n in [WV, WH, WA] {
            store.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let mut dec = SubgraphDecoder::new(&sub, &enc, &store).unwrap();
        let s = dec.initial_state();
        let out = dec.step(&s, BOS).unwrap();
        assert!(out.alpha.iter().all(|&a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_g_mlp_gives_zero_feature() {
        let (sub, enc, mut store) = setup(2, 1);
        for n in [G_W1, G_B1, G_W2, G_B2] {
            store.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        assert!(subgraph_feature(&sub, &enc, &store)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn eos_bias_gives_empty_caption() {
        let (sub, enc, mut store) = setup(2, 5);
        store.get_mut(OUT_B).unwrap().set(EOS, 0, 100.0);
        let c = greedy_decode(&sub, &enc, &store, 8).unwrap();
        assert!(c.tokens.is_empty());
    }

    #[test]
    fn mismatched_features_rejected() {
        let (sub, _, store) = setup(2, 5);
        let enc = EncodedGraph {
            node_feats: Tensor::zeros(5, 2),
        };
        assert!(matches!(
            greedy_decode(&sub, &enc, &store, 4),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let (sub, _, mut store) = setup(2, 5);
        let before = store.values();
        let opts = DecoderTrainOptions {
            steps: 0,
            batch_size: 1,
            adam: AdamConfig::default(),
            gcn_depth: 1,
            freeze_encoder: true,
        };
        let pairs = [CaptionPair {
            image: 0,
            sub,
            tokens: vec![4, 5],
        }];
        assert!(train_decoder(&[], &pairs, &mut store, &opts, 0)
            .unwrap()
            .is_empty());
        assert_eq!(store.values(), before);
    }
}
