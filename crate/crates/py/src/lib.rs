//! Python bindings for `subgc`.
//!
//! Graphs, sub-graphs and trained models are exposed as classes; structured
//! outputs (predictions, metric reports) come back as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use subgc::config::RunConfig;
use subgc::decompose::ScoredSubGraph;
use subgc::fixture::{generate_fixture_corpus, FixtureSpec};
use subgc::graph::{load_caption_corpus, load_graph_dir, EmbeddingTable, LoadOptions};
use subgc::matcher::{Lexicon, SimilarityTable};
use subgc::pipeline::{caption_image, DecodeMode, PipelineConfig, RankMode};
use subgc::workflow::{run_decoder_training, run_sgpn_training, CaptionData};

fn py_err(e: subgc::Error) -> PyErr {
    match e {
        subgc::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_numeric() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for subgc::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// A validated scene graph.
#[pyclass(module = "subgc", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct SceneGraph {
    inner: subgc::graph::SceneGraph,
}

#[pymethods]
impl SceneGraph {
    #[staticmethod]
    fn from_json(text: &str, d_v: usize) -> PyResult<Self> {
        Ok(SceneGraph {
            inner: subgc::graph::SceneGraph::from_json(text, d_v).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf, d_v: usize) -> PyResult<Self> {
        Ok(SceneGraph {
            inner: subgc::graph::load_scene_graph(path, d_v).py()?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().py()
    }

    #[getter]
    fn image_id(&self) -> &str {
        &self.inner.image_id
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.nodes.iter().map(|n| n.label.clone()).collect()
    }

    /// `(src, dst, predicate)` per edge.
    #[getter]
    fn triplets(&self) -> Vec<(usize, usize, String)> {
        self.inner
            .edges
            .iter()
            .map(|e| (e.src, e.dst, e.predicate.clone()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.num_nodes()
    }

    fn __repr__(&self) -> String {
        format!(
            "SceneGraph({:?}, nodes={}, edges={})",
            self.inner.image_id,
            self.inner.num_nodes(),
            self.inner.num_edges()
        )
    }
}

#[pyclass(module = "subgc", frozen, eq, hash, from_py_object)]
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SubGraph {
    inner: subgc::decompose::SubGraph,
}

#[pymethods]
impl SubGraph {
    #[new]
    fn new(graph: &SceneGraph, nodes: Vec<usize>, edges: Vec<usize>) -> PyResult<Self> {
        Ok(SubGraph {
            inner: subgc::decompose::SubGraph::new(&graph.inner, nodes, edges).py()?,
        })
    }

    #[getter]
    fn nodes(&self) -> Vec<usize> {
        self.inner.nodes().to_vec()
    }

    #[getter]
    fn edges(&self) -> Vec<usize> {
        self.inner.edges().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "SubGraph(nodes={:?}, edges={:?})",
            self.inner.nodes(),
            self.inner.edges()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (graph, num=1000, seed=0, max_seeds=3))]
fn sample_subgraphs(
    graph: &SceneGraph,
    num: usize,
    seed: u64,
    max_seeds: usize,
) -> PyResult<Vec<SubGraph>> {
    Ok(
        subgc::decompose::sample_subgraphs(&graph.inner, num, seed, max_seeds)
            .py()?
            .into_iter()
            .map(|inner| SubGraph { inner })
            .collect(),
    )
}

#[pyfunction]
fn node_iou(a: &SubGraph, b: &SubGraph) -> PyResult<f64> {
    subgc::decompose::node_iou(&a.inner, &b.inner).py()
}

/// Greedy suppression; returns the kept `(sub-graph, score)` pairs.
#[pyfunction]
fn nms(subs: Vec<SubGraph>, scores: Vec<f64>, threshold: f64) -> PyResult<Vec<(SubGraph, f64)>> {
    if subs.len() != scores.len() {
        return Err(PyValueError::new_err("subs and scores differ in length"));
    }
    let cands: Vec<ScoredSubGraph> = subs
        .into_iter()
        .zip(scores)
        .map(|(s, score)| ScoredSubGraph {
            sub: s.inner,
            score,
        })
        .collect();
    Ok(subgc::decompose::nms(&cands, threshold)
        .into_iter()
        .map(|c| (SubGraph { inner: c.sub }, c.score))
        .collect())
}

fn words(s: Vec<String>) -> Vec<String> {
    s.iter().flat_map(|w| subgc::graph::tokenize(w)).collect()
}

/// Sentence BLEU-`n`; captions are token lists or whole strings.
#[pyfunction]
#[pyo3(signature = (candidate, references, n=4))]
fn bleu(candidate: Vec<String>, references: Vec<Vec<String>>, n: usize) -> PyResult<f64> {
    let refs: Vec<Vec<String>> = references.into_iter().map(words).collect();
    subgc::metrics::bleu_or_zero(&words(candidate), &refs, n).py()
}

#[pyfunction]
fn div_n(captions: Vec<Vec<String>>, n: usize) -> f64 {
    let set: Vec<Vec<String>> = captions.into_iter().map(words).collect();
    subgc::metrics::div_n(&set, n)
}

#[pyfunction]
fn mbleu4(captions: Vec<Vec<String>>) -> PyResult<f64> {
    let set: Vec<Vec<String>> = captions.into_iter().map(words).collect();
    subgc::metrics::mbleu4(&set).py()
}

#[pyfunction]
#[pyo3(signature = (out_dir, images=20, background=3, seed=1))]
fn generate_fixtures(
    out_dir: PathBuf,
    images: usize,
    background: usize,
    seed: u64,
) -> PyResult<()> {
    let spec = FixtureSpec {
        images,
        background,
        seed,
        ..Default::default()
    };
    generate_fixture_corpus(&spec).py()?.write(out_dir).py()
}

/// Gradient check of both training losses: `(passed, sgpn_err, decoder_err)`.
#[pyfunction]
#[pyo3(signature = (seed=7, h=1e-5, tol=1e-4))]
fn gradcheck(seed: u64, h: f64, tol: f64) -> PyResult<(bool, f64, f64)> {
    let cfg = RunConfig {
        dims: subgc::cli::gradcheck_dims(),
        ..Default::default()
    };
    let r = subgc::workflow::full_grad_check(&cfg, seed, h, tol).py()?;
    Ok((r.passed(), r.sgpn.max_rel_error, r.decoder.max_rel_error))
}

/// Encoder, proposal network and decoder with their embeddings.
#[pyclass(module = "subgc", frozen)]
pub struct Model {
    inner: subgc::model::Model,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: subgc::model::Model::load(path).py()?,
        })
    }

    /// Trains both stages on a corpus directory laid out like
    /// `generate_fixtures` output.
    #[staticmethod]
    #[pyo3(signature = (corpus_dir, config=None, seed=0))]
    fn train(
        py: Python<'_>,
        corpus_dir: PathBuf,
        config: Option<PathBuf>,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = match config {
            Some(p) => RunConfig::load(p).py()?,
            None => RunConfig::default(),
        };
        let inner = py.detach(|| -> subgc::Result<subgc::model::Model> {
            let graphs =
                load_graph_dir(corpus_dir.join("graphs"), &LoadOptions::new(cfg.dims.d_v))?;
            let captions = load_caption_corpus(corpus_dir.join("captions.json"))?;
            let lexicon = Lexicon::load(corpus_dir.join("lexicon.json"))?;
            let similarity = SimilarityTable::load(corpus_dir.join("sim.json"))?;
            let emb = EmbeddingTable::load(corpus_dir.join("embeddings.json"))?;
            let data = CaptionData {
                graphs: &graphs,
                captions: &captions,
                lexicon: &lexicon,
                similarity: &similarity,
            };
            let mut model =
                subgc::model::Model::init(cfg.clone(), emb, Some(data.vocabulary()), seed)?;
            run_sgpn_training(&data, &mut model, &cfg, seed)?;
            run_decoder_training(&data, &mut model, &cfg, seed)?;
            model.consensus_db = Some(subgc::pipeline::build_consensus_db(&graphs, &captions));
            Ok(model)
        });
        Ok(Model { inner: inner.py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn has_decoder(&self) -> bool {
        self.inner.has_decoder()
    }

    /// Proposal-network probability that `sub` is caption-worthy.
    fn score(&self, graph: &SceneGraph, sub: &SubGraph) -> PyResult<f64> {
        let (_, enc) = self.inner.encode(&graph.inner).py()?;
        subgc::sgpn::score_subgraph(&sub.inner, &enc, &self.inner.sgpn().py()?).py()
    }

    /// Ranked, grounded captions for one graph as a JSON prediction record.
    #[pyo3(signature = (graph, nms=None, rank="sgpn", top=5, beam=None, topk=None, temperature=None, seed=None))]
    #[allow(clippy::too_many_arguments)]
    fn caption(
        &self,
        py: Python<'_>,
        graph: &SceneGraph,
        nms: Option<f64>,
        rank: &str,
        top: usize,
        beam: Option<usize>,
        topk: Option<usize>,
        temperature: Option<f64>,
        seed: Option<u64>,
    ) -> PyResult<String> {
        let run = &self.inner.config;
        let mut cfg = PipelineConfig::from_run_config(run);
        cfg.rank_mode = rank.parse::<RankMode>().py()?;
        cfg.top_n = top;
        if let Some(t) = nms {
            cfg.nms_threshold = t;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.decode_mode = match topk {
            Some(k) => DecodeMode::TopK {
                k,
                temperature: temperature.unwrap_or(run.decode.temperature),
                seed: cfg.seed,
            },
            None => DecodeMode::Beam(beam.unwrap_or(run.decode.beam)),
        };
        let vocab = self.inner.vocab().py()?;
        let pred = py.detach(|| {
            caption_image(
                &graph.inner,
                &self.inner,
                &cfg,
                self.inner.consensus_db.as_deref(),
            )
            .map(|r| r.to_prediction(vocab))
        });
        serde_json::to_string(&pred.py()?).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pymodule]
#[pyo3(name = "subgc")]
fn subgc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SceneGraph>()?;
    m.add_class::<SubGraph>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(sample_subgraphs, m)?)?;
    m.add_function(wrap_pyfunction!(node_iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(div_n, m)?)?;
    m.add_function(wrap_pyfunction!(mbleu4, m)?)?;
    m.add_function(wrap_pyfunction!(generate_fixtures, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
