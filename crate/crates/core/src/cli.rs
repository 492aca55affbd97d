//! `subgc` command-line interface.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numeric failure, 64 usage error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelDims, RunConfig};
use crate::decompose::{sample_subgraphs, SubGraphList, SubGraphRecord};
use crate::error::{Error, Result};
use crate::fixture::{generate_fixture_corpus, FixtureSpec};
use crate::graph::{
    load_caption_corpus, load_graph_dir, tokenize, BoundingBox, CaptionEntry, EmbeddingTable,
    LoadOptions, SceneGraph,
};
use crate::matcher::{
    extract_nouns, match_nouns_to_nodes, reference_subgraph, Lexicon, SimilarityTable,
};
use crate::metrics::{
    bleu_or_zero, diversity_stats, grounding_f1, noun_iou, GroundedWord, MetricsReport,
};
use crate::model::{write_json, Model};
use crate::pipeline::{
    build_consensus_db, caption_image, control_caption, predicted_caption, DecodeMode,
    PipelineConfig, PredictedCaption, Prediction, RankMode,
};
use crate::workflow::{full_grad_check, run_decoder_training, run_sgpn_training, CaptionData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(
    name = "subgc",
    version,
    about = "Sub-graph based image captioning toolkit"
)]
pub struct Cli {
    /// Worker threads for per-image work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample neighbour sub-graphs of one scene graph.
    Sample(SampleArgs),
    /// Match a caption's nouns to graph nodes and build its reference sub-graph.
    Match(MatchArgs),
    /// Train the encoder and the sub-graph proposal network.
    TrainSgpn(TrainArgs),
    /// Train the caption decoder on top of a proposal checkpoint.
    TrainDecoder(TrainDecoderArgs),
    /// Caption one or more scene graphs.
    Caption(CaptionArgs),
    /// Caption the sub-graph that best covers a set of regions.
    Control(ControlArgs),
    /// Score predictions against reference captions.
    Eval(EvalArgs),
    /// Check analytic gradients of the full losses against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus.
    GenFixtures(GenArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    num: Option<usize>,
    #[arg(long)]
    max_seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    caption: String,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    sim: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Directory of scene-graph JSON files.
    #[arg(long)]
    graphs: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    /// Defaults to `lexicon.json` next to the captions file.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Defaults to `sim.json` next to the captions file.
    #[arg(long)]
    sim: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(short = 'o', long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Defaults to `embeddings.json` next to the captions file.
    #[arg(long)]
    emb: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct TrainDecoderArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Checkpoint produced by `train-sgpn`.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long, conflicts_with_all = ["topk", "greedy"])]
    beam: Option<usize>,
    #[arg(long, conflicts_with = "greedy")]
    topk: Option<usize>,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long, required_unless_present = "graphs", conflicts_with = "graphs")]
    graph: Option<PathBuf>,
    #[arg(long)]
    graphs: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    nms: Option<f64>,
    /// sgpn, consensus or sgpn+consensus.
    #[arg(long, default_value = "sgpn")]
    rank: String,
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[arg(long)]
    consensus_k: Option<usize>,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// `{"regions": [[x, y, w, h], ...]}`
    #[arg(long)]
    regions: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    /// Comma-separated subset of bleu, diversity, grounding, control.
    #[arg(long, default_value = "bleu,diversity")]
    metrics: String,
    /// Defaults to `lexicon.json` next to the references.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Scene graphs for grounding boxes; defaults to `graphs/` next to the references.
    #[arg(long)]
    graphs: Option<PathBuf>,
    /// Training captions for the novelty count; defaults to the references.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(short = 'o', long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 3)]
    background: usize,
    #[arg(long, default_value_t = 16)]
    d_v: usize,
    #[arg(long, default_value_t = 8)]
    d_e: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_INVALID
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let jobs = cli.jobs;
    match cli.command {
        Command::Sample(a) => sample(a),
        Command::Match(a) => match_caption(a),
        Command::TrainSgpn(a) => train_sgpn_cmd(a),
        Command::TrainDecoder(a) => train_decoder_cmd(a),
        Command::Caption(a) => caption(a, jobs),
        Command::Control(a) => control(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GenFixtures(a) => gen_fixtures(a),
    }
}

/// Flag, then `SUBGC_SEED`, then `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("SUBGC_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("SUBGC_SEED is not an integer: `{v}`"))),
        Err(_) => Ok(fallback),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map(RunConfig::load)
        .unwrap_or_else(|| Ok(RunConfig::default()))
}

fn emit<T: Serialize>(output: Option<&Path>, value: &T) -> Result<()> {
    match output {
        Some(p) => write_json(p, value),
        None => {
            use std::io::Write;
            let text = serde_json::to_string_pretty(value)?;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    Err(Error::io("<stdout>", e))
                }
                _ => Ok(()),
            }
        }
    }
}

/// Loads a graph, taking the feature size from its first node.
fn read_graph(path: &Path) -> Result<SceneGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: SceneGraph = serde_json::from_str(&text)?;
    SceneGraph::from_json(&text, raw.d_v().unwrap_or(0))
}

fn sibling(of: &Path, name: &str) -> PathBuf {
    of.parent().unwrap_or(Path::new(".")).join(name)
}

fn sample(a: SampleArgs) -> Result<i32> {
    let cfg = load_config(a.config.as_deref())?;
    let g = read_graph(&a.graph)?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let subs = sample_subgraphs(
        &g,
        a.num.unwrap_or(cfg.sampling.num),
        seed,
        a.max_seeds.unwrap_or(cfg.sampling.max_seeds),
    )?;
    emit(
        a.output.as_deref(),
        &SubGraphList::from_subgraphs(&g.image_id, subs.iter().map(|s| (s, None))),
    )?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct MatchOutput {
    image_id: String,
    nouns: Vec<String>,
    matched: Vec<usize>,
    reference: Option<SubGraphRecord>,
}

fn match_caption(a: MatchArgs) -> Result<i32> {
    let cfg = load_config(a.config.as_deref())?;
    let g = read_graph(&a.graph)?;
    let lex = Lexicon::load(&a.lexicon)?;
    let sim = SimilarityTable::load(&a.sim)?;
    let tau = a.tau.unwrap_or(cfg.thresholds.tau);
    let words = tokenize(&a.caption);
    let nouns = extract_nouns(&words, &lex);
    let matched = match_nouns_to_nodes(&nouns, &g, &sim, tau)
        .into_iter()
        .collect();
    let reference = reference_subgraph(&words, &g, &lex, &sim, tau)?.map(|s| SubGraphRecord {
        nodes: s.nodes().to_vec(),
        edges: s.edges().to_vec(),
        score: None,
    });
    emit(
        a.output.as_deref(),
        &MatchOutput {
            image_id: g.image_id.clone(),
            nouns,
            matched,
            reference,
        },
    )?;
    Ok(EXIT_OK)
}

struct Corpus {
    graphs: Vec<SceneGraph>,
    captions: Vec<CaptionEntry>,
    lexicon: Lexicon,
    similarity: SimilarityTable,
}

impl Corpus {
    fn load(a: &CorpusArgs, d_v: usize) -> Result<Self> {
        Ok(Corpus {
            graphs: load_graph_dir(&a.graphs, &LoadOptions::new(d_v))?,
            captions: load_caption_corpus(&a.captions)?,
            lexicon: Lexicon::load(
                a.lexicon
                    .clone()
                    .unwrap_or_else(|| sibling(&a.captions, "lexicon.json")),
            )?,
            similarity: SimilarityTable::load(
                a.sim
                    .clone()
                    .unwrap_or_else(|| sibling(&a.captions, "sim.json")),
            )?,
        })
    }

    fn data(&self) -> CaptionData<'_> {
        CaptionData {
            graphs: &self.graphs,
            captions: &self.captions,
            lexicon: &self.lexicon,
            similarity: &self.similarity,
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, t: &TrainOverrides, decoder: bool) -> Result<u64> {
    if let Some(lr) = t.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(steps) = t.steps {
        if decoder {
            cfg.train.decoder_steps = steps;
        } else {
            cfg.train.sgpn_steps = steps;
        }
    }
    cfg.validate()?;
    resolve_seed(t.seed, cfg.seed)
}

fn report_loss(stage: &str, trace: &[f64]) {
    if let Some(last) = trace.last() {
        eprintln!("{stage}: {} steps, final loss {last:.6}", trace.len());
    }
}

fn train_sgpn_cmd(a: TrainArgs) -> Result<i32> {
    let mut cfg = load_config(a.train.config.as_deref())?;
    let seed = apply_overrides(&mut cfg, &a.train, false)?;
    let emb = EmbeddingTable::load(
        a.emb
            .clone()
            .unwrap_or_else(|| sibling(&a.corpus.captions, "embeddings.json")),
    )?;
    let corpus = Corpus::load(&a.corpus, cfg.dims.d_v)?;
    let mut model = Model::init(cfg.clone(), emb, None, seed)?;
    let trace = run_sgpn_training(&corpus.data(), &mut model, &cfg, seed)?;
    report_loss("train-sgpn", &trace);
    model.consensus_db = Some(build_consensus_db(&corpus.graphs, &corpus.captions));
    model.save(&a.train.output)?;
    Ok(EXIT_OK)
}

fn train_decoder_cmd(a: TrainDecoderArgs) -> Result<i32> {
    let mut model = Model::load(&a.ckpt)?;
    let mut cfg = match &a.train.config {
        Some(p) => RunConfig::load(p)?,
        None => model.config.clone(),
    };
    if cfg.dims != model.config.dims {
        return Err(Error::CheckpointMismatch(
            "config dimensions differ from the checkpoint's".into(),
        ));
    }
    let seed = apply_overrides(&mut cfg, &a.train, true)?;
    let corpus = Corpus::load(&a.corpus, cfg.dims.d_v)?;
    if !model.has_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.add_decoder(corpus.data().vocabulary(), &mut rng);
    }
    model.config = cfg.clone();
    let trace = run_decoder_training(&corpus.data(), &mut model, &cfg, seed)?;
    report_loss("train-decoder", &trace);
    model.consensus_db = Some(build_consensus_db(&corpus.graphs, &corpus.captions));
    model.save(&a.train.output)?;
    Ok(EXIT_OK)
}

fn pipeline_config(model: &Model, d: &DecodeArgs) -> Result<PipelineConfig> {
    let cfg = &model.config;
    let mut p = PipelineConfig::from_run_config(cfg);
    p.seed = resolve_seed(d.seed, cfg.seed)?;
    if let Some(n) = d.num {
        p.num_samples = n;
    }
    if let Some(m) = d.max_len {
        p.max_len = m;
    }
    p.decode_mode = if d.greedy {
        DecodeMode::Greedy
    } else if let Some(k) = d.topk {
        DecodeMode::TopK {
            k,
            temperature: d.temp.unwrap_or(cfg.decode.temperature),
            seed: p.seed,
        }
    } else {
        DecodeMode::Beam(d.beam.unwrap_or(cfg.decode.beam))
    };
    Ok(p)
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
}

fn caption(a: CaptionArgs, jobs: Option<usize>) -> Result<i32> {
    let model = Model::load(&a.ckpt)?;
    let vocab = model.vocab()?;
    let mut cfg = pipeline_config(&model, &a.decode)?;
    cfg.rank_mode = a.rank.parse::<RankMode>()?;
    cfg.top_n = a.top;
    if let Some(t) = a.nms {
        cfg.nms_threshold = t;
    }
    if let Some(k) = a.consensus_k {
        cfg.consensus_k = k;
    }
    cfg.validate()?;
    let db = model.consensus_db.as_deref();
    let run = |g: &SceneGraph| -> Result<Prediction> {
        Ok(caption_image(g, &model, &cfg, db)?.to_prediction(vocab))
    };
    if let Some(path) = &a.graph {
        emit(a.output.as_deref(), &run(&read_graph(path)?)?)?;
    } else if let Some(dir) = &a.graphs {
        let graphs = load_graph_dir(dir, &LoadOptions::new(model.config.dims.d_v))?;
        let preds = thread_pool(jobs)?
            .install(|| graphs.par_iter().map(run).collect::<Result<Vec<_>>>())?;
        emit(a.output.as_deref(), &preds)?;
    }
    Ok(EXIT_OK)
}

#[derive(Deserialize)]
struct RegionsFile {
    regions: Vec<[f64; 4]>,
}

#[derive(Serialize)]
struct ControlOutput {
    image_id: String,
    matched: Vec<usize>,
    caption: PredictedCaption,
}

fn control(a: ControlArgs) -> Result<i32> {
    let model = Model::load(&a.ckpt)?;
    let cfg = pipeline_config(&model, &a.decode)?;
    let g = read_graph(&a.graph)?;
    let text = std::fs::read_to_string(&a.regions).map_err(|e| Error::io(&a.regions, e))?;
    let regions = serde_json::from_str::<RegionsFile>(&text)?
        .regions
        .into_iter()
        .map(BoundingBox::try_from)
        .collect::<Result<Vec<_>>>()?;
    let out = control_caption(&g, &model, &regions, &cfg)?;
    emit(
        a.output.as_deref(),
        &ControlOutput {
            image_id: g.image_id.clone(),
            matched: out.matched,
            caption: predicted_caption(&out.caption, &out.sub.sub, out.sub.score, model.vocab()?),
        },
    )?;
    Ok(EXIT_OK)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PredFile {
    Many(Vec<Prediction>),
    One(Prediction),
}

fn eval(a: EvalArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&a.pred).map_err(|e| Error::io(&a.pred, e))?;
    let preds = match serde_json::from_str::<PredFile>(&text)? {
        PredFile::Many(v) => v,
        PredFile::One(p) => vec![p],
    };
    let refs = load_caption_corpus(&a.refs)?;
    let find_refs = |id: &str| -> Result<Vec<Vec<String>>> {
        refs.iter()
            .find(|r| r.image_id == id)
            .map(|r| r.captions.iter().map(|c| tokenize(c)).collect())
            .ok_or_else(|| Error::Validation(format!("no reference captions for image `{id}`")))
    };
    let top1 = |p: &Prediction| {
        p.captions
            .first()
            .map(|c| c.tokens.clone())
            .unwrap_or_default()
    };
    let mut report = MetricsReport {
        images: preds.len(),
        captions: preds.iter().map(|p| p.captions.len()).sum(),
        ..Default::default()
    };
    let mut lexicon: Option<Lexicon> = None;
    let mut lex = || -> Result<Lexicon> {
        if lexicon.is_none() {
            lexicon = Some(Lexicon::load(
                a.lexicon
                    .clone()
                    .unwrap_or_else(|| sibling(&a.refs, "lexicon.json")),
            )?);
        }
        Ok(lexicon.clone().expect("just loaded"))
    };
    let n = preds.len().max(1) as f64;
    for metric in a
        .metrics
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
    {
        match metric {
            "bleu" => {
                for k in 1..=4 {
                    let mut total = 0.0;
                    for p in &preds {
                        total += bleu_or_zero(&top1(p), &find_refs(&p.image_id)?, k)?;
                    }
                    report.values.insert(format!("bleu{k}"), total / n);
                }
            }
            "diversity" => {
                let samples: Vec<Vec<Vec<String>>> = preds
                    .iter()
                    .map(|p| p.captions.iter().map(|c| c.tokens.clone()).collect())
                    .collect();
                let best5: Vec<Vec<Vec<String>>> = samples
                    .iter()
                    .map(|s| s.iter().take(5).cloned().collect())
                    .collect();
                let train_src = match &a.train {
                    Some(p) => load_caption_corpus(p)?,
                    None => refs.clone(),
                };
                let train: BTreeSet<Vec<String>> = train_src
                    .iter()
                    .flat_map(|e| e.captions.iter().map(|c| tokenize(c)))
                    .collect();
                report.merge(diversity_stats(&samples, &best5, &train)?);
            }
            "grounding" => {
                let lex = lex()?;
                let dir = a
                    .graphs
                    .clone()
                    .unwrap_or_else(|| sibling(&a.refs, "graphs"));
                let mut words = Vec::new();
                let mut gts = Vec::new();
                for p in &preds {
                    let g = read_graph(&dir.join(format!("{}.json", p.image_id)))?;
                    let entry = refs.iter().find(|r| r.image_id == p.image_id);
                    gts.push(entry.and_then(|e| e.grounding.clone()).unwrap_or_default());
                    let mut ws = Vec::new();
                    if let Some(c) = p.captions.first() {
                        for al in &c.alignments {
                            let word = c.tokens.get(al.t).cloned().unwrap_or_default();
                            if lex.is_noun(&word) {
                                let bbox = g.nodes.get(al.node).and_then(|n| n.bbox);
                                ws.push(GroundedWord { word, bbox });
                            }
                        }
                    }
                    words.push(ws);
                }
                let (all, loc) = grounding_f1(&words, &gts, a.iou)?;
                report.values.insert("f1_all".into(), all);
                report.values.insert("f1_loc".into(), loc);
            }
            "control" => {
                let lex = lex()?;
                let mut total = 0.0;
                for p in &preds {
                    let cand = top1(p);
                    total += find_refs(&p.image_id)?
                        .iter()
                        .map(|r| noun_iou(&cand, r, &lex))
                        .fold(0.0, f64::max);
                }
                report.values.insert("noun_iou".into(), total / n);
            }
            other => return Err(Error::UnknownMetric(other.to_string())),
        }
    }
    emit(a.output.as_deref(), &report)?;
    Ok(EXIT_OK)
}

/// Dimensions used by `gradcheck` when no config is given.
pub fn gradcheck_dims() -> ModelDims {
    ModelDims {
        d_v: 4,
        d_e: 3,
        d_f: 6,
        gcn_depth: 2,
        h: 4,
        d_w: 4,
        d_h: 8,
        d_l: 8,
        d_a: 4,
        d_g: 4,
    }
}

#[derive(Serialize)]
struct GradcheckOutput {
    sgpn: crate::tensor::GradCheckReport,
    decoder: crate::tensor::GradCheckReport,
    passed: bool,
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            dims: gradcheck_dims(),
            ..Default::default()
        },
    };
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let r = full_grad_check(&cfg, seed, a.h, a.tol)?;
    let passed = r.passed();
    emit(
        a.output.as_deref(),
        &GradcheckOutput {
            sgpn: r.sgpn,
            decoder: r.decoder,
            passed,
        },
    )?;
    Ok(if passed { EXIT_OK } else { EXIT_NUMERIC })
}

fn gen_fixtures(a: GenArgs) -> Result<i32> {
    let spec = FixtureSpec {
        images: a.images,
        background: a.background,
        d_v: a.d_v,
        d_e: a.d_e,
        noise: a.noise,
        seed: resolve_seed(a.seed, 1)?,
    };
    generate_fixture_corpus(&spec)?.write(&a.out)?;
    Ok(EXIT_OK)
}
