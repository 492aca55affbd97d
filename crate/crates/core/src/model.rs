//! Trained model bundle and its JSON checkpoint.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::{init_decoder_params, DecoderShape};
use crate::encoder::{encode_inputs, gcn_param, init_encoder_params, EncodedGraph, GraphInputs};
use crate::error::{Error, Result};
use crate::graph::{EmbeddingTable, SceneGraph, Vocabulary};
use crate::pipeline::ConsensusEntry;
use crate::sgpn::{init_sgpn_params, SgpnParams};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Pretty JSON plus a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub params: BTreeMap<String, Tensor>,
    pub embeddings: EmbeddingTable,
    /// Decoder token list; absent until a decoder has been trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus_db: Option<Vec<ConsensusEntry>>,
}

/// Parameters plus everything needed to run them on new graphs.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub embeddings: EmbeddingTable,
    pub vocab: Option<Vocabulary>,
    pub consensus_db: Option<Vec<ConsensusEntry>>,
}

fn mismatch(msg: String) -> Error {
    Error::CheckpointMismatch(msg)
}

impl Model {
    /// Fresh encoder and proposal weights; decoder weights too when a
    /// vocabulary is given.
    pub fn init(
        config: RunConfig,
        embeddings: EmbeddingTable,
        vocab: Option<Vocabulary>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if embeddings.dim != config.dims.d_e {
            return Err(Error::DimMismatch(format!(
                "embeddings have dimension {}, config says d_e = {}",
                embeddings.dim, config.dims.d_e
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_encoder_params(&mut store, &config.dims, &mut rng);
        init_sgpn_params(&mut store, &config.dims, &mut rng);
        let mut model = Model {
            config,
            store,
            embeddings,
            vocab: None,
            consensus_db: None,
        };
        if let Some(v) = vocab {
            model.add_decoder(v, &mut rng);
        }
        Ok(model)
    }

    pub fn add_decoder(&mut self, vocab: Vocabulary, rng: &mut ChaCha8Rng) {
        init_decoder_params(&mut self.store, &self.config.dims, vocab.len(), rng);
        self.vocab = Some(vocab);
    }

    pub fn has_decoder(&self) -> bool {
        self.vocab.is_some()
    }

    pub fn vocab(&self) -> Result<&Vocabulary> {
        self.vocab
            .as_ref()
            .ok_or_else(|| mismatch("checkpoint has no trained decoder".into()))
    }

    pub fn sgpn(&self) -> Result<SgpnParams> {
        SgpnParams::from_store(&self.store)
    }

    /// Checks that the graph's features fit this model.
    pub fn check_graph(&self, g: &SceneGraph) -> Result<()> {
        if g.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let want = self.store.get(crate::encoder::FUSION_W1)?.cols();
        match g.d_v() {
            Some(d) if d != want => Err(mismatch(format!(
                "graph `{}` has visual features of size {d}, checkpoint expects {want}",
                g.image_id
            ))),
            _ => Ok(()),
        }
    }

    pub fn encode(&self, g: &SceneGraph) -> Result<(GraphInputs, EncodedGraph)> {
        self.check_graph(g)?;
        let inputs = GraphInputs::new(g, &self.embeddings)?;
        let enc = encode_inputs(&inputs, &self.store, self.config.dims.gcn_depth)?;
        Ok((inputs, enc))
    }

    fn validate(&self) -> Result<()> {
        let d = &self.config.dims;
        let mut want: Vec<(String, [usize; 2])> = vec![
            (crate::encoder::FUSION_W1.into(), [d.d_f, d.d_v]),
            (crate::encoder::FUSION_W2.into(), [d.d_f, d.d_e]),
            (crate::encoder::FUSION_W3.into(), [d.d_f, d.d_e]),
            (crate::sgpn::W1.into(), [d.h, 2 * d.d_f]),
            (crate::sgpn::B1.into(), [d.h, 1]),
            (crate::sgpn::W2.into(), [1, d.h]),
            (crate::sgpn::B2.into(), [1, 1]),
        ];
        for l in 0..d.gcn_depth {
            for w in ["W_ps", "W_po", "W_sp", "W_op"] {
                want.push((gcn_param(l, w), [d.d_f, d.d_f]));
            }
        }
        for (name, shape) in want {
            let got = self
                .store
                .get(&name)
                .map_err(|_| mismatch(format!("missing parameter `{name}`")))?
                .shape();
            if got != shape {
                return Err(mismatch(format!(
                    "`{name}` has shape {got:?}, config implies {shape:?}"
                )));
            }
        }
        if self.embeddings.dim != d.d_e {
            return Err(mismatch(format!(
                "embedding dimension {} does not match d_e = {}",
                self.embeddings.dim, d.d_e
            )));
        }
        if let Some(v) = &self.vocab {
            let s = DecoderShape::from_store(&self.store).map_err(|e| mismatch(e.to_string()))?;
            if s.vocab != v.len() || s.d_f != d.d_f {
                return Err(mismatch(format!(
                    "decoder expects {} tokens and d_f = {}, checkpoint has {} tokens and d_f = {}",
                    s.vocab,
                    s.d_f,
                    v.len(),
                    d.d_f
                )));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            params: self.store.values(),
            embeddings: self.embeddings.clone(),
            vocab: self.vocab.as_ref().map(|v| v.tokens().to_vec()),
            consensus_db: self.consensus_db.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format_version != FORMAT_VERSION {
            return Err(mismatch(format!(
                "unsupported checkpoint format {}",
                ckpt.format_version
            )));
        }
        ckpt.embeddings.validate()?;
        let model = Model {
            config: ckpt.config,
            store: ParamStore::from_values(ckpt.params),
            embeddings: ckpt.embeddings,
            vocab: ckpt.vocab.map(Vocabulary::from_tokens).transpose()?,
            consensus_db: ckpt.consensus_db,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, &self.to_checkpoint())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_checkpoint(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelDims;

    fn model() -> Model {
        let dims = ModelDims {
            d_v: 2,
            d_e: 2,
            d_f: 3,
            gcn_depth: 1,
            h: 2,
            d_w: 2,
            d_h: 2,
            d_l: 2,
            d_a: 2,
            d_g: 2,
        };
        let cfg = RunConfig {
            dims,
            ..Default::default()
        };
        let emb = EmbeddingTable {
            dim: 2,
            unk: vec![0.0, 0.0],
            entries: BTreeMap::new(),
        };
        Model::init(cfg, emb, Some(Vocabulary::new(["a", "b"])), 3).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.to_checkpoint(), m.to_checkpoint());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"format_version\": 1"));
        assert!(text.contains("\"dec.att.W_i\""));
    }

    #[test]
    fn wrong_shapes_are_a_mismatch() {
        let mut ckpt = model().to_checkpoint();
        ckpt.config.dims.d_f = 4;
        assert!(matches!(
            Model::from_checkpoint(ckpt),
            Err(Error::CheckpointMismatch(_))
        ));
        let mut ckpt = model().to_checkpoint();
        ckpt.format_version = 2;
        assert!(matches!(
            Model::from_checkpoint(ckpt),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
