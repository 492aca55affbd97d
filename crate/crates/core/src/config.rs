//! Run configuration. Every field has a default so partial JSON files work.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub d_v: usize,
    pub d_e: usize,
    pub d_f: usize,
    pub gcn_depth: usize,
    /// Hidden width of the proposal-network MLP.
    pub h: usize,
    pub d_w: usize,
    /// Attention LSTM hidden size.
    pub d_h: usize,
    /// Language LSTM hidden size.
    pub d_l: usize,
    pub d_a: usize,
    pub d_g: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_v: 16,
            d_e: 8,
            d_f: 16,
            gcn_depth: 2,
            h: 8,
            d_w: 16,
            d_h: 32,
            d_l: 32,
            d_a: 16,
            d_g: 16,
        }
    }
}

impl ModelDims {
    /// Full-size dimensions (region features 2048, word vectors 300).
    pub fn full_scale() -> Self {
        ModelDims {
            d_v: 2048,
            d_e: 300,
            d_f: 1024,
            gcn_depth: 2,
            h: 512,
            d_w: 1000,
            d_h: 1000,
            d_l: 1000,
            d_a: 512,
            d_g: 512,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.d_v, self.d_e, self.d_f, self.h, self.d_w, self.d_h, self.d_l, self.d_a, self.d_g,
        ];
        if all.contains(&0) {
            return Err(Error::Validation(
                "all model dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub num: usize,
    pub max_seeds: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            num: 1000,
            max_seeds: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Node IoU above which a sampled sub-graph is labelled positive.
    pub iou_label: f64,
    pub nms: f64,
    /// Minimum noun/label similarity for a match.
    pub tau: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            iou_label: 0.75,
            nms: 0.75,
            tau: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 2,
            top_k: 3,
            temperature: 0.6,
            max_len: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sgpn_steps: usize,
    /// Sub-graphs per proposal-network batch (must be even).
    pub sgpn_batch: usize,
    pub decoder_steps: usize,
    /// Caption pairs per decoder batch.
    pub decoder_batch: usize,
    /// Keep encoder weights fixed while training the decoder.
    pub freeze_encoder: bool,
    /// Train the decoder on region-matched sub-graphs instead of caption
    /// reference sub-graphs.
    pub supervised_control: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgpn_steps: 500,
            sgpn_batch: 32,
            decoder_steps: 2000,
            decoder_batch: 8,
            freeze_encoder: true,
            supervised_control: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dims: ModelDims,
    pub optimizer: AdamConfig,
    pub sampling: SamplingConfig,
    pub thresholds: Thresholds,
    pub decode: DecodeConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let t = &self.thresholds;
        for (name, v) in [("iou_label", t.iou_label), ("nms", t.nms), ("tau", t.tau)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Validation(format!(
                    "{name} must be in (0, 1], got {v}"
                )));
            }
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Validation("learning rate must be positive".into()));
        }
        if self.sampling.num == 0 || self.sampling.max_seeds == 0 {
            return Err(Error::Validation("sampling counts must be positive".into()));
        }
        if self.train.sgpn_batch == 0 || !self.train.sgpn_batch.is_multiple_of(2) {
            return Err(Error::Validation(
                "sgpn_batch must be a positive even number".into(),
            ));
        }
        if self.decode.beam == 0 || self.decode.top_k == 0 || self.decode.temperature <= 0.0 {
            return Err(Error::Validation("decode settings must be positive".into()));
        }
        Ok(())
    }
}
