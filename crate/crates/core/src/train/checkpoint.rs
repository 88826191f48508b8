//! Binary checkpoint: u64 little-endian header length, JSON header, then
//! raw little-endian f32 payloads in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sedd_tensor::Tensor;

use super::trainer::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, ArTransformer, ParamStore, ScoreModel, ScoreTransformer, TabularScore};
use crate::text::Vocab;

pub const CHECKPOINT_FORMAT: &str = "sedd-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Training RNG: every step draws from stream `step` of a ChaCha8 generator
/// seeded with `seed`, so the step count fixes the position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_stream: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub architecture: Architecture,
    pub vocab: Option<Vocab>,
    pub config: Option<TrainConfig>,
    pub step: u64,
    pub rng: Option<RngState>,
    pub optimizer: Option<OptimizerState>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

/// A model restored from a checkpoint.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Score(ScoreTransformer<f32>),
    Autoregressive(ArTransformer<f32>),
    Tabular(TabularScore<f32>),
}

impl AnyModel {
    pub fn architecture(&self) -> Architecture {
        match self {
            Self::Score(m) => Architecture::Score(m.config.clone()),
            Self::Autoregressive(m) => Architecture::Autoregressive(m.config.clone()),
            Self::Tabular(m) => Architecture::Tabular(m.config.clone()),
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        match self {
            Self::Score(m) => &m.params,
            Self::Autoregressive(m) => &m.params,
            Self::Tabular(m) => &m.params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().numel()
    }

    pub fn as_score_model(&self) -> Option<&dyn ScoreModel> {
        match self {
            Self::Score(m) => Some(m),
            Self::Tabular(m) => Some(m),
            Self::Autoregressive(_) => None,
        }
    }

    fn from_params(arch: &Architecture, params: ParamStore<f32>) -> Result<Self> {
        Ok(match arch {
            Architecture::Score(c) => Self::Score(ScoreTransformer::from_params(c.clone(), params)?),
            Architecture::Autoregressive(c) => Self::Autoregressive(ArTransformer::from_params(c.clone(), params)?),
            Architecture::Tabular(c) => Self::Tabular(TabularScore::from_params(c.clone(), params)?),
        })
    }
}

const PARAM_PREFIX: &str = "param/";
const FIRST_PREFIX: &str = "adam.m/";
const SECOND_PREFIX: &str = "adam.v/";

impl Checkpoint {
    /// Parameters only, no optimizer state.
    pub fn from_model(model: &AnyModel, vocab: Option<Vocab>) -> Self {
        let mut ck = Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                architecture: model.architecture(),
                vocab,
                config: None,
                step: 0,
                rng: None,
                optimizer: None,
                tensors: Vec::new(),
            },
            tensors: Vec::new(),
        };
        ck.push_group(PARAM_PREFIX, model.params().names(), model.params().tensors());
        ck
    }

    pub(crate) fn push_group(&mut self, prefix: &str, names: &[String], tensors: &[Tensor<f32>]) {
        for (n, t) in names.iter().zip(tensors) {
            self.header.tensors.push(TensorEntry {
                name: format!("{prefix}{n}"),
                shape: t.shape().to_vec(),
            });
            self.tensors.push(t.clone());
        }
    }

    fn group(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.header
            .tensors
            .iter()
            .zip(&self.tensors)
            .filter_map(|(e, t)| e.name.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    pub fn model(&self) -> Result<AnyModel> {
        AnyModel::from_params(&self.header.architecture, ParamStore::from_named(self.group(PARAM_PREFIX)))
    }

    /// Adam first and second moments, if saved.
    pub fn moments(&self) -> Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
        let m: Vec<_> = self.group(FIRST_PREFIX).into_iter().map(|x| x.1).collect();
        let v: Vec<_> = self.group(SECOND_PREFIX).into_iter().map(|x| x.1).collect();
        (!m.is_empty()).then_some((m, v))
    }

    pub(crate) fn push_moments(&mut self, names: &[String], first: &[Tensor<f32>], second: &[Tensor<f32>]) {
        self.push_group(FIRST_PREFIX, names, first);
        self.push_group(SECOND_PREFIX, names, second);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.tensors.iter().map(|t| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(8 + header.len() + payload);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated length prefix"))?.try_into().unwrap();
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(&format!("unsupported format {:?}", header.format)));
        }
        let mut payload = &bytes[8 + hlen..];
        let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[n * 4..];
            tensors.push(Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
