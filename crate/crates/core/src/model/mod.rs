//! Score estimators and the autoregressive baseline.

mod ar;
mod layers;
mod params;
mod score_net;
mod tabular;

pub use ar::{ArConfig, ArTransformer, KvCache};
pub use params::{ParamStore, ParamInit};
pub use score_net::{ScoreNetConfig, ScoreTransformer};
pub use tabular::{TabularConfig, TabularScore};

pub(crate) use ar::log_softmax_at;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Per-position, per-token positive ratio estimates, `len × vocab`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    len: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl ScoreField {
    pub fn new(len: usize, vocab: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != len * vocab {
            return invalid(format!(
                "score field of {} values does not match {len}×{vocab}",
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::NonPositiveScore {
                value: values[i],
                position: i / vocab,
                token: i % vocab,
            });
        }
        Ok(Self { len, vocab, values })
    }

    /// Exponentiate log-scores (computed in f64).
    pub fn from_log<T: Copy + Into<f64>>(len: usize, vocab: usize, logs: &[T]) -> Result<Self> {
        Self::new(len, vocab, logs.iter().map(|&v| v.into().exp()).collect())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn get(&self, i: usize, y: usize) -> f64 {
        self.values[i * self.vocab + y]
    }
}

/// Anything that maps (noisy tokens, σ̄) to a score field.
pub trait ScoreModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Longest sequence the model accepts.
    fn context_len(&self) -> usize;

    /// One forward pass over a batch; each sequence has its own σ̄.
    fn score_batch(&self, batch: &[Vec<usize>], sigma_bars: &[f64]) -> Result<Vec<ScoreField>>;

    fn score(&self, tokens: &[usize], sigma_bar: f64) -> Result<ScoreField> {
        let mut out = self.score_batch(&[tokens.to_vec()], &[sigma_bar])?;
        Ok(out.remove(0))
    }
}

/// Serialized architecture description carried in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Score(ScoreNetConfig),
    Autoregressive(ArConfig),
    Tabular(TabularConfig),
}

impl Architecture {
    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Score(c) => c.vocab,
            Self::Autoregressive(c) => c.vocab,
            Self::Tabular(c) => c.vocab,
        }
    }

    pub fn context_len(&self) -> usize {
        match self {
            Self::Score(c) => c.context,
            Self::Autoregressive(c) => c.context,
            Self::Tabular(c) => c.len,
        }
    }
}

pub(crate) fn check_tokens(tokens: &[usize], vocab: usize, context: usize) -> Result<()> {
    if tokens.len() > context {
        return Err(Error::ContextOverflow {
            len: tokens.len(),
            context,
        });
    }
    if tokens.is_empty() {
        return invalid("empty token sequence");
    }
    match tokens.iter().position(|&t| t >= vocab) {
        Some(position) => Err(Error::TokenOutOfRange {
            id: tokens[position],
            position,
            size: vocab,
        }),
        None => Ok(()),
    }
}
