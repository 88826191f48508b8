use serde::{Deserialize, Serialize};
use sedd_tensor::{Scalar, Tensor};

use super::params::{ParamInit, ParamSpec, ParamStore};
use super::{check_tokens, ScoreField, ScoreModel};
use crate::error::{invalid, Result};
use crate::oracle::SequenceSpace;

/// Exact-capacity score table for enumerable (N, L): one log-score per
/// (knot, state, position, token), linear in log σ̄ between knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularConfig {
    pub vocab: usize,
    pub len: usize,
    /// Ascending σ̄ values of the knots.
    pub knots: Vec<f64>,
}

impl TabularConfig {
    /// `count` knots log-spaced over [lo, hi].
    pub fn log_spaced(vocab: usize, len: usize, lo: f64, hi: f64, count: usize) -> Self {
        let (a, b) = (lo.ln(), hi.ln());
        let knots = (0..count)
            .map(|k| (a + (b - a) * k as f64 / (count.max(2) - 1) as f64).exp())
            .collect();
        Self { vocab, len, knots }
    }

    pub fn states(&self) -> Result<usize> {
        Ok(SequenceSpace::new(self.vocab, self.len)?.size)
    }

    pub(crate) fn spec(&self) -> Result<Vec<ParamSpec>> {
        Ok(vec![(
            "log_scores".into(),
            vec![self.knots.len(), self.states()?, self.len, self.vocab],
            ParamInit::Zeros,
        )])
    }

    fn validate(&self) -> Result<()> {
        let sorted = self.knots.windows(2).all(|w| w[0] < w[1]);
        if self.knots.is_empty() || !sorted || self.knots[0] <= 0.0 {
            return invalid("tabular knots must be positive and strictly increasing");
        }
        self.states().map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct TabularScore<T: Scalar = f32> {
    pub config: TabularConfig,
    pub params: ParamStore<T>,
    space: SequenceSpace,
}

impl<T: Scalar> TabularScore<T> {
    /// All log-scores zero (every ratio 1).
    pub fn new(config: TabularConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.spec()?;
        let params = ParamStore::init(&spec, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        Self::from_params(config, params)
    }

    pub fn from_params(config: TabularConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check(&config.spec()?)?;
        let space = SequenceSpace::new(config.vocab, config.len)?;
        Ok(Self { config, params, space })
    }

    pub fn space(&self) -> SequenceSpace {
        self.space
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.params.tensors()[0]
    }

    /// Log-score block of one (knot, state), `len × vocab`.
    pub fn knot_block(&self, knot: usize, state: usize) -> &[T] {
        let block = self.config.len * self.config.vocab;
        let off = (knot * self.space.size + state) * block;
        &self.table().data()[off..off + block]
    }

    /// (lower knot, weight on the upper knot) for σ̄, clamped to the knot range.
    fn locate(&self, sigma_bar: f64) -> (usize, f64) {
        let k = &self.config.knots;
        if k.len() == 1 || sigma_bar <= k[0] {
            return (0, 0.0);
        }
        if sigma_bar >= k[k.len() - 1] {
            return (k.len() - 1, 0.0);
        }
        let i = k.partition_point(|&v| v <= sigma_bar) - 1;
        let u = sigma_bar.ln();
        let (a, b) = (k[i].ln(), k[i + 1].ln());
        (i, (u - a) / (b - a))
    }
}

impl<T: Scalar> ScoreModel for TabularScore<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn context_len(&self) -> usize {
        self.config.len
    }

    fn score_batch(&self, batch: &[Vec<usize>], sigma_bars: &[f64]) -> Result<Vec<ScoreField>> {
        batch
            .iter()
            .zip(sigma_bars)
            .map(|(x, &sb)| {
                check_tokens(x, self.config.vocab, self.config.len)?;
                if x.len() != self.config.len {
                    return invalid("tabular score needs full-length sequences");
                }
                let state = self.space.index(x);
                let (k, w) = self.locate(sb);
                let lo = self.knot_block(k, state);
                let logs: Vec<f64> = if w == 0.0 {
                    lo.iter().map(|v| v.as_f64()).collect()
                } else {
                    let hi = self.knot_block(k + 1, state);
                    lo.iter().zip(hi).map(|(a, b)| (1.0 - w) * a.as_f64() + w * b.as_f64()).collect()
                };
                ScoreField::from_log(self.config.len, self.config.vocab, &logs)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_in_log_sigma() {
        let cfg = TabularConfig {
            vocab: 2,
            len: 1,
            knots: vec![0.1, 1.0],
        };
        let mut m = TabularScore::<f64>::new(cfg).unwrap();
        m.params.tensors_mut()[0].data_mut().copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 2.0, 4.0, 2.0, 4.0]);
        let mid = 0.1f64.sqrt();
        let f = m.score(&[1], mid).unwrap();
        assert!((f.get(0, 0) - 1f64.exp()).abs() < 1e-12);
        assert!((f.get(0, 1) - 2f64.exp()).abs() < 1e-12);
        let f = m.score(&[1], 50.0).unwrap();
        assert!((f.get(0, 1) - 4f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn rejects_oversized_domain() {
        let cfg = TabularConfig::log_spaced(5, 6, 1e-3, 5.0, 4);
        assert!(TabularScore::<f32>::new(cfg).is_err());
    }
}
