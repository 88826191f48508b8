use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sedd_tensor::{Scalar, Tape, Tensor, Var};

use super::layers::{linear, modulated_norm, self_attention};
use super::params::{ParamInit, ParamSpec, ParamStore};
use super::{check_tokens, ScoreField, ScoreModel};
use crate::error::{invalid, Result};

/// Bidirectional, noise-conditioned transformer descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    /// Output vocabulary, MASK included for the absorbing kernel.
    pub vocab: usize,
    pub context: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub time_dim: usize,
    pub mlp_ratio: usize,
    pub rope: bool,
    /// Add log(1 / expm1(σ̄)) to every logit, the scale of absorbing ratios.
    pub absorb_offset: bool,
}

impl ScoreNetConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.vocab >= 2
            && self.context >= 1
            && self.layers >= 1
            && self.heads >= 1
            && self.dim % self.heads == 0
            && (self.dim / self.heads) % 2 == 0
            && self.time_dim >= 2
            && self.time_dim % 2 == 0
            && self.mlp_ratio >= 1;
        if ok {
            Ok(())
        } else {
            invalid(format!("invalid score network descriptor {self:?}"))
        }
    }

    pub(crate) fn spec(&self) -> Vec<ParamSpec> {
        let (d, td, v, f) = (self.dim, self.time_dim, self.vocab, self.dim * self.mlp_ratio);
        let w = ParamInit::Normal(0.02);
        let z = ParamInit::Zeros;
        let mut s: Vec<ParamSpec> = vec![
            ("tok_emb".into(), vec![v, d], w),
            ("time.w1".into(), vec![td, td], ParamInit::Normal(0.1)),
            ("time.b1".into(), vec![td], z),
            ("time.w2".into(), vec![td, td], ParamInit::Normal(0.1)),
            ("time.b2".into(), vec![td], z),
        ];
        for l in 0..self.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            s.extend([
                (p("mod.w"), vec![td, 6 * d], w),
                (p("mod.b"), vec![6 * d], z),
                (p("qkv.w"), vec![d, 3 * d], w),
                (p("qkv.b"), vec![3 * d], z),
                (p("out.w"), vec![d, d], w),
                (p("out.b"), vec![d], z),
                (p("mlp.w1"), vec![d, f], w),
                (p("mlp.b1"), vec![f], z),
                (p("mlp.w2"), vec![f, d], w),
                (p("mlp.b2"), vec![d], z),
            ]);
        }
        s.extend([
            ("final.mod.w".into(), vec![td, 2 * d], w),
            ("final.mod.b".into(), vec![2 * d], z),
            ("head.w".into(), vec![d, v], w),
            ("head.b".into(), vec![v], z),
        ]);
        s
    }
}

const TIME_PARAMS: usize = 5;
const LAYER_PARAMS: usize = 10;

/// Sinusoidal features of log σ̄.
pub(crate) fn noise_features(sigma_bar: f64, dim: usize) -> Vec<f64> {
    let u = sigma_bar.max(1e-12).ln();
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (-(100f64).ln() * j as f64 / half as f64).exp();
        out.push((u * freq).sin());
    }
    for j in 0..half {
        let freq = (-(100f64).ln() * j as f64 / half as f64).exp();
        out.push((u * freq).cos());
    }
    out
}

/// s_θ(x, σ̄) = exp(logits), conditioned on σ̄ through adaptive layer norm.
#[derive(Debug, Clone)]
pub struct ScoreTransformer<T: Scalar = f32> {
    pub config: ScoreNetConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> ScoreTransformer<T> {
    pub fn new(config: ScoreNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config.spec(), &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, params })
    }

    pub fn from_params(config: ScoreNetConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check(&config.spec())?;
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Log-scores [B·L, V] for equal-length sequences; `p` are the bound params.
    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], batch: &[Vec<usize>], sigma_bars: &[f64]) -> Result<Var> {
        let c = &self.config;
        let b = batch.len();
        if b == 0 || sigma_bars.len() != b {
            return invalid("batch and σ̄ list must be non-empty and of equal length");
        }
        let len = batch[0].len();
        for seq in batch {
            if seq.len() != len {
                return invalid("sequences in a batch must share one length");
            }
            check_tokens(seq, c.vocab, c.context)?;
        }
        if let Some(s) = sigma_bars.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return invalid(format!("σ̄ must be finite and nonnegative, got {s}"));
        }
        let d = c.dim;
        let ids: Vec<usize> = batch.iter().flatten().copied().collect();
        let seq_of: Vec<usize> = (0..b * len).map(|i| i / len).collect();

        let mut x = tape.gather(p[0], &ids)?;
        let feats: Vec<f64> = sigma_bars.iter().flat_map(|&s| noise_features(s, c.time_dim)).collect();
        let temb = tape.constant(Tensor::from_f64(&[b, c.time_dim], &feats)?);
        let h = linear(tape, temb, p[1], p[2])?;
        let h = tape.gelu(h);
        let h = linear(tape, h, p[3], p[4])?;
        let cond = tape.gelu(h);

        for l in 0..c.layers {
            let q = &p[TIME_PARAMS + l * LAYER_PARAMS..TIME_PARAMS + (l + 1) * LAYER_PARAMS];
            let m = linear(tape, cond, q[0], q[1])?;
            let m = tape.gather(m, &seq_of)?;
            let mut part = |k: usize| tape.narrow(m, k * d, d);
            let (sh1, sc1, g1, sh2, sc2, g2) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?, part(5)?);

            let h = modulated_norm(tape, x, sh1, sc1)?;
            let qkv = linear(tape, h, q[2], q[3])?;
            let att = self_attention(tape, qkv, b, len, c.heads, c.rope, false)?;
            let att = linear(tape, att, q[4], q[5])?;
            let att = tape.mul(att, g1)?;
            x = tape.add(x, att)?;

            let h = modulated_norm(tape, x, sh2, sc2)?;
            let h = linear(tape, h, q[6], q[7])?;
            let h = tape.gelu(h);
            let h = linear(tape, h, q[8], q[9])?;
            let h = tape.mul(h, g2)?;
            x = tape.add(x, h)?;
        }

        let base = TIME_PARAMS + c.layers * LAYER_PARAMS;
        let m = linear(tape, cond, p[base], p[base + 1])?;
        let m = tape.gather(m, &seq_of)?;
        let shift = tape.narrow(m, 0, d)?;
        let scale = tape.narrow(m, d, d)?;
        let h = modulated_norm(tape, x, shift, scale)?;
        let mut logits = linear(tape, h, p[base + 2], p[base + 3])?;
        if c.absorb_offset {
            let offsets: Vec<f64> = (0..b * len * c.vocab)
                .map(|i| -sigma_bars[i / (len * c.vocab)].max(1e-12).exp_m1().ln())
                .collect();
            let off = tape.constant(Tensor::from_f64(&[b * len, c.vocab], &offsets)?);
            logits = tape.add(logits, off)?;
        }
        Ok(logits)
    }

    /// Inference forward returning raw log-scores, one [L, V] tensor per sequence.
    pub fn log_scores(&self, batch: &[Vec<usize>], sigma_bars: &[f64]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::no_grad();
        let p = self.params.bind(&mut tape);
        let logits = self.forward(&mut tape, &p, batch, sigma_bars)?;
        let all = tape.value(logits);
        let len = batch[0].len();
        let v = self.config.vocab;
        batch
            .iter()
            .enumerate()
            .map(|(i, _)| Ok(Tensor::new(vec![len, v], all.data()[i * len * v..(i + 1) * len * v].to_vec())?))
            .collect()
    }
}

impl<T: Scalar> ScoreModel for ScoreTransformer<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn context_len(&self) -> usize {
        self.config.context
    }

    fn score_batch(&self, batch: &[Vec<usize>], sigma_bars: &[f64]) -> Result<Vec<ScoreField>> {
        self.log_scores(batch, sigma_bars)?
            .into_iter()
            .map(|t| {
                let logs: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
                ScoreField::from_log(t.shape()[0], t.shape()[1], &logs)
            })
            .collect()
    }
}
