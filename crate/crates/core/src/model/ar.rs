use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sedd_tensor::{Scalar, Tape, Tensor, Var};

use super::layers::{affine_norm, linear, self_attention};
use super::params::{ParamInit, ParamSpec, ParamStore};
use super::check_tokens;
use crate::error::{invalid, Error, Result};

/// Causal transformer descriptor. Input ids range over `vocab + 1`; the extra
/// id `vocab` is the beginning-of-sequence marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArConfig {
    pub vocab: usize,
    pub context: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
}

const LAYER_PARAMS: usize = 12;

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.vocab >= 1
            && self.context >= 1
            && self.layers >= 1
            && self.heads >= 1
            && self.dim % self.heads == 0
            && self.mlp_ratio >= 1;
        if ok {
            Ok(())
        } else {
            invalid(format!("invalid autoregressive descriptor {self:?}"))
        }
    }

    pub fn bos(&self) -> usize {
        self.vocab
    }

    pub(crate) fn spec(&self) -> Vec<ParamSpec> {
        let (d, v, f) = (self.dim, self.vocab, self.dim * self.mlp_ratio);
        let w = ParamInit::Normal(0.02);
        let z = ParamInit::Zeros;
        let one = ParamInit::Ones;
        let mut s: Vec<ParamSpec> = vec![
            ("tok_emb".into(), vec![v + 1, d], w),
            ("pos_emb".into(), vec![self.context, d], w),
        ];
        for l in 0..self.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            s.extend([
                (p("ln1.g"), vec![d], one),
                (p("ln1.b"), vec![d], z),
                (p("qkv.w"), vec![d, 3 * d], w),
                (p("qkv.b"), vec![3 * d], z),
                (p("out.w"), vec![d, d], w),
                (p("out.b"), vec![d], z),
                (p("ln2.g"), vec![d], one),
                (p("ln2.b"), vec![d], z),
                (p("mlp.w1"), vec![d, f], w),
                (p("mlp.b1"), vec![f], z),
                (p("mlp.w2"), vec![f, d], w),
                (p("mlp.b2"), vec![d], z),
            ]);
        }
        s.extend([
            ("final.g".into(), vec![d], one),
            ("final.b".into(), vec![d], z),
            ("head.w".into(), vec![d, v], z),
            ("head.b".into(), vec![v], z),
        ]);
        s
    }
}

/// Keys and values of every processed position, per layer and head.
#[derive(Debug, Clone)]
pub struct KvCache<T: Scalar = f32> {
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
    len: usize,
    /// Matmul FLOPs of the most recent decode step.
    pub last_step_flops: u64,
    pub total_flops: u64,
}

impl<T: Scalar> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Decoder-only baseline with learned absolute positions.
#[derive(Debug, Clone)]
pub struct ArTransformer<T: Scalar = f32> {
    pub config: ArConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> ArTransformer<T> {
    pub fn new(config: ArConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config.spec(), &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, params })
    }

    pub fn from_params(config: ArConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check(&config.spec())?;
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Next-token logits [B·L, V] for equal-length input batches (ids may include BOS).
    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], batch: &[Vec<usize>]) -> Result<Var> {
        let c = &self.config;
        let b = batch.len();
        if b == 0 {
            return invalid("empty batch");
        }
        let len = batch[0].len();
        for seq in batch {
            if seq.len() != len {
                return invalid("sequences in a batch must share one length");
            }
            check_tokens(seq, c.vocab + 1, c.context)?;
        }
        let ids: Vec<usize> = batch.iter().flatten().copied().collect();
        let pos: Vec<usize> = (0..b * len).map(|i| i % len).collect();
        let tok = tape.gather(p[0], &ids)?;
        let pe = tape.gather(p[1], &pos)?;
        let mut x = tape.add(tok, pe)?;
        for l in 0..c.layers {
            let q = &p[2 + l * LAYER_PARAMS..2 + (l + 1) * LAYER_PARAMS];
            let h = affine_norm(tape, x, q[0], q[1])?;
            let qkv = linear(tape, h, q[2], q[3])?;
            let att = self_attention(tape, qkv, b, len, c.heads, false, true)?;
            let att = linear(tape, att, q[4], q[5])?;
            x = tape.add(x, att)?;
            let h = affine_norm(tape, x, q[6], q[7])?;
            let h = linear(tape, h, q[8], q[9])?;
            let h = tape.gelu(h);
            let h = linear(tape, h, q[10], q[11])?;
            x = tape.add(x, h)?;
        }
        let base = 2 + c.layers * LAYER_PARAMS;
        let h = affine_norm(tape, x, p[base], p[base + 1])?;
        linear(tape, h, p[base + 2], p[base + 3])
    }

    /// Inference logits [L, V] for one input sequence.
    pub fn logits(&self, inputs: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let p = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &p, &[inputs.to_vec()])?;
        Ok(tape.value(out).clone())
    }

    /// Inputs that predict `seq`: BOS followed by all but its last token.
    pub fn shifted_inputs(&self, seq: &[usize]) -> Vec<usize> {
        let mut inputs = Vec::with_capacity(seq.len());
        inputs.push(self.config.bos());
        inputs.extend_from_slice(&seq[..seq.len().saturating_sub(1)]);
        inputs
    }

    /// Per-position negative log-likelihoods of `seq` (nats).
    pub fn token_nlls(&self, seq: &[usize]) -> Result<Vec<f64>> {
        if let Some(position) = seq.iter().position(|&t| t >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                id: seq[position],
                position,
                size: self.config.vocab,
            });
        }
        let logits = self.logits(&self.shifted_inputs(seq))?;
        let v = self.config.vocab;
        Ok(seq
            .iter()
            .enumerate()
            .map(|(i, &t)| -log_softmax_at(&logits.data()[i * v..(i + 1) * v], t))
            .collect())
    }

    pub fn new_cache(&self) -> KvCache<T> {
        let c = &self.config;
        KvCache {
            keys: vec![vec![Vec::new(); c.heads]; c.layers],
            values: vec![vec![Vec::new(); c.heads]; c.layers],
            len: 0,
            last_step_flops: 0,
            total_flops: 0,
        }
    }

    /// Feed one token at the next position; returns next-token logits.
    pub fn decode_step(&self, cache: &mut KvCache<T>, token: usize) -> Result<Vec<T>> {
        let c = &self.config;
        if cache.len >= c.context {
            return Err(Error::ContextOverflow {
                len: cache.len + 1,
                context: c.context,
            });
        }
        check_tokens(&[token], c.vocab + 1, usize::MAX)?;
        let (d, heads) = (c.dim, c.heads);
        let dh = d / heads;
        let t = cache.len + 1;
        let mut tape = Tape::<T>::no_grad();
        let p = self.params.bind(&mut tape);
        let tok = tape.gather(p[0], &[token])?;
        let pe = tape.gather(p[1], &[cache.len])?;
        let mut x = tape.add(tok, pe)?;
        for l in 0..c.layers {
            let q = &p[2 + l * LAYER_PARAMS..2 + (l + 1) * LAYER_PARAMS];
            let h = affine_norm(&mut tape, x, q[0], q[1])?;
            let qkv = linear(&mut tape, h, q[2], q[3])?;
            let row = tape.value(qkv).data().to_vec();
            for hd in 0..heads {
                cache.keys[l][hd].extend_from_slice(&row[d + hd * dh..d + (hd + 1) * dh]);
                cache.values[l][hd].extend_from_slice(&row[2 * d + hd * dh..2 * d + (hd + 1) * dh]);
            }
            let qv = tape.narrow(qkv, 0, d)?;
            let qv = tape.reshape(qv, &[heads, 1, dh])?;
            let k = tape.constant(Tensor::new(vec![heads, t, dh], cache.keys[l].concat())?);
            let v = tape.constant(Tensor::new(vec![heads, t, dh], cache.values[l].concat())?);
            let att = tape.matmul_bt(qv, k)?;
            let att = tape.scale(att, 1.0 / (dh as f64).sqrt());
            let att = tape.softmax(att);
            let o = tape.matmul(att, v)?;
            let o = tape.reshape(o, &[1, d])?;
            let o = linear(&mut tape, o, q[4], q[5])?;
            x = tape.add(x, o)?;
            let h = affine_norm(&mut tape, x, q[6], q[7])?;
            let h = linear(&mut tape, h, q[8], q[9])?;
            let h = tape.gelu(h);
            let h = linear(&mut tape, h, q[10], q[11])?;
            x = tape.add(x, h)?;
        }
        let base = 2 + c.layers * LAYER_PARAMS;
        let h = affine_norm(&mut tape, x, p[base], p[base + 1])?;
        let logits = linear(&mut tape, h, p[base + 2], p[base + 3])?;
        cache.len = t;
        cache.last_step_flops = tape.flops();
        cache.total_flops += tape.flops();
        Ok(tape.value(logits).data().to_vec())
    }
}

/// log softmax(row)[target], accumulated in f64.
pub(crate) fn log_softmax_at<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row[target].as_f64() - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(context: usize) -> ArConfig {
        ArConfig {
            vocab: 6,
            context,
            layers: 2,
            heads: 2,
            dim: 8,
            mlp_ratio: 2,
        }
    }

    fn randomized(context: usize) -> ArTransformer<f32> {
        let mut m = ArTransformer::<f32>::new(cfg(context), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in m.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3f32..0.3));
        }
        m
    }

    #[test]
    fn causal_prefix_unchanged() {
        let m = randomized(8);
        let a = m.logits(&[6, 1, 2, 3, 4, 5]).unwrap();
        let b = m.logits(&[6, 1, 2, 0, 4, 5]).unwrap();
        let v = 6;
        assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v]);
        assert_ne!(&a.data()[3 * v..4 * v], &b.data()[3 * v..4 * v]);
    }

    #[test]
    fn single_token_shape_and_overflow() {
        let m = randomized(4);
        assert_eq!(m.logits(&[6]).unwrap().shape(), &[1, 6]);
        assert!(matches!(m.logits(&[6, 0, 0, 0, 0]), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn zero_head_is_uniform() {
        let m = ArTransformer::<f32>::new(cfg(8), 1).unwrap();
        let nll = m.token_nlls(&[1, 2, 3]).unwrap();
        for v in nll {
            assert!((v - 6f64.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn cache_matches_full_forward_and_counts_keys() {
        let m = randomized(16);
        let seq = [6usize, 2, 3, 1, 0, 5, 5, 4, 1, 2];
        let mut cache = m.new_cache();
        let full = m.logits(&seq).unwrap();
        let mut flops = Vec::new();
        for (i, &t) in seq.iter().enumerate() {
            let row = m.decode_step(&mut cache, t).unwrap();
            for (a, b) in row.iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-5);
            }
            flops.push(cache.last_step_flops);
        }
        assert_eq!(cache.len(), seq.len());
        let per_key = 4 * m.config.dim as u64 * m.config.layers as u64;
        for w in flops.windows(2) {
            assert_eq!(w[1] - w[0], per_key);
        }
        let small = randomized(2);
        let mut c2 = small.new_cache();
        small.decode_step(&mut c2, 6).unwrap();
        small.decode_step(&mut c2, 0).unwrap();
        assert!(matches!(small.decode_step(&mut c2, 0), Err(Error::ContextOverflow { .. })));
    }
}
