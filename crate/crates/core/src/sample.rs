//! Reverse-process samplers (Euler and analytic), prompt clamping, and
//! decoding for the autoregressive baseline.

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sedd_tensor::Scalar;

use crate::error::{invalid, Error, Result};
use crate::model::{ArTransformer, ScoreField, ScoreModel};
use crate::noise::{KernelKind, NoiseKernel, NoiseProcess, TIME_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    Euler,
    Analytic,
}

impl FromStr for SamplerMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "analytic" => Ok(Self::Analytic),
            _ => Err(Error::Config(format!("unknown sampler {s:?} (euler|analytic)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub steps: usize,
    pub length: usize,
    pub seed: u64,
    pub truncate_to: Option<usize>,
    pub record_trajectory: bool,
    /// Trajectories per model call when sampling many in lockstep.
    pub batch: usize,
}

impl SamplerConfig {
    pub fn new(method: SamplerMethod, steps: usize, length: usize, seed: u64) -> Self {
        Self {
            method,
            steps,
            length,
            seed,
            truncate_to: None,
            record_trajectory: false,
            batch: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.length == 0 || self.batch == 0 {
            return Err(Error::Config("length and batch must be positive".into()));
        }
        if self.truncate_to.is_some_and(|t| t > self.length) {
            return Err(Error::Config("truncate_to exceeds the generated length".into()));
        }
        Ok(())
    }
}

/// Positions held fixed during sampling.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptSpec {
    pub fixed: Vec<(usize, usize)>,
}

impl PromptSpec {
    pub fn prefix(tokens: &[usize]) -> Self {
        Self {
            fixed: tokens.iter().copied().enumerate().collect(),
        }
    }

    pub fn validate(&self, length: usize, kernel: &NoiseKernel) -> Result<()> {
        let mut seen = vec![false; length];
        for &(pos, tok) in &self.fixed {
            if pos >= length {
                return invalid(format!("prompt position {pos} outside [0, {length})"));
            }
            if std::mem::replace(&mut seen[pos], true) {
                return invalid(format!("prompt position {pos} given twice"));
            }
            if tok >= kernel.n {
                return Err(Error::TokenOutOfRange {
                    id: tok,
                    position: pos,
                    size: kernel.n,
                });
            }
            if kernel.is_mask(tok) {
                return invalid(format!("prompt token at position {pos} is MASK"));
            }
        }
        Ok(())
    }

    pub fn apply(&self, x: &mut [usize]) {
        for &(pos, tok) in &self.fixed {
            x[pos] = tok;
        }
    }
}

/// Sample of the t = 1 distribution: all MASK, or i.i.d. uniform.
pub fn init_noise<R: Rng + ?Sized>(kernel: &NoiseKernel, len: usize, rng: &mut R) -> Vec<usize> {
    match kernel.kind {
        KernelKind::Absorb => vec![kernel.n - 1; len],
        KernelKind::Uniform => (0..len).map(|_| rng.gen_range(0..kernel.n)).collect(),
    }
}

/// Grid points t_0 = 1 > … > t_S = ε_t.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|k| 1.0 - k as f64 * (1.0 - TIME_FLOOR) / steps as f64)
        .collect()
}

fn draw<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Clamping diagnostics from Euler steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampStats {
    /// Positions whose jump mass exceeded one.
    pub clamped: usize,
    /// Positions where clamping removed more than half the mass.
    pub severe: usize,
}

/// One Euler step from t to t − δ with per-position jump probabilities
/// δ·rate, renormalized when they exceed one.
pub fn euler_step<R: Rng + ?Sized>(
    x: &[usize],
    t: f64,
    delta: f64,
    field: &ScoreField,
    process: &NoiseProcess,
    rng: &mut R,
) -> Result<(Vec<usize>, ClampStats)> {
    if !(delta >= 0.0 && delta <= t) {
        return invalid(format!("Euler step needs 0 ≤ δ ≤ t, got δ = {delta}, t = {t}"));
    }
    let mut stats = ClampStats::default();
    if delta == 0.0 {
        return Ok((x.to_vec(), stats));
    }
    let sigma_t = process.schedule.sigma_rate(t)?;
    let mut out = x.to_vec();
    for (i, cur) in out.iter_mut().enumerate() {
        let mut p = process.kernel.reverse_rate_row(sigma_t, field.row(i), *cur)?;
        p[*cur] = 0.0;
        let mut jump: f64 = 0.0;
        for v in p.iter_mut() {
            *v *= delta;
            jump += *v;
        }
        if jump == 0.0 {
            continue;
        }
        if jump > 1.0 {
            stats.clamped += 1;
            if jump > 2.0 {
                stats.severe += 1;
            }
        } else {
            p[*cur] = 1.0 - jump;
        }
        *cur = draw(&p, rng);
    }
    Ok((out, stats))
}

/// Exact-posterior step from t to t_prev given the score.
pub fn analytic_step<R: Rng + ?Sized>(
    x: &[usize],
    t: f64,
    t_prev: f64,
    field: &ScoreField,
    process: &NoiseProcess,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if t_prev > t || t_prev < 0.0 {
        return invalid(format!("analytic step needs 0 ≤ t_prev ≤ t, got t_prev = {t_prev}, t = {t}"));
    }
    if t_prev == t {
        return Ok(x.to_vec());
    }
    let sched = &process.schedule;
    let (sb_t, sb_s) = (sched.sigma_bar(t)?, sched.sigma_bar(t_prev)?);
    let k = &process.kernel;
    let n = k.n;
    let mut out = x.to_vec();
    match k.kind {
        KernelKind::Absorb => {
            let mask = n - 1;
            let stay = (-sb_s).exp_m1() / (-sb_t).exp_m1();
            for (i, cur) in out.iter_mut().enumerate() {
                if *cur != mask || rng.gen::<f64>() < stay {
                    continue;
                }
                *cur = draw(&field.row(i)[..mask], rng);
            }
        }
        KernelKind::Uniform => {
            let e = (-(sb_t - sb_s)).exp();
            let nf = n as f64;
            let mut p = vec![0.0; n];
            for (i, cur) in out.iter_mut().enumerate() {
                let row = field.row(i);
                let score = |y: usize| if y == *cur { 1.0 } else { row[y] };
                let total: f64 = (0..n).map(score).sum();
                for (y, slot) in p.iter_mut().enumerate() {
                    let fwd = if y == *cur { e + (1.0 - e) / nf } else { (1.0 - e) / nf };
                    let back = score(y) - total / nf + e * total / nf;
                    *slot = (fwd * back).max(0.0);
                }
                if p.iter().sum::<f64>() > 0.0 {
                    *cur = draw(&p, rng);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub tokens: Vec<usize>,
    pub forward_passes: usize,
    pub clamps: ClampStats,
    /// Fraction of MASK among the model's input positions, per step.
    pub masked_fraction: Vec<f64>,
    /// States after initialization and after every step.
    pub trajectory: Option<Vec<Vec<usize>>>,
}

/// Sample one sequence.
pub fn sample(
    model: &dyn ScoreModel,
    process: &NoiseProcess,
    cfg: &SamplerConfig,
    prompt: &PromptSpec,
) -> Result<SampleOutput> {
    Ok(sample_many(model, process, cfg, prompt, 1)?.remove(0))
}

/// Sample `count` trajectories in lockstep; trajectory j draws from stream j
/// of a ChaCha8 generator seeded with `cfg.seed`.
pub fn sample_many(
    model: &dyn ScoreModel,
    process: &NoiseProcess,
    cfg: &SamplerConfig,
    prompt: &PromptSpec,
    count: usize,
) -> Result<Vec<SampleOutput>> {
    cfg.validate()?;
    let kernel = &process.kernel;
    prompt.validate(cfg.length, kernel)?;
    if model.context_len() < cfg.length {
        return Err(Error::ContextOverflow {
            len: cfg.length,
            context: model.context_len(),
        });
    }
    if model.vocab_size() != kernel.n {
        return Err(Error::VocabMismatch(format!(
            "model vocabulary {} but kernel has {} states",
            model.vocab_size(),
            kernel.n
        )));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..count)
        .map(|j| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(j as u64);
            r
        })
        .collect();
    let mut outs: Vec<SampleOutput> = rngs
        .iter_mut()
        .map(|r| {
            let mut x = init_noise(kernel, cfg.length, r);
            prompt.apply(&mut x);
            SampleOutput {
                trajectory: cfg.record_trajectory.then(|| vec![x.clone()]),
                tokens: x,
                forward_passes: 0,
                clamps: ClampStats::default(),
                masked_fraction: Vec::new(),
            }
        })
        .collect();
    let grid = time_grid(cfg.steps);
    for k in 0..cfg.steps {
        let t = grid[k];
        let last = k + 1 == cfg.steps;
        let next = if last { 0.0 } else { grid[k + 1] };
        let sb = process.schedule.sigma_bar(t)?;
        for start in (0..count).step_by(cfg.batch) {
            let end = (start + cfg.batch).min(count);
            let batch: Vec<Vec<usize>> = outs[start..end].iter().map(|o| o.tokens.clone()).collect();
            let fields = model.score_batch(&batch, &vec![sb; batch.len()])?;
            for ((o, rng), field) in outs[start..end].iter_mut().zip(&mut rngs[start..end]).zip(&fields) {
                o.forward_passes += 1;
                let masked = o.tokens.iter().filter(|&&v| kernel.is_mask(v)).count();
                o.masked_fraction.push(masked as f64 / cfg.length as f64);
                let mut x = if last || cfg.method == SamplerMethod::Analytic {
                    analytic_step(&o.tokens, t, next, field, process, rng)?
                } else {
                    let (x, s) = euler_step(&o.tokens, t, t - next, field, process, rng)?;
                    o.clamps.clamped += s.clamped;
                    o.clamps.severe += s.severe;
                    x
                };
                prompt.apply(&mut x);
                if let Some(tr) = o.trajectory.as_mut() {
                    tr.push(x.clone());
                }
                o.tokens = x;
            }
        }
    }
    if let Some(n) = cfg.truncate_to {
        for o in &mut outs {
            o.tokens.truncate(n);
        }
    }
    Ok(outs)
}

/// Wraps a score model and counts forward passes and scored sequences.
pub struct CountingModel<'a> {
    inner: &'a dyn ScoreModel,
    calls: AtomicUsize,
    sequences: AtomicUsize,
}

impl<'a> CountingModel<'a> {
    pub fn new(inner: &'a dyn ScoreModel) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            sequences: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn sequences(&self) -> usize {
        self.sequences.load(Ordering::Relaxed)
    }
}

impl ScoreModel for CountingModel<'_> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn context_len(&self) -> usize {
        self.inner.context_len()
    }

    fn score_batch(&self, batch: &[Vec<usize>], sigma_bars: &[f64]) -> Result<Vec<ScoreField>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.sequences.fetch_add(batch.len(), Ordering::Relaxed);
        self.inner.score_batch(batch, sigma_bars)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArStrategy {
    Greedy,
    TopK(usize),
    TopP(f64),
    Ancestral,
}

impl FromStr for ArStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parse_err = || Error::Config(format!("unknown strategy {s:?} (greedy|ancestral|top_k:K|top_p:P)"));
        match s.split_once(':') {
            None if s == "greedy" => Ok(Self::Greedy),
            None if s == "ancestral" => Ok(Self::Ancestral),
            Some(("top_k", k)) => k.parse().map(Self::TopK).map_err(|_| parse_err()),
            Some(("top_p", p)) => p.parse().map(Self::TopP).map_err(|_| parse_err()),
            _ => Err(parse_err()),
        }
    }
}

/// Next-token probabilities after the strategy's truncation; `exclude` ids get zero mass.
pub fn next_token_distribution<T: Scalar>(logits: &[T], strategy: ArStrategy, exclude: &[usize]) -> Result<Vec<f64>> {
    let n = logits.len();
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| !exclude.contains(i))
        .map(|(_, v)| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return invalid("no admissible tokens");
    }
    let mut p: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, v)| if exclude.contains(&i) { 0.0 } else { (v.as_f64() - max).exp() })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let keep = match strategy {
        ArStrategy::Ancestral => n,
        ArStrategy::Greedy => 1,
        ArStrategy::TopK(k) => {
            if k == 0 {
                return invalid("top_k needs k ≥ 1");
            }
            k.min(n)
        }
        ArStrategy::TopP(top) => {
            if !(top > 0.0 && top <= 1.0) {
                return invalid("top_p needs 0 < p ≤ 1");
            }
            let mut acc = 0.0;
            let mut m = n;
            for (j, &i) in order.iter().enumerate() {
                acc += p[i];
                if acc >= top - 1e-12 {
                    m = j + 1;
                    break;
                }
            }
            m
        }
    };
    let mut out = vec![0.0; n];
    for &i in &order[..keep] {
        out[i] = p[i];
    }
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArSampleOutput {
    /// Prompt followed by generated tokens.
    pub tokens: Vec<usize>,
    pub forward_passes: usize,
    pub flops: u64,
}

/// KV-cached decoding of `max_new` tokens after `prompt`.
pub fn ar_sample<T: Scalar>(
    model: &ArTransformer<T>,
    prompt: &[usize],
    max_new: usize,
    strategy: ArStrategy,
    seed: u64,
    exclude: &[usize],
) -> Result<ArSampleOutput> {
    let need = prompt.len() + max_new;
    if need > model.config.context {
        return Err(Error::ContextOverflow {
            len: need,
            context: model.config.context,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = model.new_cache();
    let mut tokens = prompt.to_vec();
    let mut passes = 0;
    let mut logits = model.decode_step(&mut cache, model.config.bos())?;
    passes += 1;
    for &t in prompt {
        logits = model.decode_step(&mut cache, t)?;
        passes += 1;
    }
    for j in 0..max_new {
        let p = next_token_distribution(&logits, strategy, exclude)?;
        let next = draw(&p, &mut rng);
        tokens.push(next);
        if j + 1 < max_new {
            logits = model.decode_step(&mut cache, next)?;
            passes += 1;
        }
    }
    Ok(ArSampleOutput {
        tokens,
        forward_passes: passes,
        flops: cache.total_flops,
    })
}

/// The same decoding without a cache: every token re-runs the full prefix.
pub fn ar_sample_uncached<T: Scalar>(
    model: &ArTransformer<T>,
    prompt: &[usize],
    max_new: usize,
    strategy: ArStrategy,
    seed: u64,
    exclude: &[usize],
) -> Result<ArSampleOutput> {
    let need = prompt.len() + max_new;
    if need > model.config.context {
        return Err(Error::ContextOverflow {
            len: need,
            context: model.config.context,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![model.config.bos()];
    inputs.extend_from_slice(prompt);
    let mut tokens = prompt.to_vec();
    for _ in 0..max_new {
        let logits = model.logits(&inputs)?;
        let p = next_token_distribution(logits.row(inputs.len() - 1), strategy, exclude)?;
        let next = draw(&p, &mut rng);
        tokens.push(next);
        inputs.push(next);
    }
    Ok(ArSampleOutput {
        tokens,
        forward_passes: max_new,
        flops: 0,
    })
}
