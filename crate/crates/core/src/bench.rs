//! Wall-clock latency of diffusion sampling versus autoregressive decoding.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::{ArTransformer, ScoreModel};
use crate::noise::NoiseProcess;
use crate::sample::{ar_sample, ar_sample_uncached, sample_many, ArStrategy, CountingModel, PromptSpec, SamplerConfig, SamplerMethod};

pub const CSV_HEADER: &str = "model,params,L,k_or_tokens,median_ms,passes,reps";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRecord {
    pub model: String,
    pub params: usize,
    pub len: usize,
    pub k_or_tokens: usize,
    pub median_ms: f64,
    /// Forward passes per generated batch.
    pub passes: usize,
    pub reps: usize,
    pub warmup: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub steps: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    /// Sequences generated together by the diffusion sampler.
    pub batch: usize,
    pub seed: u64,
    /// Largest allowed relative parameter-count gap between the two models.
    pub size_tolerance: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![64, 256],
            steps: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
            reps: 3,
            warmup: 2,
            batch: 1,
            seed: 0,
            size_tolerance: 0.15,
        }
    }
}

/// Median wall time (ms) of `reps` timed runs after `warmup` untimed ones,
/// and the pass count reported by the last run.
pub fn time_median(warmup: usize, reps: usize, mut run: impl FnMut() -> Result<usize>) -> Result<(f64, usize)> {
    if reps < 3 {
        return invalid("latency needs at least three timed repetitions");
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(reps);
    let mut passes = 0;
    for _ in 0..reps {
        let start = Instant::now();
        passes = run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let m = times.len() / 2;
    let median = if times.len() % 2 == 1 { times[m] } else { 0.5 * (times[m - 1] + times[m]) };
    Ok((median, passes))
}

/// Least-squares line through (x, y): slope, intercept, R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

pub fn latency_bench(
    diffusion: &dyn ScoreModel,
    diffusion_params: usize,
    process: &NoiseProcess,
    ar: &ArTransformer<f32>,
    cfg: &BenchConfig,
) -> Result<Vec<LatencyRecord>> {
    if ar.config.vocab != process.kernel.clean_size() || diffusion.vocab_size() != process.kernel.n {
        return Err(Error::VocabMismatch(format!(
            "AR vocabulary {} vs diffusion {} (kernel {})",
            ar.config.vocab,
            diffusion.vocab_size(),
            process.kernel.n
        )));
    }
    let ar_params = ar.num_params();
    let gap = (diffusion_params as f64 - ar_params as f64).abs() / diffusion_params.max(ar_params) as f64;
    if gap > cfg.size_tolerance {
        return Err(Error::Config(format!(
            "models not size-matched: {diffusion_params} vs {ar_params} parameters"
        )));
    }
    let mut out = Vec::new();
    for &len in &cfg.lengths {
        for &k in &cfg.steps {
            let mut sc = SamplerConfig::new(SamplerMethod::Analytic, k, len, cfg.seed);
            sc.batch = cfg.batch;
            let (ms, passes) = time_median(cfg.warmup, cfg.reps, || {
                let counter = CountingModel::new(diffusion);
                sample_many(&counter, process, &sc, &PromptSpec::default(), cfg.batch)?;
                Ok(counter.calls())
            })?;
            out.push(LatencyRecord {
                model: "diffusion".into(),
                params: diffusion_params,
                len,
                k_or_tokens: k,
                median_ms: ms,
                passes,
                reps: cfg.reps,
                warmup: cfg.warmup,
            });
        }
        for (name, cached) in [("ar_cached", true), ("ar_uncached", false)] {
            let (ms, passes) = time_median(cfg.warmup, cfg.reps, || {
                let r = if cached {
                    ar_sample(ar, &[], len, ArStrategy::Ancestral, cfg.seed, &[])?
                } else {
                    ar_sample_uncached(ar, &[], len, ArStrategy::Ancestral, cfg.seed, &[])?
                };
                Ok(r.forward_passes)
            })?;
            out.push(LatencyRecord {
                model: name.into(),
                params: ar_params,
                len,
                k_or_tokens: len,
                median_ms: ms,
                passes,
                reps: cfg.reps,
                warmup: cfg.warmup,
            });
        }
    }
    Ok(out)
}

pub fn to_csv(records: &[LatencyRecord]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.4},{},{}",
            r.model, r.params, r.len, r.k_or_tokens, r.median_ms, r.passes, r.reps
        );
    }
    s
}
