use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{dse_sum, dse_targets, LossMode};
use crate::error::{invalid, Result};
use crate::model::ScoreModel;
use crate::noise::{NoiseProcess, TIME_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelboConfig {
    /// Model evaluations per noise sample, split evenly between strata
    /// uniform in t and strata uniform in log σ̄ (rounded up to even).
    pub time_samples: usize,
    /// Noisy sequences drawn per time.
    pub noise_samples: usize,
    pub seed: u64,
    /// Sequences per model call.
    pub chunk: usize,
}

impl Default for NelboConfig {
    fn default() -> Self {
        Self {
            time_samples: 64,
            noise_samples: 1,
            seed: 0,
            chunk: 64,
        }
    }
}

/// Monte Carlo bound on −log p(x), summed over scored positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimate {
    pub total: f64,
    pub stderr: f64,
    /// Positions contributing (all, or the non-prompt ones).
    pub tokens: usize,
}

impl BoundEstimate {
    pub fn per_token(&self) -> f64 {
        self.total / self.tokens as f64
    }

    pub fn per_token_stderr(&self) -> f64 {
        self.stderr / self.tokens as f64
    }
}

/// Time-integrated bound-mode DSE plus the prior term. With `clean`, flagged
/// positions stay uncorrupted and contribute nothing, which bounds the
/// conditional likelihood of the remaining positions.
pub fn nelbo(
    model: &dyn ScoreModel,
    process: &NoiseProcess,
    seq: &[usize],
    clean: Option<&[bool]>,
    cfg: &NelboConfig,
) -> Result<BoundEstimate> {
    if cfg.time_samples == 0 || cfg.noise_samples == 0 {
        return invalid("NELBO needs at least one time and one noise sample");
    }
    let held = |i: usize| clean.is_some_and(|c| c[i]);
    if clean.is_some_and(|c| c.len() != seq.len()) {
        return invalid("clean mask length differs from sequence length");
    }
    let tokens = (0..seq.len()).filter(|&i| !held(i)).count();
    if tokens == 0 {
        return invalid("no positions left to score");
    }
    let kernel = &process.kernel;
    let sched = &process.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Times come in pairs: one stratified uniformly in t, one stratified
    // log-uniformly in σ̄. Each draw is weighted by 1 / (mixture density), so
    // the estimate stays unbiased while the small-σ̄ region, where rare
    // corruptions carry large ratios, is sampled densely.
    let pairs = cfg.time_samples.div_ceil(2);
    let span = 1.0 - TIME_FLOOR;
    let (lo, hi) = (sched.sigma_bar(TIME_FLOOR)?.ln(), sched.sigma_bar(1.0)?.ln());
    let log_span = hi - lo;
    let mixture = |sb: f64, st: f64| 0.5 / span + 0.5 * st / (sb * log_span);

    let mut jobs = Vec::with_capacity(2 * pairs * cfg.noise_samples);
    for k in 0..pairs {
        let u = (k as f64 + rng.gen::<f64>()) / pairs as f64;
        let t_lin = TIME_FLOOR + span * u;
        let v = (k as f64 + rng.gen::<f64>()) / pairs as f64;
        let t_log = sched.time_of((lo + log_span * v).exp())?.max(TIME_FLOOR);
        for t in [t_lin, t_log] {
            let (sb, st) = (sched.sigma_bar(t)?, sched.sigma_rate(t)?);
            let weight = 1.0 / mixture(sb, st);
            for _ in 0..cfg.noise_samples {
                let xt: Vec<usize> = seq
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| if held(i) { a } else { kernel.sample_marginal(sb, a, &mut rng) })
                    .collect();
                jobs.push((k, xt, sb, st, weight));
            }
        }
    }

    let mut units = vec![0.0; pairs];
    let per_unit = (2 * cfg.noise_samples) as f64;
    for chunk in jobs.chunks(cfg.chunk.max(1)) {
        let batch: Vec<Vec<usize>> = chunk.iter().map(|j| j.1.clone()).collect();
        let sbs: Vec<f64> = chunk.iter().map(|j| j.2).collect();
        let fields = model.score_batch(&batch, &sbs)?;
        for ((k, xt, sb, st, weight), field) in chunk.iter().zip(&fields) {
            let mut targets = dse_targets(kernel, seq, xt, *sb, *st)?;
            for i in (0..seq.len()).filter(|&i| held(i)) {
                targets.weights[i * kernel.n..(i + 1) * kernel.n].fill(0.0);
            }
            units[*k] += weight * dse_sum(field, &targets, LossMode::Bound)? / per_unit;
        }
    }

    let sb1 = sched.sigma_bar(1.0)?;
    let mut prior = 0.0;
    for (i, &a) in seq.iter().enumerate() {
        if !held(i) {
            prior += kernel.prior_kl(sb1, a)?;
        }
    }
    let n = pairs as f64;
    let mean = units.iter().sum::<f64>() / n;
    let stderr = if pairs > 1 {
        let var = units.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(BoundEstimate {
        total: mean + prior,
        stderr,
        tokens,
    })
}

/// Bound in nats per token with its standard error.
pub fn nelbo_per_token(
    model: &dyn ScoreModel,
    process: &NoiseProcess,
    seq: &[usize],
    cfg: &NelboConfig,
) -> Result<(f64, f64)> {
    let b = nelbo(model, process, seq, None, cfg)?;
    Ok((b.per_token(), b.per_token_stderr()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PplOrder {
    /// exp(mean(A)).
    #[default]
    MeanExp,
    /// mean(exp(A)).
    ExpMean,
}

/// Perplexity from per-sequence nats-per-token values.
pub fn perplexity_aggregate(nll: &[f64], order: PplOrder) -> Result<f64> {
    if nll.is_empty() {
        return invalid("perplexity of an empty set");
    }
    let n = nll.len() as f64;
    Ok(match order {
        PplOrder::MeanExp => (nll.iter().sum::<f64>() / n).exp(),
        PplOrder::ExpMean => nll.iter().map(|a| a.exp()).sum::<f64>() / n,
    })
}
