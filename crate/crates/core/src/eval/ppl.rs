use serde_json::json;
use sedd_tensor::Scalar;

use super::report::MetricsReport;
use crate::error::{invalid, Error, Result};
use crate::model::{ArTransformer, ScoreModel};
use crate::noise::NoiseProcess;
use crate::train::{nelbo, perplexity_aggregate, NelboConfig, PplOrder};

/// Causal models that report exact per-token negative log-likelihoods.
pub trait CausalLm: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn context_len(&self) -> usize;
    /// −log p(seq_i | seq_<i) for every position, in nats.
    fn token_nlls(&self, seq: &[usize]) -> Result<Vec<f64>>;
    /// Next-token logits after `prefix`.
    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<T: Scalar> CausalLm for ArTransformer<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn context_len(&self) -> usize {
        self.config.context
    }

    fn token_nlls(&self, seq: &[usize]) -> Result<Vec<f64>> {
        ArTransformer::token_nlls(self, seq)
    }

    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut inputs = vec![self.config.bos()];
        inputs.extend_from_slice(prefix);
        let logits = self.logits(&inputs)?;
        Ok(logits.row(prefix.len()).iter().map(|v| v.as_f64()).collect())
    }
}

/// A model under evaluation: exact causal likelihoods, or a diffusion bound.
#[derive(Clone, Copy)]
pub enum LmRef<'a> {
    Autoregressive(&'a dyn CausalLm),
    Diffusion {
        model: &'a dyn ScoreModel,
        process: &'a NoiseProcess,
        nelbo: NelboConfig,
    },
}

impl LmRef<'_> {
    pub fn context_len(&self) -> usize {
        match self {
            Self::Autoregressive(m) => m.context_len(),
            Self::Diffusion { model, .. } => model.context_len(),
        }
    }

    /// Number of ordinary (non-MASK) token ids.
    pub fn clean_vocab(&self) -> usize {
        match self {
            Self::Autoregressive(m) => m.vocab_size(),
            Self::Diffusion { process, .. } => process.kernel.clean_size(),
        }
    }

    pub fn is_bound(&self) -> bool {
        matches!(self, Self::Diffusion { .. })
    }

    pub(crate) fn check(&self, seq: &[usize]) -> Result<()> {
        if let Self::Diffusion { model, process, .. } = self {
            if model.vocab_size() != process.kernel.n {
                return Err(Error::VocabMismatch(format!(
                    "score model has {} states, kernel {}",
                    model.vocab_size(),
                    process.kernel.n
                )));
            }
        }
        if seq.len() > self.context_len() {
            return Err(Error::ContextOverflow {
                len: seq.len(),
                context: self.context_len(),
            });
        }
        if let Some(p) = seq.iter().position(|&t| t >= self.clean_vocab()) {
            return Err(Error::VocabMismatch(format!(
                "token {} at position {p} is outside the model's {} clean symbols",
                seq[p],
                self.clean_vocab()
            )));
        }
        Ok(())
    }

    /// Negative log-likelihood (or its bound) of the positions not flagged in
    /// `given`, with its Monte Carlo standard error (zero when exact).
    pub fn conditional_nll(&self, seq: &[usize], given: &[bool], seed: u64) -> Result<(f64, f64)> {
        self.check(seq)?;
        match self {
            Self::Autoregressive(m) => {
                let nll = m.token_nlls(seq)?;
                Ok((nll.iter().zip(given).filter(|(_, &g)| !g).map(|(v, _)| v).sum(), 0.0))
            }
            Self::Diffusion { model, process, nelbo: cfg } => {
                let cfg = NelboConfig { seed, ..*cfg };
                let any_given = given.iter().any(|&g| g);
                let b = nelbo(*model, process, seq, any_given.then_some(given), &cfg)?;
                Ok((b.total, b.stderr))
            }
        }
    }
}

/// Non-overlapping windows of `len` tokens, at most `max` of them.
pub fn eval_windows(tokens: &[usize], len: usize, max: Option<usize>) -> Vec<Vec<usize>> {
    tokens
        .chunks_exact(len.max(1))
        .take(max.unwrap_or(usize::MAX))
        .map(<[usize]>::to_vec)
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn per_sequence_report(
    report: &mut MetricsReport,
    nats: &[f64],
    bound_se: Option<f64>,
    order: PplOrder,
) -> Result<()> {
    let n = nats.len();
    let mean = nats.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = nats.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        bound_se.unwrap_or(0.0)
    };
    let me = perplexity_aggregate(nats, PplOrder::MeanExp)?;
    let em = perplexity_aggregate(nats, PplOrder::ExpMean)?;
    if em < me * (1.0 - 1e-12) {
        return invalid(format!("aggregation inequality violated: exp_mean {em} < mean_exp {me}"));
    }
    report.insert("nll_per_token", mean, Some(se), n)?;
    report.insert("ppl_mean_exp", me, None, n)?;
    report.insert("ppl_exp_mean", em, None, n)?;
    let chosen = match order {
        PplOrder::MeanExp => me,
        PplOrder::ExpMean => em,
    };
    report.insert("ppl", chosen, None, n)?;
    report.note(
        "aggregation",
        match order {
            PplOrder::MeanExp => "mean_exp",
            PplOrder::ExpMean => "exp_mean",
        },
    );
    Ok(())
}

/// Per-token perplexity over test sequences: exact for causal models, an
/// upper bound for diffusion models.
pub fn zero_shot_ppl(model: LmRef<'_>, sequences: &[Vec<usize>], order: PplOrder) -> Result<MetricsReport> {
    if sequences.is_empty() {
        return invalid("no test sequences");
    }
    let mut nats = Vec::with_capacity(sequences.len());
    let mut var = 0.0;
    for (j, seq) in sequences.iter().enumerate() {
        if seq.is_empty() {
            return invalid(format!("test sequence {j} is empty"));
        }
        let given = vec![false; seq.len()];
        let seed = match model {
            LmRef::Diffusion { nelbo, .. } => nelbo.seed.wrapping_add(j as u64),
            LmRef::Autoregressive(_) => 0,
        };
        let (nll, se) = model.conditional_nll(seq, &given, seed)?;
        let l = seq.len() as f64;
        nats.push(nll / l);
        var += (se / l).powi(2);
    }
    let cfg = match model {
        LmRef::Autoregressive(_) => json!({"metric": "zero_shot_ppl", "kind": "exact", "n": sequences.len()}),
        LmRef::Diffusion { nelbo, .. } => json!({
            "metric": "zero_shot_ppl",
            "kind": "bound",
            "n": sequences.len(),
            "time_samples": nelbo.time_samples,
            "noise_samples": nelbo.noise_samples,
            "seed": nelbo.seed,
        }),
    };
    let mut report = MetricsReport::new(&cfg);
    let bound_se = (var.sqrt() / sequences.len() as f64).max(0.0);
    per_sequence_report(&mut report, &nats, Some(bound_se), order)?;
    report.note("ppl_kind", if model.is_bound() { "upper_bound" } else { "exact" });
    Ok(report)
}

/// Perplexity of generated samples under a causal judge model, with
/// quantiles of the per-sample perplexities.
pub fn judge_ppl(judge: &dyn CausalLm, samples: &[Vec<usize>]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return invalid("no samples");
    }
    let lm = LmRef::Autoregressive(judge);
    let mut nats = Vec::with_capacity(samples.len());
    for s in samples {
        if s.is_empty() {
            return invalid("empty sample");
        }
        let (nll, _) = lm.conditional_nll(s, &vec![false; s.len()], 0)?;
        nats.push(nll / s.len() as f64);
    }
    let mut report = MetricsReport::new(&json!({"metric": "judge_ppl", "n": samples.len()}));
    per_sequence_report(&mut report, &nats, None, PplOrder::MeanExp)?;
    let mut per: Vec<f64> = nats.iter().map(|a| a.exp()).collect();
    per.sort_by(f64::total_cmp);
    for (name, q) in [("q10", 0.1), ("q50", 0.5), ("q90", 0.9)] {
        report.insert(&format!("sample_ppl_{name}"), quantile(&per, q), None, per.len())?;
    }
    Ok(report)
}
