use sedd_tensor::{Scalar, Tape, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::model::ScoreField;
use crate::noise::NoiseKernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// s − r·log s, the form that is optimized.
    Train,
    /// Adds K(r) = r·log r − r so each term is ≥ 0 and the time integral
    /// bounds the negative log-likelihood.
    Bound,
}

/// Per-(position, token) weights w and posterior ratios r for one noisy
/// sequence; zero weight marks unused entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DseTargets {
    pub len: usize,
    pub vocab: usize,
    pub weights: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Positions with at least one nonzero weight.
    pub active_positions: usize,
}

/// w(i, y) = σ_t · Q(y → x_t,i) for y ≠ x_t,i, and r = p(y | x0) / p(x_t | x0).
/// Under the absorbing kernel only MASK positions carry weight.
pub fn dse_targets(
    kernel: &NoiseKernel,
    x0: &[usize],
    xt: &[usize],
    sigma_bar: f64,
    sigma_t: f64,
) -> Result<DseTargets> {
    if x0.len() != xt.len() || x0.is_empty() {
        return invalid(format!("x0 has length {}, x_t has length {}", x0.len(), xt.len()));
    }
    if !(sigma_t > 0.0 && sigma_t.is_finite()) {
        return invalid(format!("σ_t must be positive, got {sigma_t}"));
    }
    let n = kernel.n;
    let mut weights = vec![0.0; xt.len() * n];
    let mut ratios = vec![0.0; xt.len() * n];
    let mut active = 0;
    for (i, (&a, &b)) in x0.iter().zip(xt).enumerate() {
        let mut any = false;
        for y in 0..n {
            if y == b {
                continue;
            }
            let q = kernel.rate(y, b);
            if q > 0.0 {
                weights[i * n + y] = sigma_t * q;
                ratios[i * n + y] = kernel.posterior_ratio(sigma_bar, a, b, y)?;
                any = true;
            }
        }
        active += usize::from(any);
    }
    Ok(DseTargets {
        len: xt.len(),
        vocab: n,
        weights,
        ratios,
        active_positions: active,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DseBatchLoss {
    /// Mean over sequences of nats per token.
    pub loss: f64,
    pub per_sequence: Vec<f64>,
    pub active_positions: usize,
}

/// One term w·(s − r log s [+ r log r − r]).
fn dse_term(w: f64, s: f64, r: f64, mode: LossMode) -> f64 {
    match mode {
        LossMode::Train => w * (s - r * s.ln()),
        LossMode::Bound if r > 0.0 => {
            let u = s / r;
            w * r * (u - u.ln() - 1.0)
        }
        LossMode::Bound => w * s,
    }
}

/// Sum of weighted terms over all positions, not normalized.
pub(crate) fn dse_sum(field: &ScoreField, targets: &DseTargets, mode: LossMode) -> Result<f64> {
    if field.len() != targets.len || field.vocab() != targets.vocab {
        return Err(Error::Invalid(format!(
            "score field {}×{} does not match targets {}×{}",
            field.len(),
            field.vocab(),
            targets.len,
            targets.vocab
        )));
    }
    Ok(targets
        .weights
        .iter()
        .zip(&targets.ratios)
        .zip(field.values())
        .filter(|((&w, _), _)| w > 0.0)
        .map(|((&w, &r), &s)| dse_term(w, s, r, mode))
        .sum())
}

/// DSE of a single noisy sequence, in nats per token.
pub fn dse_loss(
    field: &ScoreField,
    x0: &[usize],
    xt: &[usize],
    sigma_bar: f64,
    sigma_t: f64,
    kernel: &NoiseKernel,
    mode: LossMode,
) -> Result<DseBatchLoss> {
    let targets = dse_targets(kernel, x0, xt, sigma_bar, sigma_t)?;
    let v = dse_sum(field, &targets, mode)? / xt.len() as f64;
    Ok(DseBatchLoss {
        loss: v,
        per_sequence: vec![v],
        active_positions: targets.active_positions,
    })
}

/// Batch version of [`dse_loss`]; the loss is the mean over sequences.
#[allow(clippy::too_many_arguments)]
pub fn dse_batch_loss(
    fields: &[ScoreField],
    x0: &[Vec<usize>],
    xt: &[Vec<usize>],
    sigma_bars: &[f64],
    sigma_ts: &[f64],
    kernel: &NoiseKernel,
    mode: LossMode,
) -> Result<DseBatchLoss> {
    let b = fields.len();
    if [x0.len(), xt.len(), sigma_bars.len(), sigma_ts.len()].iter().any(|&n| n != b) || b == 0 {
        return invalid("batch components have mismatched lengths");
    }
    let mut per_sequence = Vec::with_capacity(b);
    let mut active = 0;
    for i in 0..b {
        let l = dse_loss(&fields[i], &x0[i], &xt[i], sigma_bars[i], sigma_ts[i], kernel, mode)?;
        per_sequence.push(l.loss);
        active += l.active_positions;
    }
    Ok(DseBatchLoss {
        loss: per_sequence.iter().sum::<f64>() / b as f64,
        per_sequence,
        active_positions: active,
    })
}

/// Differentiable train-mode DSE for log-scores [B·L, N]:
/// (Σ w·exp(logit) − Σ w·r·logit) / (B·L).
pub fn dse_graph<T: Scalar>(tape: &mut Tape<T>, log_scores: Var, targets: &[DseTargets]) -> Result<Var> {
    let shape = tape.shape(log_scores).to_vec();
    let rows: usize = targets.iter().map(|t| t.len).sum();
    if shape.len() != 2 || shape[0] != rows || targets.iter().any(|t| t.vocab != shape[1]) {
        return invalid(format!("log-scores {shape:?} do not match DSE targets"));
    }
    let w: Vec<f64> = targets.iter().flat_map(|t| t.weights.iter().copied()).collect();
    let wr: Vec<f64> = targets
        .iter()
        .flat_map(|t| t.weights.iter().zip(&t.ratios).map(|(w, r)| w * r))
        .collect();
    let w = tape.constant(Tensor::from_f64(&shape, &w)?);
    let wr = tape.constant(Tensor::from_f64(&shape, &wr)?);
    let s = tape.exp(log_scores)?;
    let a = tape.mul(s, w)?;
    let a = tape.sum(a);
    let b = tape.mul(log_scores, wr)?;
    let b = tape.sum(b);
    let d = tape.sub(a, b)?;
    Ok(tape.scale(d, 1.0 / rows as f64))
}

/// Mean negative log-softmax at the targets, in nats per token.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
        return invalid(format!("logits {shape:?} do not match {} targets", targets.len()));
    }
    let n = shape[1];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(Error::TokenOutOfRange {
                id: t,
                position: i,
                size: n,
            });
        }
        total -= crate::model::log_softmax_at(logits.row(i), t);
    }
    Ok(total / targets.len() as f64)
}

/// Differentiable cross-entropy for logits [R, N].
pub fn ce_graph<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return invalid(format!("logits {shape:?} do not match {} targets", targets.len()));
    }
    let n = shape[1];
    let mut onehot = vec![0.0; targets.len() * n];
    for (i, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(Error::TokenOutOfRange {
                id: t,
                position: i,
                size: n,
            });
        }
        onehot[i * n + t] = 1.0;
    }
    let oh = tape.constant(Tensor::from_f64(&shape, &onehot)?);
    let lp = tape.log_softmax(logits);
    let picked = tape.mul(lp, oh)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / targets.len() as f64))
}
