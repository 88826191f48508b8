use sedd_tensor::{AdamW, AdamWConfig, Tape, Tensor};

use super::loss::dse_targets;
use crate::error::{invalid, Result};
use crate::model::{ParamStore, TabularConfig, TabularScore};
use crate::noise::NoiseProcess;
use crate::oracle::EnumeratedDistribution;

/// Coefficients of the exact expected DSE at each knot: the objective is
/// Σ A·exp(θ) − B·θ over (knot, state, position, token).
#[derive(Debug, Clone)]
pub struct TabularFit {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Enumerate x0 ~ p0 and x_t ~ p(·|x0) at each knot using the closed-form
/// marginals and accumulate expected weights (A) and weighted ratios (B).
pub fn expected_dse_coefficients(
    p0: &EnumeratedDistribution,
    process: &NoiseProcess,
    config: &TabularConfig,
) -> Result<TabularFit> {
    let space = p0.space;
    if space.n != config.vocab || space.len != config.len || process.kernel.n != space.n {
        return invalid("tabular descriptor, p0 and kernel disagree on N or L");
    }
    let block = space.len * space.n;
    let total = config.knots.len() * space.size * block;
    let (mut a, mut b) = (vec![0.0; total], vec![0.0; total]);
    let kernel = &process.kernel;
    for (k, &sb) in config.knots.iter().enumerate() {
        let st = process.schedule.sigma_rate(process.schedule.time_of(sb)?)?;
        for (ix0, &p) in p0.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let x0 = space.tokens(ix0);
            for ixt in 0..space.size {
                let xt = space.tokens(ixt);
                let q: f64 = x0.iter().zip(&xt).map(|(&u, &v)| kernel.transition(sb, u, v)).product();
                if q == 0.0 {
                    continue;
                }
                let tg = dse_targets(kernel, &x0, &xt, sb, st)?;
                let off = (k * space.size + ixt) * block;
                for j in 0..block {
                    let w = tg.weights[j];
                    if w > 0.0 {
                        a[off + j] += p * q * w;
                        b[off + j] += p * q * w * tg.ratios[j];
                    }
                }
            }
        }
    }
    Ok(TabularFit { a, b })
}

/// Fit a tabular score by AdamW on the exact expected DSE. Entries are
/// independent, so each term A·e^θ − B·θ is divided by its own B (or A when
/// B = 0). The minimizer does not move and every entry gets unit curvature
/// at its optimum, so rare states converge as fast as common ones.
pub fn fit_tabular(
    p0: &EnumeratedDistribution,
    process: &NoiseProcess,
    config: TabularConfig,
    steps: usize,
    lr: f64,
) -> Result<TabularScore<f64>> {
    let fit = expected_dse_coefficients(p0, process, &config)?;
    let mut model = TabularScore::<f64>::new(config)?;
    let shape = model.table().shape().to_vec();
    let (mut scale, mut lin) = (vec![0.0; fit.a.len()], vec![0.0; fit.a.len()]);
    for (j, (&a, &b)) in fit.a.iter().zip(&fit.b).enumerate() {
        if b > 0.0 {
            (scale[j], lin[j]) = (a / b, 1.0);
        } else if a > 0.0 {
            scale[j] = 1.0;
        }
    }
    let mask = Tensor::from_f64(&shape, &scale)?;
    let ratio = Tensor::from_f64(&shape, &lin)?;
    let weight = 1.0 / fit.a.iter().filter(|&&a| a > 0.0).count().max(1) as f64;
    // Short second-moment memory: gradients shrink by orders of magnitude on
    // the way down from θ = 0, and a long memory would stall the descent.
    let mut opt = AdamW::<f64>::new(AdamWConfig {
        beta2: 0.9,
        ..AdamWConfig::default()
    });
    let mut params: Vec<Tensor<f64>> = model.params.tensors().to_vec();
    for step in 0..steps {
        let mut tape = Tape::<f64>::new();
        let theta = tape.param(&params[0]);
        let m = tape.constant(mask.clone());
        let r = tape.constant(ratio.clone());
        let e = tape.exp(theta)?;
        let e = tape.mul(e, m)?;
        let e = tape.sum(e);
        let lin = tape.mul(theta, r)?;
        let lin = tape.sum(lin);
        let loss = tape.sub(e, lin)?;
        let loss = tape.scale(loss, weight);
        let g = tape.backward(loss)?.wrt(theta, &params[0]);
        let progress = step as f64 / steps.max(1) as f64;
        let lr_t = lr * (1e-3 + (1.0 - 1e-3) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        opt.step(&mut params, &[g], lr_t)?;
    }
    model.params = ParamStore::from_named(vec![(model.params.names()[0].clone(), params.remove(0))]);
    Ok(model)
}
