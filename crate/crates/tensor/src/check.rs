//! Central finite differences, used as an independent oracle for `backward`.

use crate::{Result, Tape, Tensor, Var};

/// Loss value and analytic gradients of `build` w.r.t. each input.
pub fn analytic_gradient(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.value(loss).sum_f64();
    let grads = tape.backward(loss)?;
    Ok((
        value,
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v, t))
            .collect(),
    ))
}

/// Gradients of `f` by central differences with step `h`.
pub fn numeric_gradient(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&[Tensor<f64>]) -> Result<f64>,
) -> Result<Vec<Tensor<f64>>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].numel()];
        for (j, g) in grad.iter_mut().enumerate() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let plus = f(&work)?;
            work[i].data_mut()[j] = x - h;
            let minus = f(&work)?;
            work[i].data_mut()[j] = x;
            *g = (plus - minus) / (2.0 * h);
        }
        out.push(Tensor::new(inputs[i].shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|)` over all entries of all tensors, in L2 norm.
pub fn relative_error(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    let mut diff = 0.0;
    let (mut na, mut nb) = (0.0, 0.0);
    for (ta, tb) in a.iter().zip(b) {
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Compare analytic and finite-difference gradients of the same graph;
/// returns the relative error.
pub fn gradient_check(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let (_, analytic) = analytic_gradient(inputs, &build)?;
    let numeric = numeric_gradient(inputs, h, |xs| {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).sum_f64())
    })?;
    Ok(relative_error(&analytic, &numeric))
}
