use sedd_tensor::{Scalar, Tape, Var};

use crate::error::Result;

/// x·W + b.
pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// Multi-head self-attention over `qkv` laid out as [B·L, 3D]; returns [B·L, D].
pub(crate) fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    qkv: Var,
    batch: usize,
    len: usize,
    heads: usize,
    rope: bool,
    causal: bool,
) -> Result<Var> {
    let d = tape.shape(qkv)[1] / 3;
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, start: usize, rotate: bool| -> Result<Var> {
        let part = tape.narrow(qkv, start, d)?;
        let part = tape.reshape(part, &[batch, len, heads, dh])?;
        let part = tape.permute(part, &[0, 2, 1, 3])?;
        let part = if rotate { tape.rope(part, 0)? } else { part };
        Ok(tape.reshape(part, &[batch * heads, len, dh])?)
    };
    let q = split(tape, 0, rope)?;
    let k = split(tape, d, rope)?;
    let v = split(tape, 2 * d, false)?;
    let att = tape.matmul_bt(q, k)?;
    let mut att = tape.scale(att, 1.0 / (dh as f64).sqrt());
    if causal {
        let mask: Vec<bool> = (0..len * len).map(|i| i % len > i / len).collect();
        att = tape.masked_fill(att, &mask, &[len, len], -1e9)?;
    }
    let att = tape.softmax(att);
    let out = tape.matmul(att, v)?;
    let out = tape.reshape(out, &[batch, heads, len, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    Ok(tape.reshape(out, &[batch * len, d])?)
}

/// layer_norm(x) ⊙ (1 + scale) + shift.
pub(crate) fn modulated_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = tape.layer_norm(x);
    let s = tape.add_scalar(scale, 1.0);
    let h = tape.mul(h, s)?;
    Ok(tape.add(h, shift)?)
}

/// layer_norm(x) ⊙ gain + bias.
pub(crate) fn affine_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let h = tape.layer_norm(x);
    let h = tape.mul(h, gain)?;
    Ok(tape.add(h, bias)?)
}
