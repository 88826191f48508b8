//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op evaluates eagerly and appends one node; `backward` walks the
//! list once in reverse. Broadcasting is limited to a right-hand operand
//! whose shape is a suffix of the left operand's shape.

use crate::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LOG_FLOOR: f64 = 1e-30;
const LN_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { a: Var, inv_std: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    MaskedFill { a: Var, mask: Vec<bool> },
    Sum(Var),
    Reshape(Var),
    Permute { a: Var, axes: Vec<usize> },
    Narrow { a: Var, start: usize, len: usize },
    Rope { a: Var, offset: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
    flops: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records ops for `backward`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            flops: 0,
        }
    }

    /// Inference-only tape: values are kept, provenance is not.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add FLOPs (2 per MAC) issued by matmuls on this tape.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone(), self.record)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn finite(&self, op: &'static str, data: &[T]) -> Result<()> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a @ b` where `a` is `[.., m, k]` and `b` is `[k, n]` (shared across
    /// the batch) or `[.., k, n]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` where `b` is `[n, k]` or `[.., n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op_name = if trans_b { "matmul_bt" } else { "matmul" };
        let dims = MatDims::resolve(op_name, self.shape(a), self.shape(b), trans_b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        let (rsb, csb) = if trans_b {
            (1, dims.k as isize)
        } else {
            (dims.n as isize, 1)
        };
        if dims.shared_b {
            T::gemm(
                dims.batch * dims.m,
                dims.k,
                dims.n,
                T::one(),
                av.data(),
                dims.k as isize,
                1,
                bv.data(),
                rsb,
                csb,
                T::zero(),
                &mut out,
                dims.n as isize,
                1,
            );
        } else {
            let (sa, sb, sc) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
            for i in 0..dims.batch {
                T::gemm(
                    dims.m,
                    dims.k,
                    dims.n,
                    T::one(),
                    &av.data()[i * sa..(i + 1) * sa],
                    dims.k as isize,
                    1,
                    &bv.data()[i * sb..(i + 1) * sb],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[i * sc..(i + 1) * sc],
                    dims.n as isize,
                    1,
                );
            }
        }
        self.flops += 2 * (dims.batch * dims.m * dims.n * dims.k) as u64;
        self.finite(op_name, &out)?;
        let value = Tensor::new(dims.out_shape.clone(), out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(())
        } else {
            Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        record: Op<T>,
    ) -> Result<Var> {
        self.check_suffix(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<T> = av
            .data()
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(value, record, &[a, b]))
    }

    /// `a + b` with `b` broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, record: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, record, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.exp());
        self.finite("exp", value.data())?;
        Ok(self.push(value, Op::Exp(a), &[a]))
    }

    /// Natural log with inputs clamped to at least 1e-30.
    pub fn log(&mut self, a: Var) -> Var {
        let floor = T::from_f64_lossy(LOG_FLOOR);
        self.unary(a, |x| x.max(floor).ln(), Op::Log(a))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_fwd(x), Op::Gelu(a))
    }

    // ---- row-wise over the last axis -----------------------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = av.to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        let value = Tensor::new(av.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = av.to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(av.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Normalize each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.last_dim();
        let eps = T::from_f64_lossy(LN_EPS);
        let inv_d = T::one() / T::from_usize(d).expect("dim fits");
        let mut out = av.to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let value = Tensor::new(av.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::LayerNorm { a, inv_std }, &[a])
    }

    // ---- indexing & layout ---------------------------------------------

    /// Rows of a `[v, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(TensorError::Shape {
                op: "gather",
                lhs: tv.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "gather",
                    index: id,
                    position: pos,
                    bound: rows,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Replace entries where `mask` is true by `fill`; `mask_shape` must be a
    /// suffix of the shape of `a`.
    pub fn masked_fill(
        &mut self,
        a: Var,
        mask: &[bool],
        mask_shape: &[usize],
        fill: f64,
    ) -> Result<Var> {
        let av = self.value(a);
        let sa = av.shape();
        let suffix_ok = mask_shape.len() <= sa.len()
            && sa[sa.len() - mask_shape.len()..] == *mask_shape
            && mask.len() == mask_shape.iter().product::<usize>();
        if !suffix_ok {
            return Err(TensorError::Shape {
                op: "masked_fill",
                lhs: sa.to_vec(),
                rhs: mask_shape.to_vec(),
            });
        }
        let fill = T::from_f64_lossy(fill);
        let out: Vec<T> = av
            .data()
            .chunks(mask.len().max(1))
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(mask)
                    .map(|(&x, &m)| if m { fill } else { x })
            })
            .collect();
        let value = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(
            value,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            &[a],
        ))
    }

    /// Sum of all entries as a rank-0 tensor; accumulated in f64.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum_f64();
        self.push(Tensor::scalar(T::from_f64_lossy(total)), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let rank = av.rank();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank
            && axes.iter().all(|&ax| ax < rank && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(TensorError::Shape {
                op: "permute",
                lhs: av.shape().to_vec(),
                rhs: axes.to_vec(),
            });
        }
        let (shape, out) = permute_data(av.shape(), av.data(), axes);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if av.rank() == 0 || start + len > d {
            return Err(TensorError::Shape {
                op: "narrow",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out: Vec<T> = av
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank > 0") = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Narrow { a, start, len }, &[a]))
    }

    /// Rotary position embedding over `[.., seq, head_dim]` using the
    /// half-split pairing `(j, j + head_dim / 2)`; positions start at `offset`.
    pub fn rope(&mut self, a: Var, offset: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape();
        if shape.len() < 2 || shape[shape.len() - 1] % 2 != 0 {
            return Err(TensorError::Shape {
                op: "rope",
                lhs: shape.to_vec(),
                rhs: vec![offset],
            });
        }
        let (seq, dh) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let table = RopeTable::<T>::new(seq, dh, offset);
        let mut out = av.to_vec();
        for block in out.chunks_mut(seq * dh) {
            table.rotate(block, false);
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(value, Op::Rope { a, offset }, &[a]))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Gradients of a scalar `loss` w.r.t. every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        self.finite("backward", lv.data())?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot =
            grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let dims = MatDims::resolve("matmul", av.shape(), bv.shape(), *trans_b)?;
                self.matmul_backward(&dims, *a, *b, *trans_b, g, grads);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| reduce_into(gb, g, T::one()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| reduce_into(gb, g, -T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len();
                self.accumulate(grads, *a, |ga| {
                    for (i, ga) in ga.iter_mut().enumerate() {
                        *ga += g[i] * bv[i % nb];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, (&gi, &ai)) in g.iter().zip(av).enumerate() {
                        gb[i % nb] += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * c)
                });
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::Exp(a) => self.accumulate(grads, *a, |ga| {
                for ((d, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                    *d += gi * yi;
                }
            }),
            Op::Log(a) => {
                let x = self.value(*a).data();
                let floor = T::from_f64_lossy(LOG_FLOOR);
                self.accumulate(grads, *a, |ga| {
                    for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > floor {
                            *d += gi / xi;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *d += gi * gelu_grad(xi);
                    }
                });
            }
            Op::Softmax(a) => {
                let d = node.value.last_dim();
                self.accumulate(grads, *a, |ga| {
                    for ((ga, gr), yr) in ga.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                        for ((d, &gi), &yi) in ga.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let d = node.value.last_dim();
                self.accumulate(grads, *a, |ga| {
                    for ((ga, gr), yr) in ga.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let total: T = gr.iter().copied().sum();
                        for ((d, &gi), &yi) in ga.iter_mut().zip(gr).zip(yr) {
                            *d += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { a, inv_std } => {
                let d = node.value.last_dim();
                let inv_d = T::one() / T::from_usize(d).expect("dim fits");
                self.accumulate(grads, *a, |ga| {
                    for (((ga, gr), yr), &is) in ga
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(y.chunks(d))
                        .zip(inv_std)
                    {
                        let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                        let mean_gy =
                            gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum::<T>() * inv_d;
                        for ((d, &gi), &yi) in ga.iter_mut().zip(gr).zip(yr) {
                            *d += is * (gi - mean_g - yi * mean_gy);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = node.value.last_dim();
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                let nm = mask.len().max(1);
                self.accumulate(grads, *a, |ga| {
                    for (i, (d, &gi)) in ga.iter_mut().zip(g).enumerate() {
                        if !mask[i % nm] {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g0));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (_, back) = permute_data(node.value.shape(), g, &inverse);
                self.accumulate(grads, *a, |ga| add_into(ga, &back));
            }
            Op::Narrow { a, start, len } => {
                let d = self.value(*a).last_dim();
                self.accumulate(grads, *a, |ga| {
                    for (row, gr) in ga.chunks_mut(d).zip(g.chunks(*len)) {
                        add_into(&mut row[*start..*start + *len], gr);
                    }
                });
            }
            Op::Rope { a, offset } => {
                let shape = node.value.shape();
                let (seq, dh) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let table = RopeTable::<T>::new(seq, dh, *offset);
                let mut back = g.to_vec();
                for block in back.chunks_mut(seq * dh) {
                    table.rotate(block, true);
                }
                self.accumulate(grads, *a, |ga| add_into(ga, &back));
            }
        }
        Ok(())
    }

    fn matmul_backward(
        &self,
        dims: &MatDims,
        a: Var,
        b: Var,
        trans_b: bool,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (m, k, n) = (dims.m, dims.k, dims.n);
        // op(B)^T as a [n, k] operand.
        let (rsbt, csbt) = if trans_b {
            (k as isize, 1)
        } else {
            (1, n as isize)
        };
        self.accumulate(grads, a, |ga| {
            if dims.shared_b {
                T::gemm(
                    dims.batch * m,
                    n,
                    k,
                    T::one(),
                    g,
                    n as isize,
                    1,
                    bv,
                    rsbt,
                    csbt,
                    T::one(),
                    ga,
                    k as isize,
                    1,
                );
            } else {
                for i in 0..dims.batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        &bv[i * k * n..(i + 1) * k * n],
                        rsbt,
                        csbt,
                        T::one(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        k as isize,
                        1,
                    );
                }
            }
        });
        self.accumulate(grads, b, |gb| {
            let rows = if dims.shared_b { dims.batch * m } else { m };
            let reps = if dims.shared_b { 1 } else { dims.batch };
            for i in 0..reps {
                let ai = &av[i * rows * k..(i + 1) * rows * k];
                let gi = &g[i * rows * n..(i + 1) * rows * n];
                let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                if trans_b {
                    // dB[n, k] += dC^T[n, rows] @ A[rows, k]
                    T::gemm(
                        n,
                        rows,
                        k,
                        T::one(),
                        gi,
                        1,
                        n as isize,
                        ai,
                        k as isize,
                        1,
                        T::one(),
                        gbi,
                        k as isize,
                        1,
                    );
                } else {
                    // dB[k, n] += A^T[k, rows] @ dC[rows, n]
                    T::gemm(
                        k,
                        rows,
                        n,
                        T::one(),
                        ai,
                        1,
                        k as isize,
                        gi,
                        n as isize,
                        1,
                        T::one(),
                        gbi,
                        n as isize,
                        1,
                    );
                }
            }
        });
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `v`, or `None` if `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `v` shaped like `like`; zeros when `v` is unused.
    pub fn wrt(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => Tensor::new(like.shape().to_vec(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(like.shape()),
        }
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    out_shape: Vec<usize>,
}

impl MatDims {
    fn resolve(op: &'static str, sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        let err = || TensorError::Shape {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(err());
        }
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: lead_a.iter().product(),
            m,
            k,
            n,
            shared_b,
            out_shape,
        })
    }
}

struct RopeTable<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Scalar> RopeTable<T> {
    fn new(seq: usize, dh: usize, offset: usize) -> Self {
        let half = dh / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for l in 0..seq {
            let pos = (offset + l) as f64;
            for j in 0..half {
                let theta = pos * ROPE_BASE.powf(-2.0 * j as f64 / dh as f64);
                cos.push(T::from_f64_lossy(theta.cos()));
                sin.push(T::from_f64_lossy(theta.sin()));
            }
        }
        Self { cos, sin, half }
    }

    fn rotate(&self, block: &mut [T], inverse: bool) {
        let half = self.half;
        for (l, row) in block.chunks_mut(2 * half).enumerate() {
            for j in 0..half {
                let (c, mut s) = (self.cos[l * half + j], self.sin[l * half + j]);
                if inverse {
                    s = -s;
                }
                let (x1, x2) = (row[j], row[j + half]);
                row[j] = x1 * c - x2 * s;
                row[j + half] = x1 * s + x2 * c;
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// `dst[i % len] += sign * src[i]` (reduce over broadcast leading dims).
fn reduce_into<T: Scalar>(dst: &mut [T], src: &[T], sign: T) {
    let n = dst.len();
    for chunk in src.chunks(n) {
        dst.iter_mut().zip(chunk).for_each(|(d, &s)| *d += sign * s);
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

// 1 - 2/(e^{2y}+1): one exp instead of libm tanh, saturates cleanly.
fn fast_tanh<T: Scalar>(y: T) -> T {
    let two = T::from_f64_lossy(2.0);
    T::one() - two / ((two * y).exp() + T::one())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + fast_tanh(c * (x + k * x * x * x)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = fast_tanh(c * (x + k * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

fn permute_data<T: Scalar>(shape: &[usize], data: &[T], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    // Copy contiguous runs when the innermost axis stays innermost.
    let (run, outer_rank) = if rank > 0 && axes[rank - 1] == rank - 1 {
        (shape[rank - 1], rank - 1)
    } else {
        (1, rank)
    };
    let mut idx = vec![0usize; outer_rank];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&data[base..base + run]);
        let mut ax = outer_rank;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn log_inverts_exp() {
        let mut tape = Tape::<f32>::new();
        let xs: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
        let x = tape.constant(Tensor::from_f64(&[xs.len()], &xs).unwrap());
        let e = tape.exp(x).unwrap();
        let l = tape.log(e);
        for (a, b) in tape.value(l).data().iter().zip(&xs) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let a = t(&[3, 3], &[0.3, -1.2, 2.0, 0.5, 0.1, -0.7, 1.5, 2.5, -3.0]);
        let i = tape.constant(Tensor::eye(3));
        let av = tape.constant(a.clone());
        let y = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&t(&[5], &[0.1, -2.0, 3.0, 0.5, 1.0]));
        let s = tape.softmax(x);
        let total = tape.sum(s);
        let g = tape.backward(total).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param(&t(&[2], &[1.0, 2.0]));
        let unused_value = t(&[3], &[1.0, 1.0, 1.0]);
        let unused = tape.param(&unused_value);
        let loss = tape.sum(used);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused, &unused_value).data(), &[0.0; 3]);
    }

    #[test]
    fn suffix_broadcast_only() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let bias = tape.constant(Tensor::full(&[3], 1.0));
        let col = tape.constant(Tensor::full(&[2], 1.0));
        assert!(tape.add(a, bias).is_ok());
        assert!(tape.add(a, col).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(tape.shape(p), &[3, 2, 4]);
        // element [1, 0, 2] of p is element [0, 1, 2] of x
        assert_eq!(tape.value(p).data()[8 + 2], 6.0);
        let back = tape.permute(p, &[1, 0, 2]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
        let q = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(q), &[4, 2, 3]);
        assert_eq!(tape.value(q).data()[1], 4.0);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let table = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.gather(table, &[0, 3]),
            Err(TensorError::Index { index: 3, .. })
        ));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.param(&Tensor::full(&[2], 1.0));
        let y = tape.sum(x);
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn matmul_counts_flops() {
        let mut tape = Tape::<f32>::no_grad();
        let a = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.flops(), 2 * 2 * 3 * 4 * 5);
    }
}
