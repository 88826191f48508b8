//! Brute-force reference for tiny state spaces: dense matrix exponentials,
//! exact sequence-level marginals, concrete scores, time reversal and NLL.
//! Deliberately shares no arithmetic with the closed forms in `noise`.

use std::sync::Mutex;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::model::{ScoreField, ScoreModel};
use crate::noise::{NoiseKernel, Schedule};

/// Largest N^L the oracle will enumerate.
pub const ORACLE_BUDGET: usize = 4096;

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return invalid(format!("{} entries do not form a {n}×{n} matrix", data.len()));
        }
        Ok(Self { n, data })
    }

    /// σ̄ · Q for a kernel's generator.
    pub fn scaled_generator(kernel: &NoiseKernel, sigma_bar: f64) -> Self {
        let data = kernel.generator().into_iter().map(|q| q * sigma_bar).collect();
        Self { n: kernel.n, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a != 0.0 {
                    for j in 0..n {
                        out[i * n + j] += a * other.data[k * n + j];
                    }
                }
            }
        }
        Matrix { n, data: out }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// exp(A) for a scaled generator A by scaling-and-squaring on a Taylor series.
pub fn matrix_exponential(a: &Matrix) -> Result<Matrix> {
    let n = a.n;
    let scale = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        let row = a.row(i);
        let sum: f64 = row.iter().sum();
        if sum.abs() > 1e-9 * scale {
            return Err(Error::NotGenerator(format!("row {i} sums to {sum}")));
        }
        if let Some(j) = (0..n).find(|&j| j != i && row[j] < 0.0) {
            return Err(Error::NotGenerator(format!("negative off-diagonal rate at ({i}, {j})")));
        }
    }
    let norm = (0..n)
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let div = 2f64.powi(squarings as i32);
    let small = Matrix {
        n,
        data: a.data.iter().map(|v| v / div).collect(),
    };
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..60 {
        term = term.matmul(&small);
        term.data.iter_mut().for_each(|v| *v /= k as f64);
        for (s, t) in sum.data.iter_mut().zip(&term.data) {
            *s += t;
        }
        if term.data.iter().all(|v| v.abs() < 1e-20) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum.matmul(&sum);
    }
    Ok(sum)
}

/// X^L with base-N indexing, position 0 most significant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceSpace {
    pub n: usize,
    pub len: usize,
    pub size: usize,
}

impl SequenceSpace {
    pub fn new(n: usize, len: usize) -> Result<Self> {
        let size = (n as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
        if size > ORACLE_BUDGET as u128 || n == 0 || len == 0 {
            return Err(Error::Budget {
                size,
                budget: ORACLE_BUDGET,
            });
        }
        Ok(Self {
            n,
            len,
            size: size as usize,
        })
    }

    pub fn index(&self, tokens: &[usize]) -> usize {
        tokens.iter().fold(0, |acc, &t| acc * self.n + t)
    }

    pub fn tokens(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.len];
        for slot in out.iter_mut().rev() {
            *slot = index % self.n;
            index /= self.n;
        }
        out
    }

    /// Index of `tokens` with position `i` replaced by `y`.
    pub fn neighbor(&self, index: usize, i: usize, y: usize) -> usize {
        let stride = self.n.pow((self.len - 1 - i) as u32);
        let cur = (index / stride) % self.n;
        index - cur * stride + y * stride
    }
}

/// Dense probability table over X^L.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedDistribution {
    pub space: SequenceSpace,
    pub probs: Vec<f64>,
}

impl EnumeratedDistribution {
    pub fn new(space: SequenceSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.size {
            return invalid("probability table does not cover the state space");
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-10 {
            return invalid(format!("table is not a distribution (sum {total})"));
        }
        Ok(Self { space, probs })
    }

    /// Normalize nonnegative weights into a distribution.
    pub fn from_weights(space: SequenceSpace, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return invalid("weights must have positive mass");
        }
        Self::new(space, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn point_mass(space: SequenceSpace, tokens: &[usize]) -> Self {
        let mut probs = vec![0.0; space.size];
        probs[space.index(tokens)] = 1.0;
        Self { space, probs }
    }

    /// Product of independent per-position distributions.
    pub fn product(space: SequenceSpace, marginals: &[Vec<f64>]) -> Result<Self> {
        if marginals.len() != space.len {
            return invalid("one marginal per position required");
        }
        let probs = (0..space.size)
            .map(|ix| {
                space
                    .tokens(ix)
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| marginals[i][t])
                    .product()
            })
            .collect();
        Self::new(space, probs)
    }

    pub fn prob(&self, tokens: &[usize]) -> f64 {
        self.probs[self.space.index(tokens)]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.space.tokens(i);
            }
        }
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        self.space.tokens(last)
    }

    /// Empirical distribution of sampled sequences.
    pub fn empirical(space: SequenceSpace, samples: &[Vec<usize>]) -> Result<Self> {
        let mut counts = vec![0.0; space.size];
        for s in samples {
            counts[space.index(s)] += 1.0;
        }
        Self::from_weights(space, counts)
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Per-position marginal distributions.
    pub fn position_marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.space.n]; self.space.len];
        for (ix, &p) in self.probs.iter().enumerate() {
            for (i, t) in self.space.tokens(ix).into_iter().enumerate() {
                out[i][t] += p;
            }
        }
        out
    }
}

/// Apply a per-position stochastic matrix to every coordinate.
fn apply_per_position(dist: &EnumeratedDistribution, p: &Matrix) -> EnumeratedDistribution {
    let space = dist.space;
    let mut cur = dist.probs.clone();
    for i in 0..space.len {
        let mut next = vec![0.0; space.size];
        for (ix, &mass) in cur.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let a = space.tokens(ix)[i];
            for y in 0..space.n {
                next[space.neighbor(ix, i, y)] += mass * p.get(a, y);
            }
        }
        cur = next;
    }
    EnumeratedDistribution { space, probs: cur }
}

/// Exact p_σ̄ over X^L, corrupting each coordinate with exp(σ̄Q).
pub fn exact_pt(p0: &EnumeratedDistribution, kernel: &NoiseKernel, sigma_bar: f64) -> Result<EnumeratedDistribution> {
    if p0.space.n != kernel.n {
        return invalid("p0 alphabet does not match kernel size");
    }
    let p = matrix_exponential(&Matrix::scaled_generator(kernel, sigma_bar))?;
    Ok(apply_per_position(p0, &p))
}

/// True ratios p(x with x_i := y) / p(x). Exact zeros are floored to the
/// smallest positive f64 so the field stays strictly positive.
pub fn exact_concrete_score(pt: &EnumeratedDistribution, x: &[usize]) -> Result<ScoreField> {
    let space = pt.space;
    let ix = space.index(x);
    let px = pt.probs[ix];
    if !(px > 0.0) {
        return Err(Error::ZeroProbability);
    }
    let mut values = Vec::with_capacity(space.len * space.n);
    for i in 0..space.len {
        for y in 0..space.n {
            let r = if y == x[i] { 1.0 } else { pt.probs[space.neighbor(ix, i, y)] / px };
            values.push(r.max(f64::MIN_POSITIVE));
        }
    }
    ScoreField::new(space.len, space.n, values)
}

/// Dense reverse transition table T[x][x'] = p(x_s = x' | x_t = x).
#[derive(Debug, Clone)]
pub struct ReverseKernel {
    pub t: f64,
    pub s: f64,
    pub space: SequenceSpace,
    pub table: Vec<f64>,
}

impl ReverseKernel {
    pub fn row(&self, x: usize) -> &[f64] {
        &self.table[x * self.space.size..(x + 1) * self.space.size]
    }

    pub fn push(&self, dist: &EnumeratedDistribution) -> EnumeratedDistribution {
        let size = self.space.size;
        let mut out = vec![0.0; size];
        for (x, &m) in dist.probs.iter().enumerate() {
            if m != 0.0 {
                for (o, &p) in out.iter_mut().zip(self.row(x)) {
                    *o += m * p;
                }
            }
        }
        EnumeratedDistribution { space: self.space, probs: out }
    }
}

/// Exact reverse kernels between consecutive times of a decreasing grid,
/// obtained by Bayes' rule over exact marginals.
pub fn exact_reverse_kernels(
    p0: &EnumeratedDistribution,
    kernel: &NoiseKernel,
    schedule: &Schedule,
    grid: &[f64],
) -> Result<Vec<ReverseKernel>> {
    let space = p0.space;
    if space.size > 1024 {
        return Err(Error::Budget {
            size: space.size as u128,
            budget: 1024,
        });
    }
    let mut out = Vec::new();
    for w in grid.windows(2) {
        let (t, s) = (w[0], w[1]);
        if !(s < t) {
            return invalid("time grid must be strictly decreasing");
        }
        let (sb_t, sb_s) = (schedule.sigma_bar(t)?, schedule.sigma_bar(s)?);
        let pt = exact_pt(p0, kernel, sb_t)?;
        let ps = exact_pt(p0, kernel, sb_s)?;
        let f = matrix_exponential(&Matrix::scaled_generator(kernel, sb_t - sb_s))?;
        let mut table = vec![0.0; space.size * space.size];
        for x in 0..space.size {
            let row = &mut table[x * space.size..(x + 1) * space.size];
            if pt.probs[x] <= 0.0 {
                row[x] = 1.0;
                continue;
            }
            let xt = space.tokens(x);
            for (xs, slot) in row.iter_mut().enumerate() {
                if ps.probs[xs] == 0.0 {
                    continue;
                }
                let lik: f64 = space.tokens(xs).iter().zip(&xt).map(|(&a, &b)| f.get(a, b)).product();
                *slot = ps.probs[xs] * lik / pt.probs[x];
            }
        }
        out.push(ReverseKernel {
            t,
            s,
            space,
            table,
        });
    }
    Ok(out)
}

/// Sequence-level reverse generator out of `x` at a time with marginal `pt`
/// and rate σ_t: entry (i, y) is the rate of jumping to x with x_i := y,
/// p_t(x') Q_seq(x' → x) / p_t(x), built from the dense generator matrix.
pub fn exact_reverse_generator(
    pt: &EnumeratedDistribution,
    kernel: &NoiseKernel,
    sigma_t: f64,
    x: &[usize],
) -> Result<Vec<f64>> {
    let space = pt.space;
    let q = Matrix::from_vec(kernel.n, kernel.generator())?;
    let ix = space.index(x);
    let px = pt.probs[ix];
    if !(px > 0.0) {
        return Err(Error::ZeroProbability);
    }
    let mut out = vec![0.0; space.len * space.n];
    for i in 0..space.len {
        let mut total = 0.0;
        for y in 0..space.n {
            if y == x[i] {
                continue;
            }
            let j = space.neighbor(ix, i, y);
            let r = pt.probs[j] * sigma_t * q.get(y, x[i]) / px;
            out[i * space.n + y] = r;
            total += r;
        }
        out[i * space.n + x[i]] = -total;
    }
    Ok(out)
}

/// −log p0(x) / L in nats; +∞ when p0(x) = 0.
pub fn exact_nll(p0: &EnumeratedDistribution, x: &[usize]) -> f64 {
    let p = p0.prob(x);
    if p > 0.0 {
        -p.ln() / x.len() as f64
    } else {
        f64::INFINITY
    }
}

/// Score model returning exact concrete scores of a known p0; the marginal
/// table for the most recent σ̄ is cached.
pub struct ExactScore {
    p0: EnumeratedDistribution,
    kernel: NoiseKernel,
    cache: Mutex<Option<(u64, EnumeratedDistribution)>>,
}

impl ExactScore {
    pub fn new(p0: EnumeratedDistribution, kernel: NoiseKernel) -> Result<Self> {
        if p0.space.n != kernel.n {
            return invalid("p0 alphabet does not match kernel size");
        }
        Ok(Self {
            p0,
            kernel,
            cache: Mutex::new(None),
        })
    }

    pub fn p0(&self) -> &EnumeratedDistribution {
        &self.p0
    }

    fn with_pt<R>(&self, sigma_bar: f64, f: impl FnOnce(&EnumeratedDistribution) -> R) -> Result<R> {
        let mut guard = self.cache.lock().map_err(|_| Error::Invalid("oracle cache poisoned".into()))?;
        let key = sigma_bar.to_bits();
        if guard.as_ref().map(|c| c.0) != Some(key) {
            *guard = Some((key, exact_pt(&self.p0, &self.kernel, sigma_bar)?));
        }
        Ok(f(&guard.as_ref().unwrap().1))
    }
}

impl ScoreModel for ExactScore {
    fn vocab_size(&self) -> usize {
        self.kernel.n
    }

    fn context_len(&self) -> usize {
        self.p0.space.len
    }

    fn score_batch(&self, batch: &[Vec<usize>], sigma_bars: &[f64]) -> Result<Vec<ScoreField>> {
        batch
            .iter()
            .zip(sigma_bars)
            .map(|(x, &sb)| {
                if x.len() != self.p0.space.len {
                    return invalid("exact score needs full-length sequences");
                }
                self.with_pt(sb, |pt| exact_concrete_score(pt, x))?
            })
            .collect()
    }
}
