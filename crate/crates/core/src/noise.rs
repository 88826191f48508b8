//! Forward corruption: cumulative schedules, the uniform and absorbing
//! kernels, their closed-form marginals, posterior ratios and reverse rates.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::text::Vocab;

/// Lower end of the time interval used by losses and samplers.
pub const TIME_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Uniform,
    Absorb,
}

impl FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "absorb" | "absorbing" => Ok(Self::Absorb),
            _ => Err(Error::Config(format!("unknown kernel {s:?} (uniform|absorb)"))),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Absorb => "absorb",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    LogLinear { eps: f64 },
    Geometric { sigma_min: f64, sigma_max: f64 },
}

impl Schedule {
    pub fn loglinear() -> Self {
        Self::LogLinear { eps: 1e-3 }
    }

    pub fn geometric() -> Self {
        Self::Geometric {
            sigma_min: 1e-9,
            sigma_max: 20.0,
        }
    }

    pub fn default_for(kind: KernelKind) -> Self {
        match kind {
            KernelKind::Absorb => Self::loglinear(),
            KernelKind::Uniform => Self::geometric(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::LogLinear { .. } => "loglinear",
            Self::Geometric { .. } => "geometric",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::LogLinear { eps } if eps > 0.0 && eps < 1.0 => Ok(()),
            Self::Geometric { sigma_min, sigma_max }
                if sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite() =>
            {
                Ok(())
            }
            s => Err(Error::Config(format!("invalid schedule parameters {s:?}"))),
        }
    }

    fn check_t(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            invalid(format!("time {t} outside [0, 1]"))
        }
    }

    /// σ̄(t).
    pub fn sigma_bar(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(match *self {
            Self::LogLinear { eps } => -(-(1.0 - eps) * t).ln_1p(),
            Self::Geometric { sigma_min, sigma_max } => sigma_min.powf(1.0 - t) * sigma_max.powf(t),
        })
    }

    /// σ_t = dσ̄/dt.
    pub fn sigma_rate(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(match *self {
            Self::LogLinear { eps } => (1.0 - eps) / (1.0 - (1.0 - eps) * t),
            Self::Geometric { sigma_min, sigma_max } => {
                self.sigma_bar(t)? * (sigma_max / sigma_min).ln()
            }
        })
    }

    /// Inverse of σ̄ on [σ̄(0), σ̄(1)].
    pub fn time_of(&self, sigma_bar: f64) -> Result<f64> {
        let (lo, hi) = (self.sigma_bar(0.0)?, self.sigma_bar(1.0)?);
        if !(sigma_bar >= lo * (1.0 - 1e-12) && sigma_bar <= hi * (1.0 + 1e-12)) {
            return invalid(format!("σ̄ = {sigma_bar} outside schedule range [{lo}, {hi}]"));
        }
        let t = match *self {
            Self::LogLinear { eps } => -(-sigma_bar).exp_m1() / (1.0 - eps),
            Self::Geometric { sigma_min, sigma_max } => {
                (sigma_bar / sigma_min).ln() / (sigma_max / sigma_min).ln()
            }
        };
        Ok(t.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return invalid(format!("not a distribution (sum {total})"));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

/// (e^{-σ̄}, 1 - e^{-σ̄}) computed without cancellation.
fn keep_move(sigma_bar: f64) -> (f64, f64) {
    ((-sigma_bar).exp(), -(-sigma_bar).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseKernel {
    pub kind: KernelKind,
    /// Full vocabulary size; for the absorbing kernel MASK is `n - 1`.
    pub n: usize,
}

impl NoiseKernel {
    pub fn new(kind: KernelKind, n: usize) -> Result<Self> {
        if n < 2 {
            return invalid(format!("kernel needs at least 2 states, got {n}"));
        }
        Ok(Self { kind, n })
    }

    pub fn for_vocab(vocab: &Vocab) -> Self {
        Self {
            kind: vocab.kernel_kind(),
            n: vocab.size().max(2),
        }
    }

    pub fn mask_id(&self) -> Option<usize> {
        (self.kind == KernelKind::Absorb).then_some(self.n - 1)
    }

    pub fn is_mask(&self, token: usize) -> bool {
        self.mask_id() == Some(token)
    }

    /// Tokens that can appear in clean data.
    pub fn clean_size(&self) -> usize {
        match self.kind {
            KernelKind::Uniform => self.n,
            KernelKind::Absorb => self.n - 1,
        }
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.n {
            return Err(Error::TokenOutOfRange {
                id: token,
                position: 0,
                size: self.n,
            });
        }
        Ok(())
    }

    fn check_clean(&self, x0: usize) -> Result<()> {
        self.check_token(x0)?;
        if self.is_mask(x0) {
            return invalid("clean token cannot be MASK");
        }
        Ok(())
    }

    /// Forward generator entry Q(from → to).
    pub fn rate(&self, from: usize, to: usize) -> f64 {
        let n = self.n as f64;
        match self.kind {
            KernelKind::Uniform if from == to => 1.0 / n - 1.0,
            KernelKind::Uniform => 1.0 / n,
            KernelKind::Absorb => {
                let mask = self.n - 1;
                if from == mask {
                    0.0
                } else if to == mask {
                    1.0
                } else if from == to {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Dense generator, row-major, rows indexed by the source state.
    pub fn generator(&self) -> Vec<f64> {
        let mut q = Vec::with_capacity(self.n * self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                q.push(self.rate(i, j));
            }
        }
        q
    }

    /// exp(σ̄Q)(from, to) in closed form; valid for any source, MASK included.
    pub fn transition(&self, sigma_bar: f64, from: usize, to: usize) -> f64 {
        let (keep, moved) = keep_move(sigma_bar);
        let same = if from == to { 1.0 } else { 0.0 };
        match self.kind {
            KernelKind::Uniform => keep * same + moved / self.n as f64,
            KernelKind::Absorb => {
                let mask = self.n - 1;
                if from == mask {
                    same
                } else if to == mask {
                    moved
                } else {
                    keep * same
                }
            }
        }
    }

    /// p_σ̄(· | x0) for a clean token.
    pub fn marginal(&self, sigma_bar: f64, x0: usize) -> Result<TokenDistribution> {
        self.check_clean(x0)?;
        if !(sigma_bar >= 0.0) {
            return invalid(format!("σ̄ must be nonnegative, got {sigma_bar}"));
        }
        TokenDistribution::new((0..self.n).map(|y| self.transition(sigma_bar, x0, y)).collect())
    }

    /// Draw x_t ~ p_σ̄(· | x0).
    pub fn sample_marginal<R: Rng + ?Sized>(&self, sigma_bar: f64, x0: usize, rng: &mut R) -> usize {
        let (_, moved) = keep_move(sigma_bar);
        if rng.gen::<f64>() >= moved {
            return x0;
        }
        match self.kind {
            KernelKind::Absorb => self.n - 1,
            KernelKind::Uniform => rng.gen_range(0..self.n),
        }
    }

    /// p(y | x0) / p(x | x0).
    pub fn posterior_ratio(&self, sigma_bar: f64, x0: usize, x: usize, y: usize) -> Result<f64> {
        self.check_clean(x0)?;
        self.check_token(x)?;
        self.check_token(y)?;
        let px = self.transition(sigma_bar, x0, x);
        if px <= 0.0 {
            return Err(Error::ZeroProbability);
        }
        if x == y {
            return Ok(1.0);
        }
        Ok(self.transition(sigma_bar, x0, y) / px)
    }

    /// Reverse rates out of `current` given a score row s(·): the rate to
    /// y ≠ current is σ_t · Q(y → current) · s_y, diagonal is minus the sum.
    pub fn reverse_rate_row(&self, sigma_t: f64, score_row: &[f64], current: usize) -> Result<Vec<f64>> {
        self.check_token(current)?;
        if score_row.len() != self.n {
            return invalid(format!("score row has {} entries, kernel has {}", score_row.len(), self.n));
        }
        if !(sigma_t >= 0.0 && sigma_t.is_finite()) {
            return invalid(format!("σ_t must be finite and nonnegative, got {sigma_t}"));
        }
        let mut rates = vec![0.0; self.n];
        let mut total = 0.0;
        for (y, r) in rates.iter_mut().enumerate() {
            if y == current {
                continue;
            }
            let q = self.rate(y, current);
            if q > 0.0 {
                let s = score_row[y];
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::NonPositiveScore {
                        value: s,
                        position: 0,
                        token: y,
                    });
                }
                *r = sigma_t * q * s;
                total += *r;
            }
        }
        rates[current] = -total;
        Ok(rates)
    }

    /// Reference distribution at t = 1 used by the likelihood bound's prior
    /// term. Absorb: the x0-averaged marginal at σ̄(1), which keeps the KL
    /// finite; uniform: uniform.
    pub fn reference_prior(&self, sigma_bar_one: f64) -> TokenDistribution {
        let probs = match self.kind {
            KernelKind::Uniform => vec![1.0 / self.n as f64; self.n],
            KernelKind::Absorb => {
                let (keep, moved) = keep_move(sigma_bar_one);
                let mut p = vec![keep / (self.n - 1) as f64; self.n];
                p[self.n - 1] = moved;
                p
            }
        };
        TokenDistribution { probs }
    }

    /// KL(p_σ̄(1)(· | x0) ‖ reference prior), in nats.
    pub fn prior_kl(&self, sigma_bar_one: f64, x0: usize) -> Result<f64> {
        let p = self.marginal(sigma_bar_one, x0)?;
        let q = self.reference_prior(sigma_bar_one);
        Ok(p.probs
            .iter()
            .zip(&q.probs)
            .filter(|(&a, _)| a > 0.0)
            .map(|(&a, &b)| a * (a / b).ln())
            .sum::<f64>()
            .max(0.0))
    }
}

/// A kernel with its schedule: the full forward process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProcess {
    pub kernel: NoiseKernel,
    pub schedule: Schedule,
}

impl NoiseProcess {
    pub fn new(kernel: NoiseKernel, schedule: Schedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self { kernel, schedule })
    }

    /// Corrupt a clean sequence to noise level σ̄.
    pub fn corrupt<R: Rng + ?Sized>(&self, x0: &[usize], sigma_bar: f64, rng: &mut R) -> Vec<usize> {
        x0.iter().map(|&t| self.kernel.sample_marginal(sigma_bar, t, rng)).collect()
    }
}
