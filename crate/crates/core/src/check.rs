//! Oracle self-check: closed-form noise quantities against the
//! matrix-exponential and enumeration oracles, as a table of measured errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::noise::{KernelKind, NoiseKernel, Schedule, TIME_FLOOR};
use crate::oracle::{
    exact_concrete_score, exact_pt, exact_reverse_generator, exact_reverse_kernels, matrix_exponential,
    EnumeratedDistribution, Matrix, SequenceSpace,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRow {
    fn new(name: &str, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_error,
            tolerance,
            passed: max_error < tolerance,
        }
    }
}

const TIMES: [f64; 6] = [0.0, 0.02, 0.1, 0.5, 0.9, 1.0];

fn pairs() -> Vec<(KernelKind, Schedule)> {
    [KernelKind::Uniform, KernelKind::Absorb]
        .into_iter()
        .flat_map(|k| [(k, Schedule::loglinear()), (k, Schedule::geometric())])
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

fn random_p0(space: SequenceSpace, kernel: &NoiseKernel, rng: &mut ChaCha8Rng) -> Result<EnumeratedDistribution> {
    let w = (0..space.size)
        .map(|ix| {
            if space.tokens(ix).iter().any(|&t| kernel.is_mask(t)) {
                0.0
            } else {
                rng.gen_range(0.05..1.0)
            }
        })
        .collect();
    EnumeratedDistribution::from_weights(space, w)
}

/// Every (kernel, schedule) pair with N ≤ 5, L ≤ 3.
pub fn oracle_suite() -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let (mut trans, mut ratio) = (0f64, 0f64);
    for (kind, schedule) in pairs() {
        for n in 2..=5 {
            let k = NoiseKernel::new(kind, n)?;
            for t in TIMES {
                let sb = schedule.sigma_bar(t)?;
                let p = matrix_exponential(&Matrix::scaled_generator(&k, sb))?;
                for a in 0..n {
                    for b in 0..n {
                        trans = trans.max((k.transition(sb, a, b) - p.get(a, b)).abs());
                    }
                }
                if t == 0.0 {
                    continue;
                }
                for x0 in 0..k.clean_size() {
                    for x in (0..n).filter(|&x| p.get(x0, x) > 0.0) {
                        for y in 0..n {
                            let want = p.get(x0, y) / p.get(x0, x);
                            ratio = ratio.max(rel(k.posterior_ratio(sb, x0, x, y)?, want));
                        }
                    }
                }
            }
        }
    }
    rows.push(CheckRow::new("closed-form transition vs expm", trans, 1e-10));
    rows.push(CheckRow::new("posterior ratio vs expm (relative)", ratio, 1e-10));

    let mut fact = 0f64;
    for (kind, schedule) in pairs() {
        for n in 2..=5 {
            for len in 1..=3 {
                let k = NoiseKernel::new(kind, n)?;
                let space = SequenceSpace::new(n, len)?;
                let x0: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k.clean_size())).collect();
                let sb = schedule.sigma_bar(0.4)?;
                let pt = exact_pt(&EnumeratedDistribution::point_mass(space, &x0), &k, sb)?;
                for ix in 0..space.size {
                    let x = space.tokens(ix);
                    let want: f64 = x0.iter().zip(&x).map(|(&a, &b)| k.transition(sb, a, b)).product();
                    fact = fact.max((pt.probs[ix] - want).abs());
                }
            }
        }
    }
    rows.push(CheckRow::new("sequence marginal factorization", fact, 1e-10));

    let mut semi = 0f64;
    for kind in [KernelKind::Uniform, KernelKind::Absorb] {
        for n in 2..=5 {
            let k = NoiseKernel::new(kind, n)?;
            for (a, b) in [(0.1, 0.3), (1.0, 2.5), (1e-6, 4.0), (3.0, 7.0)] {
                let pa = matrix_exponential(&Matrix::scaled_generator(&k, a))?;
                let pb = matrix_exponential(&Matrix::scaled_generator(&k, b))?;
                let pab = matrix_exponential(&Matrix::scaled_generator(&k, a + b))?;
                semi = semi.max(pa.matmul(&pb).max_abs_diff(&pab));
            }
        }
    }
    rows.push(CheckRow::new("semigroup P(a)P(b) = P(a+b)", semi, 1e-12));

    let (mut push, mut back) = (0f64, 0f64);
    for (kind, schedule) in pairs() {
        for (n, len) in [(2, 3), (3, 2), (5, 2), (4, 1)] {
            let k = NoiseKernel::new(kind, n)?;
            let p0 = random_p0(SequenceSpace::new(n, len)?, &k, &mut rng)?;
            let grid = [1.0, 0.8, 0.5, 0.2, 0.05, TIME_FLOOR, 0.0];
            let kernels = exact_reverse_kernels(&p0, &k, &schedule, &grid)?;
            let mut d = exact_pt(&p0, &k, schedule.sigma_bar(1.0)?)?;
            for (rk, &s) in kernels.iter().zip(&grid[1..]) {
                d = rk.push(&d);
                push = push.max(d.total_variation(&exact_pt(&p0, &k, schedule.sigma_bar(s)?)?));
            }
            back = back.max(d.total_variation(&p0));
        }
    }
    rows.push(CheckRow::new("reverse kernels push p_t to p_s (TV)", push, 1e-10));
    rows.push(CheckRow::new("reversal from t=1 recovers p0 (TV)", back, 1e-8));

    let (mut fd, mut rates) = (0f64, 0f64);
    for (kind, schedule) in pairs() {
        let k = NoiseKernel::new(kind, 3)?;
        let space = SequenceSpace::new(3, 2)?;
        let p0 = random_p0(space, &k, &mut rng)?;
        for t in [0.3, 0.7] {
            let h = 1e-6;
            let rk = &exact_reverse_kernels(&p0, &k, &schedule, &[t, t - h])?[0];
            let pt = exact_pt(&p0, &k, schedule.sigma_bar(t)?)?;
            let st = schedule.sigma_rate(t)?;
            for ix in (0..space.size).filter(|&ix| pt.probs[ix] > 0.0) {
                let x = space.tokens(ix);
                let gen = exact_reverse_generator(&pt, &k, st, &x)?;
                let score = exact_concrete_score(&pt, &x)?;
                for i in 0..2 {
                    let row = k.reverse_rate_row(st, score.row(i), x[i])?;
                    for y in (0..3).filter(|&y| y != x[i]) {
                        let g = gen[i * 3 + y];
                        fd = fd.max((rk.row(ix)[space.neighbor(ix, i, y)] / h - g).abs() / (1.0 + g.abs()));
                        rates = rates.max(rel(row[y], g));
                    }
                }
            }
        }
    }
    rows.push(CheckRow::new("short reverse kernel / h vs reverse generator", fd, 1e-4));
    rows.push(CheckRow::new("score-based reverse rates vs generator (relative)", rates, 1e-10));
    Ok(rows)
}
