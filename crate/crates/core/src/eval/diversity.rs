use std::collections::HashMap;

use serde_json::json;

use super::report::MetricsReport;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diversity {
    pub unique_unigram_fraction: f64,
    /// Nats, over counts / L.
    pub unigram_entropy: f64,
    pub repetition_rate: f64,
}

/// Diversity of one sequence; the repetition rate counts positions whose token
/// occurs among the `window` preceding tokens.
pub fn sequence_diversity(seq: &[usize], window: usize) -> Result<Diversity> {
    if seq.is_empty() {
        return invalid("diversity of an empty sample");
    }
    let l = seq.len() as f64;
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &t in seq {
        *counts.entry(t).or_default() += 1;
    }
    let mut sorted: Vec<usize> = counts.values().copied().collect();
    sorted.sort_unstable();
    let entropy = sorted
        .iter()
        .map(|&c| {
            let p = c as f64 / l;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0);
    let mut last: HashMap<usize, usize> = HashMap::new();
    let mut repeats = 0usize;
    for (i, &t) in seq.iter().enumerate() {
        if let Some(&j) = last.get(&t) {
            if i - j <= window {
                repeats += 1;
            }
        }
        last.insert(t, i);
    }
    Ok(Diversity {
        unique_unigram_fraction: counts.len() as f64 / l,
        unigram_entropy: entropy,
        repetition_rate: repeats as f64 / l,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean of each metric across samples, with the across-sample standard
/// deviation stored as `<name>_std`.
pub fn diversity_stats(samples: &[Vec<usize>], window: usize) -> Result<MetricsReport> {
    if samples.is_empty() {
        return invalid("no samples");
    }
    let per: Vec<Diversity> = samples.iter().map(|s| sequence_diversity(s, window)).collect::<Result<_>>()?;
    let mut report = MetricsReport::new(&json!({"metric": "diversity", "window": window, "samples": samples.len()}));
    let cols: [(&str, fn(&Diversity) -> f64); 3] = [
        ("unique_unigram_fraction", |d| d.unique_unigram_fraction),
        ("unigram_entropy", |d| d.unigram_entropy),
        ("repetition_rate", |d| d.repetition_rate),
    ];
    for (name, f) in cols {
        let v: Vec<f64> = per.iter().map(f).collect();
        let (m, s) = mean_std(&v);
        report.insert(name, m, None, v.len())?;
        report.insert(&format!("{name}_std"), s, None, v.len())?;
    }
    Ok(report)
}
