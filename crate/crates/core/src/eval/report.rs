use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

/// First 16 hex digits of the SHA-256 of the value's JSON form.
pub fn fingerprint<T: Serialize + ?Sized>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    /// Finite, or +∞ as an explicit sentinel.
    pub value: f64,
    pub stderr: Option<f64>,
    pub fingerprint: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, Metric>,
    pub notes: BTreeMap<String, String>,
    fingerprint: String,
}

fn number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("+inf")
    }
}

impl MetricsReport {
    pub fn new<T: Serialize + ?Sized>(config: &T) -> Self {
        Self {
            fingerprint: fingerprint(config),
            ..Self::default()
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn insert(&mut self, name: &str, value: f64, stderr: Option<f64>, count: usize) -> Result<()> {
        if value.is_nan() || value == f64::NEG_INFINITY {
            return invalid(format!("metric {name} has value {value}"));
        }
        if stderr.is_some_and(|s| s.is_nan() || s < 0.0) {
            return invalid(format!("metric {name} has stderr {stderr:?}"));
        }
        self.metrics.insert(
            name.to_string(),
            Metric {
                value,
                stderr,
                fingerprint: self.fingerprint.clone(),
                count,
            },
        );
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: &str) {
        self.notes.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|m| m.value)
    }

    /// Fold another report in, prefixing its metric names.
    pub fn merge(&mut self, prefix: &str, other: MetricsReport) {
        for (k, v) in other.metrics {
            self.metrics.insert(format!("{prefix}{k}"), v);
        }
        for (k, v) in other.notes {
            self.notes.insert(format!("{prefix}{k}"), v);
        }
    }

    pub fn to_json(&self) -> Value {
        let metrics: serde_json::Map<String, Value> = self
            .metrics
            .iter()
            .map(|(k, m)| {
                (
                    k.clone(),
                    json!({
                        "value": number(m.value),
                        "stderr": m.stderr.map(number),
                        "fingerprint": m.fingerprint,
                        "count": m.count,
                    }),
                )
            })
            .collect();
        json!({ "fingerprint": self.fingerprint, "metrics": metrics, "notes": self.notes })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,stderr,fingerprint,count\n");
        let fmt = |v: f64| if v.is_finite() { format!("{v}") } else { "+inf".into() };
        for (k, m) in &self.metrics {
            let se = m.stderr.map(fmt).unwrap_or_default();
            let _ = writeln!(out, "{k},{},{se},{},{}", fmt(m.value), m.fingerprint, m.count);
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.to_json())?)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}
