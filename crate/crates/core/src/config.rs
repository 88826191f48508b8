//! `section.key = value` run configuration with a fixed key set.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ArConfig, Architecture, ScoreNetConfig};
use crate::noise::{KernelKind, Schedule};
use crate::sample::{SamplerConfig, SamplerMethod};
use crate::text::Vocab;
use crate::train::{NelboConfig, TrainConfig};

/// Every accepted key with its default; an empty default means unset.
pub const KEYS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("paths.corpus", "data/fables"),
    ("paths.checkpoint", ""),
    ("paths.output", "runs/out"),
    ("paths.judge", ""),
    ("paths.ar", ""),
    ("paths.mc_task", ""),
    ("model.kind", "score"),
    ("model.context", "64"),
    ("model.layers", "2"),
    ("model.heads", "2"),
    ("model.dim", "64"),
    ("model.time_dim", "64"),
    ("model.mlp_ratio", "4"),
    ("model.rope", "true"),
    ("noise.kernel", "absorb"),
    ("noise.schedule", ""),
    ("noise.eps", "1e-3"),
    ("noise.sigma_min", "1e-9"),
    ("noise.sigma_max", "20"),
    ("train.batch_size", "16"),
    ("train.steps", "1000"),
    ("train.lr", "3e-3"),
    ("train.weight_decay", "0"),
    ("train.warmup", "50"),
    ("train.grad_clip", "1"),
    ("train.eval_every", "0"),
    ("train.log_every", "50"),
    ("train.nelbo_time_samples", "64"),
    ("train.nelbo_noise_samples", "1"),
    ("train.resume", ""),
    ("sample.method", "analytic"),
    ("sample.steps", "64"),
    ("sample.length", "64"),
    ("sample.count", "4"),
    ("sample.truncate_to", ""),
    ("sample.batch", "16"),
    ("sample.prompt", ""),
    ("sample.strategy", "ancestral"),
    ("eval.time_samples", "64"),
    ("eval.noise_samples", "1"),
    ("eval.order", "mean_exp"),
    ("eval.max_windows", "32"),
    ("eval.mc_mode", "likelihood"),
    ("eval.normalize", "false"),
    ("eval.diversity_window", "100"),
    ("bench.lengths", "64,256"),
    ("bench.steps", "1,2,4,8,16,32,64,128,256"),
    ("bench.reps", "3"),
    ("bench.warmup", "2"),
    ("bench.batch", "1"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `section.key = value`", n + 1)));
            };
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn is_known(key: &str) -> bool {
        KEYS.iter().any(|(k, _)| *k == key)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key} = {v:?} does not parse")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.opt(key).map(|_| self.get(key)).transpose()
    }

    pub fn get_list(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: {s:?} is not an integer")))
            })
            .collect()
    }

    /// Every key with its resolved value, in config-file syntax.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("run.seed")
    }

    pub fn kernel(&self) -> Result<KernelKind> {
        self.get("noise.kernel")
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let s = match self.opt("noise.schedule") {
            None => Schedule::default_for(self.kernel()?),
            Some("loglinear") => Schedule::LogLinear {
                eps: self.get("noise.eps")?,
            },
            Some("geometric") => Schedule::Geometric {
                sigma_min: self.get("noise.sigma_min")?,
                sigma_max: self.get("noise.sigma_max")?,
            },
            Some(other) => return Err(Error::Config(format!("unknown schedule {other:?}"))),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn architecture(&self, vocab: &Vocab) -> Result<Architecture> {
        let (context, layers, heads, dim, mlp_ratio) = (
            self.get("model.context")?,
            self.get("model.layers")?,
            self.get("model.heads")?,
            self.get("model.dim")?,
            self.get("model.mlp_ratio")?,
        );
        match self.raw("model.kind") {
            "score" => Ok(Architecture::Score(ScoreNetConfig {
                vocab: vocab.size(),
                context,
                layers,
                heads,
                dim,
                time_dim: self.get("model.time_dim")?,
                mlp_ratio,
                rope: self.get("model.rope")?,
                absorb_offset: self.kernel()? == KernelKind::Absorb,
            })),
            "ar" => Ok(Architecture::Autoregressive(ArConfig {
                vocab: vocab.clean_size(),
                context,
                layers,
                heads,
                dim,
                mlp_ratio,
            })),
            other => Err(Error::Config(format!("model.kind must be score or ar, got {other:?}"))),
        }
    }

    pub fn train_config(&self, vocab: &Vocab) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            kernel: self.kernel()?,
            schedule: self.schedule()?,
            architecture: self.architecture(vocab)?,
            batch_size: self.get("train.batch_size")?,
            steps: self.get("train.steps")?,
            lr: self.get("train.lr")?,
            weight_decay: self.get("train.weight_decay")?,
            warmup: self.get("train.warmup")?,
            grad_clip: self.get("train.grad_clip")?,
            seed: self.seed()?,
            eval_every: self.get("train.eval_every")?,
            nelbo_time_samples: self.get("train.nelbo_time_samples")?,
            nelbo_noise_samples: self.get("train.nelbo_noise_samples")?,
        };
        cfg.validate()?;
        cfg.check_vocab(vocab)?;
        Ok(cfg)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let mut c = SamplerConfig::new(
            self.get::<SamplerMethod>("sample.method")?,
            self.get("sample.steps")?,
            self.get("sample.length")?,
            self.seed()?,
        );
        c.truncate_to = self.get_opt("sample.truncate_to")?;
        c.batch = self.get("sample.batch")?;
        c.validate()?;
        Ok(c)
    }

    pub fn nelbo_config(&self) -> Result<NelboConfig> {
        Ok(NelboConfig {
            time_samples: self.get("eval.time_samples")?,
            noise_samples: self.get("eval.noise_samples")?,
            seed: self.seed()?,
            ..NelboConfig::default()
        })
    }
}
