use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sedd_tensor::{clip_global_norm, AdamW, AdamWConfig, Tape, Tensor};

use super::checkpoint::{AnyModel, Checkpoint, OptimizerState, RngState};
use super::loss::{ce_graph, dse_batch_loss, dse_graph, dse_targets, LossMode};
use crate::error::{Error, Result};
use crate::model::{Architecture, ArTransformer, ScoreField, ScoreTransformer};
use crate::noise::{KernelKind, NoiseKernel, NoiseProcess, Schedule, TIME_FLOOR};
use crate::text::{Vocab, Windows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kernel: KernelKind,
    pub schedule: Schedule,
    pub architecture: Architecture,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Checkpoint/report cadence in steps; 0 disables.
    pub eval_every: u64,
    pub nelbo_time_samples: usize,
    pub nelbo_noise_samples: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch_size and steps must be positive");
        }
        if !(self.lr > 0.0 && self.grad_clip > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr and grad_clip must be positive, weight_decay nonnegative");
        }
        if self.nelbo_time_samples == 0 || self.nelbo_noise_samples == 0 {
            return bad("Monte Carlo sample counts must be positive");
        }
        self.schedule.validate()?;
        match &self.architecture {
            Architecture::Score(c) => {
                c.validate()?;
                if c.absorb_offset != (self.kernel == KernelKind::Absorb) {
                    return bad("score network absorb_offset must match the kernel");
                }
            }
            Architecture::Autoregressive(c) => c.validate()?,
            Architecture::Tabular(_) => return bad("tabular models are fitted, not trained"),
        }
        Ok(())
    }

    /// Kernel/vocabulary consistency, checked before any compute.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if vocab.kernel_kind() != self.kernel {
            return Err(Error::VocabMismatch(format!(
                "{} kernel needs {} vocabulary",
                self.kernel,
                if self.kernel == KernelKind::Absorb { "a MASK-terminated" } else { "a MASK-free" }
            )));
        }
        let want = match &self.architecture {
            Architecture::Score(_) => vocab.size(),
            _ => vocab.clean_size(),
        };
        if self.architecture.vocab_size() != want {
            return Err(Error::VocabMismatch(format!(
                "model vocabulary {} but corpus vocabulary needs {want}",
                self.architecture.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn process(&self, vocab_size: usize) -> Result<NoiseProcess> {
        NoiseProcess::new(NoiseKernel::new(self.kernel, vocab_size)?, self.schedule)
    }
}

/// Linear warmup, then cosine decay to a tenth of the peak.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup).max(1) as f64;
    let progress = ((step - cfg.warmup) as f64 / span).min(1.0);
    cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    /// Bound-mode DSE (score model) or cross-entropy (AR), nats per token.
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

pub struct Trainer {
    config: TrainConfig,
    vocab: Vocab,
    windows: Windows,
    model: AnyModel,
    optimizer: AdamW<f32>,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocab, train_tokens: Vec<usize>) -> Result<Self> {
        config.validate()?;
        config.check_vocab(&vocab)?;
        let model = match &config.architecture {
            Architecture::Score(c) => AnyModel::Score(ScoreTransformer::new(c.clone(), config.seed)?),
            Architecture::Autoregressive(c) => AnyModel::Autoregressive(ArTransformer::new(c.clone(), config.seed)?),
            Architecture::Tabular(_) => unreachable!("rejected by validate"),
        };
        let windows = Windows::new(train_tokens, config.architecture.context_len(), config.seed)?;
        let optimizer = AdamW::new(AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        });
        Ok(Self {
            config,
            vocab,
            windows,
            model,
            optimizer,
            step: 0,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, train_tokens: Vec<usize>) -> Result<Self> {
        let h = &ckpt.header;
        let config = h.config.clone().ok_or_else(|| Error::Checkpoint("no training config".into()))?;
        let vocab = h.vocab.clone().ok_or_else(|| Error::Checkpoint("no vocabulary".into()))?;
        let mut t = Self::new(config, vocab, train_tokens)?;
        t.model = ckpt.model()?;
        t.step = h.step;
        if let (Some(o), Some((m, v))) = (h.optimizer, ckpt.moments()) {
            let cfg = AdamWConfig {
                lr: t.config.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            };
            t.optimizer = AdamW::from_state(cfg, o.step, m, v);
        }
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &AnyModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One optimizer update.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let start = Instant::now();
        let step = self.step;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step + 1);
        let batch = self.windows.batch(step, self.config.batch_size);
        let mut tape = Tape::<f32>::new();
        let (loss_var, params, logged) = match &self.model {
            AnyModel::Score(m) => {
                let process = self.config.process(m.config.vocab)?;
                let b = batch.len();
                let (mut xts, mut sbs, mut sts, mut targets) = (vec![], vec![], vec![], vec![]);
                for (i, x0) in batch.iter().enumerate() {
                    let t = TIME_FLOOR + (1.0 - TIME_FLOOR) * (i as f64 + rng.gen::<f64>()) / b as f64;
                    let (sb, st) = (process.schedule.sigma_bar(t)?, process.schedule.sigma_rate(t)?);
                    let xt = process.corrupt(x0, sb, &mut rng);
                    targets.push(dse_targets(&process.kernel, x0, &xt, sb, st)?);
                    xts.push(xt);
                    sbs.push(sb);
                    sts.push(st);
                }
                let p = m.params.bind(&mut tape);
                let logits = m.forward(&mut tape, &p, &xts, &sbs)?;
                let loss = dse_graph(&mut tape, logits, &targets)?;
                let all = tape.value(logits).data();
                let (len, v) = (m.config.context, m.config.vocab);
                let fields = (0..b)
                    .map(|i| ScoreField::from_log(len, v, &all[i * len * v..(i + 1) * len * v]))
                    .collect::<Result<Vec<_>>>();
                let logged = match fields {
                    Ok(f) => dse_batch_loss(&f, &batch, &xts, &sbs, &sts, &process.kernel, LossMode::Bound)?.loss,
                    Err(_) => f64::NAN,
                };
                (loss, p, logged)
            }
            AnyModel::Autoregressive(m) => {
                let inputs: Vec<Vec<usize>> = batch.iter().map(|w| m.shifted_inputs(w)).collect();
                let targets: Vec<usize> = batch.iter().flatten().copied().collect();
                let p = m.params.bind(&mut tape);
                let logits = m.forward(&mut tape, &p, &inputs)?;
                let loss = ce_graph(&mut tape, logits, &targets)?;
                let v = tape.value(loss).sum_f64();
                (loss, p, v)
            }
            AnyModel::Tabular(_) => return Err(Error::Config("tabular models are fitted, not trained".into())),
        };
        let lr = lr_at(&self.config, step);
        let grads = tape.backward(loss_var)?;
        let store = match &mut self.model {
            AnyModel::Score(m) => &mut m.params,
            AnyModel::Autoregressive(m) => &mut m.params,
            AnyModel::Tabular(m) => &mut m.params,
        };
        let mut g: Vec<Tensor<f32>> = params.iter().zip(store.tensors()).map(|(&v, t)| grads.wrt(v, t)).collect();
        let grad_norm = clip_global_norm(&mut g, self.config.grad_clip);
        let graph_loss = tape.value(loss_var).sum_f64();
        if !graph_loss.is_finite() || !logged.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: logged,
                lr,
                grad_norm,
            });
        }
        self.optimizer.step(store.tensors_mut(), &g, lr)?;
        self.step += 1;
        Ok(StepLog {
            step,
            loss: logged,
            grad_norm,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Train until `until` steps have been taken; `on_step` sees each log and the trainer.
    pub fn run(&mut self, until: u64, mut on_step: impl FnMut(&StepLog, &Trainer) -> Result<()>) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < until {
            let log = self.train_step()?;
            on_step(&log, self)?;
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, Some(self.vocab.clone()));
        ck.header.config = Some(self.config.clone());
        ck.header.step = self.step;
        ck.header.rng = Some(RngState {
            seed: self.config.seed,
            next_stream: self.step + 1,
        });
        let c = self.optimizer.config;
        ck.header.optimizer = Some(OptimizerState {
            step: self.optimizer.step_count(),
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        });
        if !self.optimizer.first_moments().is_empty() {
            ck.push_moments(
                self.model.params().names(),
                self.optimizer.first_moments(),
                self.optimizer.second_moments(),
            );
        }
        ck
    }
}
