use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use sedd_core::bench::{latency_bench, linear_fit, to_csv, BenchConfig, LatencyRecord};
use sedd_core::check::oracle_suite;
use sedd_core::config::{RunConfig, KEYS};
use sedd_core::eval::{
    diversity_stats, eval_windows, judge_ppl, multiple_choice_eval, zero_shot_ppl, LmRef, McMode, McOptions, McTask,
    MetricsReport,
};
use sedd_core::noise::NoiseProcess;
use sedd_core::sample::{ar_sample, sample_many, ArStrategy, PromptSpec};
use sedd_core::text::{Corpus, Split, Vocab};
use sedd_core::train::{AnyModel, Checkpoint, PplOrder, Trainer};
use sedd_core::{Error, Result};

/// The resolved configuration and the keys the user set explicitly.
pub struct Resolved {
    pub command: String,
    pub cfg: RunConfig,
    pub explicit: BTreeSet<String>,
}

pub fn key_list() -> String {
    KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

fn section_of(command: &str) -> Option<&'static str> {
    match command {
        "train" => Some("train"),
        "sample" => Some("sample"),
        "eval" => Some("eval"),
        "bench" => Some("bench"),
        _ => None,
    }
}

fn full_key(command: &str, key: &str) -> Result<String> {
    if key.contains('.') {
        return if RunConfig::is_known(key) {
            Ok(key.to_string())
        } else {
            Err(Error::Config(format!("unknown key {key:?}")))
        };
    }
    section_of(command)
        .into_iter()
        .chain(["run", "paths", "model", "noise"])
        .map(|s| format!("{s}.{key}"))
        .find(|k| RunConfig::is_known(k))
        .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))
}

/// Config file first, then `--key value` overrides in order.
pub fn resolve(command: &str, file: Option<&Path>, overrides: &[String]) -> Result<Resolved> {
    let mut explicit = BTreeSet::new();
    let cfg = match file {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            for line in text.lines() {
                if let Some((k, _)) = line.split('#').next().unwrap_or("").split_once('=') {
                    explicit.insert(k.trim().to_string());
                }
            }
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let mut cfg = cfg;
    let mut it = overrides.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument {flag:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                (key, v.clone())
            }
        };
        let key = full_key(command, key)?;
        cfg.set(&key, &value)?;
        explicit.insert(key);
    }
    Ok(Resolved {
        command: command.to_string(),
        cfg,
        explicit,
    })
}

fn output_dir(r: &Resolved) -> Result<PathBuf> {
    let dir = PathBuf::from(r.cfg.raw("paths.output"));
    fs::create_dir_all(&dir)?;
    let snapshot = format!("# sedd {}\n{}", r.command, r.cfg.snapshot());
    fs::write(dir.join("config.resolved"), snapshot)?;
    Ok(dir)
}

fn required<'a>(c: &'a RunConfig, key: &str) -> Result<&'a str> {
    c.opt(key).ok_or_else(|| Error::Config(format!("{key} must be set")))
}

fn load_checkpoint(path: &str) -> Result<(Checkpoint, AnyModel, Vocab)> {
    let ck = Checkpoint::load(Path::new(path))?;
    let model = ck.model()?;
    let vocab = ck
        .header
        .vocab
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{path} carries no vocabulary")))?;
    Ok((ck, model, vocab))
}

fn process_of(ck: &Checkpoint, model: &AnyModel) -> Result<Option<NoiseProcess>> {
    match model.as_score_model() {
        None => Ok(None),
        Some(m) => {
            let tc = ck
                .header
                .config
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("score checkpoint has no noise configuration".into()))?;
            tc.process(m.vocab_size()).map(Some)
        }
    }
}

/// Explicit kernel or model-kind settings must agree with the checkpoint.
fn check_conflicts(r: &Resolved, ck: &Checkpoint, model: &AnyModel) -> Result<()> {
    if r.explicit.contains("noise.kernel") {
        if let Some(tc) = &ck.header.config {
            let want = r.cfg.kernel()?;
            if model.as_score_model().is_some() && tc.kernel != want {
                return Err(Error::VocabMismatch(format!(
                    "checkpoint uses the {} kernel, config asks for {want}",
                    tc.kernel
                )));
            }
        }
    }
    if r.explicit.contains("model.kind") {
        let is_ar = matches!(model, AnyModel::Autoregressive(_));
        if is_ar != (r.cfg.raw("model.kind") == "ar") {
            return Err(Error::Config(format!(
                "model.kind = {} but the checkpoint holds a {} model",
                r.cfg.raw("model.kind"),
                if is_ar { "ar" } else { "score" }
            )));
        }
    }
    Ok(())
}

fn lm_ref<'a>(model: &'a AnyModel, process: Option<&'a NoiseProcess>, c: &RunConfig) -> Result<LmRef<'a>> {
    Ok(match (model, process) {
        (AnyModel::Autoregressive(m), _) => LmRef::Autoregressive(m),
        (m, Some(p)) => LmRef::Diffusion {
            model: m.as_score_model().expect("score model"),
            process: p,
            nelbo: c.nelbo_config()?,
        },
        _ => return Err(Error::Checkpoint("score model without a noise process".into())),
    })
}

struct Generated {
    samples: Vec<Vec<usize>>,
    passes: Vec<usize>,
    clamped: usize,
    severe: usize,
    masked_first: f64,
}

fn generate(c: &RunConfig, model: &AnyModel, process: Option<&NoiseProcess>, vocab: &Vocab) -> Result<Generated> {
    let count: usize = c.get("sample.count")?;
    let prompt = vocab.encode(c.opt("sample.prompt").unwrap_or(""))?;
    let seed = c.seed()?;
    let mut g = Generated {
        samples: Vec::with_capacity(count),
        passes: Vec::with_capacity(count),
        clamped: 0,
        severe: 0,
        masked_first: 0.0,
    };
    match (model, process) {
        (AnyModel::Autoregressive(m), _) => {
            let length: usize = c.get("sample.length")?;
            let strategy: ArStrategy = c.get("sample.strategy")?;
            if prompt.len() >= length {
                return Err(Error::Config("prompt is as long as sample.length".into()));
            }
            for j in 0..count {
                let out = ar_sample(m, &prompt, length - prompt.len(), strategy, seed.wrapping_add(j as u64), &[])?;
                g.samples.push(out.tokens);
                g.passes.push(out.forward_passes);
            }
        }
        (m, Some(p)) => {
            let sc = c.sampler_config()?;
            let outs = sample_many(
                m.as_score_model().expect("score model"),
                p,
                &sc,
                &PromptSpec::prefix(&prompt),
                count,
            )?;
            for o in outs {
                g.clamped += o.clamps.clamped;
                g.severe += o.clamps.severe;
                g.masked_first += o.masked_fraction.first().copied().unwrap_or(0.0) / count as f64;
                g.passes.push(o.forward_passes);
                g.samples.push(o.tokens);
            }
        }
        _ => return Err(Error::Checkpoint("score model without a noise process".into())),
    }
    Ok(g)
}

fn log_line(file: &mut fs::File, value: serde_json::Value) -> Result<()> {
    writeln!(file, "{value}")?;
    Ok(())
}

pub fn train(r: &Resolved) -> Result<ExitCode> {
    let c = &r.cfg;
    let corpus = Corpus::from_dir(Path::new(c.raw("paths.corpus")), c.seed()?)?;
    let vocab = Vocab::build(&corpus, c.kernel()?)?;
    let tc = c.train_config(&vocab)?;
    let out = output_dir(r)?;
    let tokens = corpus.split_tokens(&vocab, Split::Train)?;
    let valid = corpus.split_tokens(&vocab, Split::Valid)?;
    let until: u64 = c.get("train.steps")?;
    let log_every: u64 = c.get("train.log_every")?;
    let mut trainer = match c.opt("train.resume") {
        Some(p) => {
            let ck = Checkpoint::load(Path::new(p))?;
            if ck.header.vocab.as_ref() != Some(&vocab) {
                return Err(Error::VocabMismatch(format!("{p} was trained on a different vocabulary")));
            }
            Trainer::resume(&ck, tokens)?
        }
        None => Trainer::new(tc.clone(), vocab, tokens)?,
    };
    let mut log = fs::File::create(out.join("train_log.jsonl"))?;
    let eval_every = tc.eval_every;
    let mut nelbo = c.nelbo_config()?;
    nelbo.time_samples = tc.nelbo_time_samples;
    nelbo.noise_samples = tc.nelbo_noise_samples;
    trainer.run(until, |s, t| {
        log_line(
            &mut log,
            serde_json::json!({"step": s.step, "loss": s.loss, "grad_norm": s.grad_norm, "lr": s.lr}),
        )?;
        if log_every > 0 && (s.step % log_every == 0 || s.step + 1 == until) {
            eprintln!("step {:>6}  loss {:.4}  grad {:.3}  lr {:.2e}", s.step, s.loss, s.grad_norm, s.lr);
        }
        let done = s.step + 1;
        if eval_every > 0 && done % eval_every == 0 && !valid.is_empty() {
            let model = t.model();
            let process = process_of(&t.checkpoint(), model)?;
            let lm = match (model, process.as_ref()) {
                (AnyModel::Autoregressive(m), _) => LmRef::Autoregressive(m),
                (m, Some(p)) => LmRef::Diffusion {
                    model: m.as_score_model().expect("score model"),
                    process: p,
                    nelbo,
                },
                _ => return Ok(()),
            };
            let windows = eval_windows(&valid, lm.context_len(), Some(8));
            if !windows.is_empty() {
                let rep = zero_shot_ppl(lm, &windows, PplOrder::MeanExp)?;
                let nll = rep.get("nll_per_token").unwrap_or(f64::NAN);
                eprintln!("step {done:>6}  valid nll/token {nll:.4}");
                log_line(&mut log, serde_json::json!({"step": done, "valid_nll_per_token": nll}))?;
            }
        }
        Ok(())
    })?;
    let path = c
        .opt("paths.checkpoint")
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join("model.ckpt"));
    trainer.checkpoint().save(&path)?;
    println!(
        "wrote {} ({} parameters, step {})",
        path.display(),
        trainer.model().num_params(),
        trainer.step()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn sample(r: &Resolved) -> Result<ExitCode> {
    let c = &r.cfg;
    c.sampler_config()?;
    let (ck, model, vocab) = load_checkpoint(required(c, "paths.checkpoint")?)?;
    check_conflicts(r, &ck, &model)?;
    let process = process_of(&ck, &model)?;
    let out = output_dir(r)?;
    let g = generate(c, &model, process.as_ref(), &vocab)?;
    let mut text = String::new();
    for s in &g.samples {
        let _ = writeln!(text, "{}", vocab.decode(s)?);
    }
    fs::write(out.join("samples.txt"), &text)?;
    print!("{text}");
    let mut report = MetricsReport::new(&c.snapshot());
    let n = g.samples.len();
    report.insert("forward_passes", g.passes.iter().sum::<usize>() as f64 / n as f64, None, n)?;
    if process.is_some() {
        report.insert("clamp_events", g.clamped as f64, None, n)?;
        report.insert("severe_clamp_events", g.severe as f64, None, n)?;
        report.insert("masked_fraction_first_step", g.masked_first, None, n)?;
    }
    report.merge("", diversity_stats(&g.samples, c.get("eval.diversity_window")?)?);
    report.write(&out, "sample_metrics")?;
    if g.severe > 0 {
        eprintln!("warning: {} severe Euler clamps; consider more steps", g.severe);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(r: &Resolved) -> Result<ExitCode> {
    let c = &r.cfg;
    let order: PplOrder = match c.raw("eval.order") {
        "mean_exp" => PplOrder::MeanExp,
        "exp_mean" => PplOrder::ExpMean,
        other => return Err(Error::Config(format!("eval.order must be mean_exp or exp_mean, got {other:?}"))),
    };
    let (ck, model, vocab) = load_checkpoint(required(c, "paths.checkpoint")?)?;
    check_conflicts(r, &ck, &model)?;
    let process = process_of(&ck, &model)?;
    let out = output_dir(r)?;
    let split_seed = ck.header.config.as_ref().map(|t| t.seed).unwrap_or(c.seed()?);
    let corpus = Corpus::from_dir(Path::new(c.raw("paths.corpus")), split_seed)?;
    let mut test = corpus.split_tokens(&vocab, Split::Test)?;
    if test.is_empty() {
        eprintln!("note: corpus has no test split, evaluating on train");
        test = corpus.split_tokens(&vocab, Split::Train)?;
    }
    let lm = lm_ref(&model, process.as_ref(), c)?;
    let windows = eval_windows(&test, lm.context_len(), c.get_opt("eval.max_windows")?);
    let mut report = zero_shot_ppl(lm, &windows, order)?;

    if let Some(p) = c.opt("paths.mc_task") {
        let task = McTask::load(Path::new(p), c.get::<McMode>("eval.mc_mode")?)?;
        let res = multiple_choice_eval(
            lm,
            &vocab,
            &task,
            McOptions {
                normalize: c.get("eval.normalize")?,
            },
        )?;
        let se = (res.accuracy * (1.0 - res.accuracy) / res.total as f64).sqrt();
        report.insert("mc_accuracy", res.accuracy, Some(se), res.total)?;
    }
    if let Some(p) = c.opt("paths.judge") {
        let (_, judge, judge_vocab) = load_checkpoint(p)?;
        let AnyModel::Autoregressive(judge) = judge else {
            return Err(Error::Config("paths.judge must point to an autoregressive checkpoint".into()));
        };
        if judge_vocab.symbols() != vocab.symbols() {
            return Err(Error::VocabMismatch("judge and model use different symbols".into()));
        }
        let g = generate(c, &model, process.as_ref(), &vocab)?;
        report.merge("judge_", judge_ppl(&judge, &g.samples)?);
        report.merge("diversity_", diversity_stats(&g.samples, c.get("eval.diversity_window")?)?);
    }
    report.write(&out, "metrics")?;
    for (name, m) in &report.metrics {
        match m.stderr {
            Some(se) => println!("{name:<32} {:.6} ± {se:.6}", m.value),
            None => println!("{name:<32} {:.6}", m.value),
        }
    }
    for (k, v) in &report.notes {
        println!("{k:<32} {v}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn bench(r: &Resolved) -> Result<ExitCode> {
    let c = &r.cfg;
    let cfg = BenchConfig {
        lengths: c.get_list("bench.lengths")?,
        steps: c.get_list("bench.steps")?,
        reps: c.get("bench.reps")?,
        warmup: c.get("bench.warmup")?,
        batch: c.get("bench.batch")?,
        seed: c.seed()?,
        ..BenchConfig::default()
    };
    if cfg.reps < 3 {
        return Err(Error::Config("bench.reps must be at least 3".into()));
    }
    let (dck, diffusion, dvocab) = load_checkpoint(required(c, "paths.checkpoint")?)?;
    let (_, ar, avocab) = load_checkpoint(required(c, "paths.ar")?)?;
    if dvocab.symbols() != avocab.symbols() {
        return Err(Error::VocabMismatch("diffusion and AR checkpoints use different symbols".into()));
    }
    let AnyModel::Autoregressive(ar) = ar else {
        return Err(Error::Config("paths.ar must point to an autoregressive checkpoint".into()));
    };
    let process = process_of(&dck, &diffusion)?
        .ok_or_else(|| Error::Config("paths.checkpoint must point to a score model".into()))?;
    let out = output_dir(r)?;
    let records = latency_bench(
        diffusion.as_score_model().expect("score model"),
        diffusion.num_params(),
        &process,
        &ar,
        &cfg,
    )?;
    let csv = to_csv(&records);
    fs::write(out.join("latency.csv"), &csv)?;
    print!("{csv}");
    let mut summary = serde_json::Map::new();
    for &len in &cfg.lengths {
        summary.insert(len.to_string(), summarize(&records, len));
    }
    let summary = serde_json::Value::Object(summary);
    fs::write(out.join("latency_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn summarize(records: &[LatencyRecord], len: usize) -> serde_json::Value {
    let at = |name: &'static str| records.iter().filter(move |r| r.model == name && r.len == len);
    let (xs, ys): (Vec<f64>, Vec<f64>) = at("diffusion")
        .filter(|r| r.k_or_tokens >= 8)
        .map(|r| (r.k_or_tokens as f64, r.median_ms))
        .unzip();
    let fit = (xs.len() >= 2).then(|| linear_fit(&xs, &ys));
    let cached = at("ar_cached").next().map(|r| r.median_ms);
    let uncached = at("ar_uncached").next().map(|r| r.median_ms);
    let crossover = cached.and_then(|ms| at("diffusion").filter(|r| r.median_ms < ms).map(|r| r.k_or_tokens).max());
    serde_json::json!({
        "slope_ms_per_step": fit.map(|f| f.0),
        "r2": fit.map(|f| f.2),
        "ar_cached_ms": cached,
        "ar_uncached_ms": uncached,
        "largest_k_faster_than_cached_ar": crossover,
    })
}

pub fn oracle_check(r: &Resolved) -> Result<ExitCode> {
    let rows = oracle_suite()?;
    let out = output_dir(r)?;
    fs::write(out.join("oracle_check.json"), serde_json::to_string_pretty(&rows)?)?;
    println!("{:<52} {:>12} {:>10}  result", "check", "max error", "tolerance");
    for row in &rows {
        println!(
            "{:<52} {:>12.3e} {:>10.0e}  {}",
            row.name,
            row.max_error,
            row.tolerance,
            if row.passed { "pass" } else { "FAIL" }
        );
    }
    Ok(if rows.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
