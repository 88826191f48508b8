use sedd_core::eval::{zero_shot_ppl, LmRef};
use sedd_core::model::{ArConfig, Architecture, ScoreNetConfig};
use sedd_core::noise::{KernelKind, Schedule};
use sedd_core::sample::{ar_sample, ArStrategy};
use sedd_core::text::Vocab;
use sedd_core::train::{AnyModel, Checkpoint, PplOrder, TrainConfig, Trainer};

const TEXT: &str = "the fox ran to the river and the crow sat on the old gate. ";

fn score_config(vocab: &Vocab, seed: u64, steps: u64) -> TrainConfig {
    TrainConfig {
        kernel: KernelKind::Absorb,
        schedule: Schedule::loglinear(),
        architecture: Architecture::Score(ScoreNetConfig {
            vocab: vocab.size(),
            context: 16,
            layers: 1,
            heads: 2,
            dim: 16,
            time_dim: 8,
            mlp_ratio: 2,
            rope: true,
            absorb_offset: true,
        }),
        batch_size: 4,
        steps,
        lr: 3e-3,
        weight_decay: 0.01,
        warmup: 3,
        grad_clip: 1.0,
        seed,
        eval_every: 0,
        nelbo_time_samples: 8,
        nelbo_noise_samples: 1,
    }
}

fn corpus() -> (Vocab, Vec<usize>) {
    let text = TEXT.repeat(8);
    let vocab = Vocab::from_text(&text, KernelKind::Absorb).unwrap();
    let tokens = vocab.encode(&text).unwrap();
    (vocab, tokens)
}

fn train(seed: u64, steps: u64) -> Trainer {
    let (vocab, tokens) = corpus();
    let mut t = Trainer::new(score_config(&vocab, seed, steps), vocab, tokens).unwrap();
    t.run(steps, |_, _| Ok(())).unwrap();
    t
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let a = train(7, 12).checkpoint().to_bytes().unwrap();
    let b = train(7, 12).checkpoint().to_bytes().unwrap();
    assert_eq!(a, b);
    let c = train(8, 12).checkpoint().to_bytes().unwrap();
    assert_ne!(a, c);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (vocab, tokens) = corpus();
    let full = train(3, 16);
    let mut half = Trainer::new(score_config(&vocab, 3, 16), vocab, tokens.clone()).unwrap();
    half.run(8, |_, _| Ok(())).unwrap();
    let bytes = half.checkpoint().to_bytes().unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), tokens).unwrap();
    assert_eq!(resumed.step(), 8);
    resumed.run(16, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.checkpoint().to_bytes().unwrap(), full.checkpoint().to_bytes().unwrap());
}

#[test]
fn saved_model_reproduces_forward_outputs_bit_for_bit() {
    let t = train(5, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    t.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model().unwrap();
    let x: Vec<usize> = (0..16).map(|i| (i * 5) % t.vocab().size()).collect();
    let bits = |m: &AnyModel| -> Vec<u64> {
        let f = m.as_score_model().unwrap().score(&x, 0.7).unwrap();
        f.values().iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(bits(t.model()), bits(&loaded));
}

#[test]
fn score_training_lowers_the_loss() {
    let (vocab, tokens) = corpus();
    let mut t = Trainer::new(score_config(&vocab, 1, 120), vocab, tokens).unwrap();
    let logs = t.run(120, |_, _| Ok(())).unwrap();
    let mean = |s: &[sedd_core::train::StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&logs[..20]), mean(&logs[100..]));
    assert!(tail < head, "loss {head} -> {tail}");
    assert!(logs.iter().all(|l| l.loss >= 0.0 && l.grad_norm.is_finite()));
}

#[test]
fn ar_learns_a_periodic_string() {
    let text = "ab".repeat(200);
    let vocab = Vocab::from_text(&text, KernelKind::Uniform).unwrap();
    let tokens = vocab.encode(&text).unwrap();
    let cfg = TrainConfig {
        kernel: KernelKind::Uniform,
        schedule: Schedule::geometric(),
        architecture: Architecture::Autoregressive(ArConfig {
            vocab: 2,
            context: 8,
            layers: 1,
            heads: 1,
            dim: 16,
            mlp_ratio: 2,
        }),
        batch_size: 4,
        steps: 150,
        lr: 1e-2,
        weight_decay: 0.0,
        warmup: 5,
        grad_clip: 1.0,
        seed: 0,
        eval_every: 0,
        nelbo_time_samples: 4,
        nelbo_noise_samples: 1,
    };
    let mut t = Trainer::new(cfg, vocab, tokens.clone()).unwrap();
    t.run(150, |_, _| Ok(())).unwrap();
    let AnyModel::Autoregressive(m) = t.model() else { unreachable!() };
    let out = ar_sample(m, &[0], 7, ArStrategy::Greedy, 0, &[]).unwrap();
    assert_eq!(out.tokens, vec![0, 1, 0, 1, 0, 1, 0, 1]);
    assert_eq!(out.forward_passes, 1 + 1 + 6);
    let report = zero_shot_ppl(LmRef::Autoregressive(m), &[tokens[..8].to_vec()], PplOrder::MeanExp).unwrap();
    let ppl = report.get("ppl").unwrap();
    assert!((1.0..1.05).contains(&ppl), "ppl {ppl}");
}

#[test]
fn mismatched_kernel_and_vocab_fail_before_training() {
    let text = TEXT.repeat(4);
    let vocab = Vocab::from_text(&text, KernelKind::Uniform).unwrap();
    let tokens = vocab.encode(&text).unwrap();
    assert!(Trainer::new(score_config(&vocab, 0, 4), vocab, tokens).is_err());
}
