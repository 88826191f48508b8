#![allow(dead_code)]

use sedd_core::noise::{KernelKind, NoiseKernel, NoiseProcess, Schedule};
use sedd_core::oracle::{EnumeratedDistribution, SequenceSpace};

/// Correlated, skewed distribution over length-2 sequences of three states.
/// Under the absorbing kernel state 2 is MASK and carries no mass.
pub fn toy_p0(kind: KernelKind) -> EnumeratedDistribution {
    let space = SequenceSpace::new(3, 2).unwrap();
    let w = match kind {
        KernelKind::Uniform => vec![0.30, 0.02, 0.08, 0.05, 0.25, 0.01, 0.12, 0.03, 0.14],
        KernelKind::Absorb => vec![0.55, 0.05, 0.0, 0.10, 0.30, 0.0, 0.0, 0.0, 0.0],
    };
    EnumeratedDistribution::from_weights(space, w).unwrap()
}

pub fn process(kind: KernelKind, schedule: Schedule) -> NoiseProcess {
    NoiseProcess::new(NoiseKernel::new(kind, 3).unwrap(), schedule).unwrap()
}

pub fn all_pairs() -> Vec<(KernelKind, Schedule)> {
    let mut v = Vec::new();
    for k in [KernelKind::Uniform, KernelKind::Absorb] {
        for s in [Schedule::loglinear(), Schedule::geometric()] {
            v.push((k, s));
        }
    }
    v
}

pub fn tiny_score_net(kind: KernelKind, vocab: usize, context: usize, seed: u64) -> sedd_core::model::ScoreTransformer<f32> {
    let cfg = sedd_core::model::ScoreNetConfig {
        vocab,
        context,
        layers: 1,
        heads: 2,
        dim: 16,
        time_dim: 8,
        mlp_ratio: 2,
        rope: true,
        absorb_offset: kind == KernelKind::Absorb,
    };
    sedd_core::model::ScoreTransformer::new(cfg, seed).unwrap()
}

/// Empirical distribution of `count` exact-score samples.
pub fn sampled_distribution(
    kind: KernelKind,
    method: sedd_core::sample::SamplerMethod,
    steps: usize,
    count: usize,
    seed: u64,
) -> EnumeratedDistribution {
    use sedd_core::oracle::ExactScore;
    use sedd_core::sample::{sample_many, PromptSpec, SamplerConfig};
    let p0 = toy_p0(kind);
    let pr = process(kind, Schedule::default_for(kind));
    let model = ExactScore::new(p0.clone(), pr.kernel).unwrap();
    let mut cfg = SamplerConfig::new(method, steps, 2, seed);
    cfg.batch = count;
    let outs = sample_many(&model, &pr, &cfg, &PromptSpec::default(), count).unwrap();
    let seqs: Vec<Vec<usize>> = outs.into_iter().map(|o| o.tokens).collect();
    EnumeratedDistribution::empirical(p0.space, &seqs).unwrap()
}

/// Causal model trained on "abab…" over the vocabulary {a, b}.
pub fn periodic_ar() -> (sedd_core::text::Vocab, sedd_core::model::ArTransformer<f32>) {
    use sedd_core::model::{ArConfig, Architecture};
    use sedd_core::text::Vocab;
    use sedd_core::train::{AnyModel, TrainConfig, Trainer};
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
    let mut t = Trainer::new(cfg, vocab.clone(), tokens).unwrap();
    t.run(150, |_, _| Ok(())).unwrap();
    match t.model() {
        AnyModel::Autoregressive(m) => (vocab, m.clone()),
        _ => unreachable!(),
    }
}
