mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sedd_core::eval::{judge_ppl, multiple_choice_eval, zero_shot_ppl, LmRef, McItem, McMode, McOptions, McTask};
use sedd_core::model::{ArConfig, ArTransformer};
use sedd_core::noise::{KernelKind, NoiseKernel, NoiseProcess};
use sedd_core::oracle::{exact_nll, ExactScore};
use sedd_core::sample::{ar_sample, ArStrategy};
use sedd_core::text::Vocab;
use sedd_core::train::{nelbo, NelboConfig, PplOrder};

/// p0-weighted bound and truth over the support, with the combined stderr.
fn instance_bound(
    p0: &sedd_core::oracle::EnumeratedDistribution,
    pr: &NoiseProcess,
    clean: Option<&[bool]>,
    truth: impl Fn(usize, &[usize]) -> f64,
) -> (f64, f64, f64) {
    let model = ExactScore::new(p0.clone(), pr.kernel).unwrap();
    let (mut bound, mut var, mut exact) = (0.0, 0.0, 0.0);
    for ix in (0..p0.space.size).filter(|&ix| p0.probs[ix] > 0.0) {
        let x = p0.space.tokens(ix);
        let cfg = NelboConfig {
            time_samples: 512,
            noise_samples: 4,
            seed: ix as u64,
            chunk: 64,
        };
        let b = nelbo(&model, pr, &x, clean, &cfg).unwrap();
        bound += p0.probs[ix] * b.total;
        var += (p0.probs[ix] * b.stderr).powi(2);
        exact += p0.probs[ix] * truth(ix, &x);
    }
    (bound, var.sqrt(), exact)
}

#[test]
fn exact_score_bound_is_above_true_nll() {
    for (kind, schedule) in all_pairs() {
        let p0 = toy_p0(kind);
        let pr = process(kind, schedule);
        let (b, se, truth) = instance_bound(&p0, &pr, None, |_, x| exact_nll(&p0, x) * x.len() as f64);
        assert!(b + 2.0 * se >= truth, "{kind}: {b} ± {se} < {truth}");
        // Exact scores make the bound tight up to Monte Carlo error.
        assert!(b - 3.0 * se <= truth + 1e-3, "{kind}: {b} ± {se} vs {truth}");
    }
}

#[test]
fn conditional_bound_is_above_conditional_nll() {
    for (kind, schedule) in all_pairs() {
        let p0 = toy_p0(kind);
        let pr = process(kind, schedule);
        let marg = p0.position_marginals();
        let (b, se, truth) =
            instance_bound(&p0, &pr, Some(&[true, false]), |ix, x| -(p0.probs[ix] / marg[0][x[0]]).ln());
        assert!(b + 2.0 * se >= truth, "{kind}: {b} ± {se} < {truth}");
        assert!(b - 3.0 * se <= truth + 1e-3, "{kind}: {b} ± {se} vs {truth}");
    }
}

#[test]
fn diffusion_perplexity_bound_dominates_true_perplexity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (kind, schedule) in all_pairs() {
        let p0 = toy_p0(kind);
        let pr = process(kind, schedule);
        let model = ExactScore::new(p0.clone(), pr.kernel).unwrap();
        let seqs: Vec<Vec<usize>> = (0..40).map(|_| p0.sample(&mut rng)).collect();
        let lm = LmRef::Diffusion {
            model: &model,
            process: &pr,
            nelbo: NelboConfig {
                time_samples: 128,
                ..Default::default()
            },
        };
        let report = zero_shot_ppl(lm, &seqs, PplOrder::MeanExp).unwrap();
        let nats: Vec<f64> = seqs.iter().map(|x| exact_nll(&p0, x)).collect();
        let truth = (nats.iter().sum::<f64>() / nats.len() as f64).exp();
        let bound = report.get("ppl").unwrap();
        let se = report.metrics["nll_per_token"].stderr.unwrap();
        assert_eq!(report.notes["ppl_kind"], "upper_bound");
        assert!(bound * (2.0 * se).exp() >= truth, "{kind}: bound {bound} vs true {truth}");
        assert!(report.get("ppl_exp_mean").unwrap() >= report.get("ppl_mean_exp").unwrap());
    }
}

fn random_task(vocab_size: usize, items: usize, choices: usize, seed: u64) -> (Vocab, McTask) {
    let symbols: Vec<char> = ('a'..='z').take(vocab_size).collect();
    let vocab = Vocab::from_symbols(symbols.clone(), false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut word = |n: usize| -> String { (0..n).map(|_| symbols[rng.gen_range(0..vocab_size)]).collect() };
    let items = (0..items)
        .map(|_| McItem {
            prompt: word(4),
            choices: (0..choices).map(|_| word(3)).collect(),
            answer: 0,
        })
        .collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let items = items
        .into_iter()
        .map(|mut it| {
            it.answer = rng.gen_range(0..choices);
            it
        })
        .collect();
    (vocab, McTask::new(items, McMode::Likelihood).unwrap())
}

fn within_three_sigma(acc: f64, p: f64, n: usize) -> bool {
    (acc - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn untrained_models_score_at_chance() {
    let (vocab, task) = random_task(6, 1000, 4, 9);
    let ar = ArTransformer::<f32>::new(
        ArConfig {
            vocab: 6,
            context: 8,
            layers: 1,
            heads: 1,
            dim: 8,
            mlp_ratio: 2,
        },
        0,
    )
    .unwrap();
    let opts = McOptions { normalize: false };
    let r = multiple_choice_eval(LmRef::Autoregressive(&ar), &vocab, &task, opts).unwrap();
    assert!(within_three_sigma(r.accuracy, 0.25, r.total), "AR accuracy {}", r.accuracy);

    let dvocab = Vocab::from_symbols(vocab.symbols().to_vec(), true).unwrap();
    let net = tiny_score_net(KernelKind::Absorb, dvocab.size(), 8, 0);
    let pr = NoiseProcess::new(NoiseKernel::new(KernelKind::Absorb, dvocab.size()).unwrap(), sedd_core::noise::Schedule::loglinear()).unwrap();
    let (_, small) = random_task(6, 300, 4, 10);
    let lm = LmRef::Diffusion {
        model: &net,
        process: &pr,
        nelbo: NelboConfig {
            time_samples: 8,
            ..Default::default()
        },
    };
    let r = multiple_choice_eval(lm, &dvocab, &small, opts).unwrap();
    assert!(within_three_sigma(r.accuracy, 0.25, r.total), "diffusion accuracy {}", r.accuracy);
}

#[test]
fn trained_model_picks_its_training_string() {
    let (vocab, ar) = periodic_ar();
    let lm = LmRef::Autoregressive(&ar);
    let item = McItem {
        prompt: "abab".into(),
        choices: vec!["bbab".into(), "abab".into(), "aabb".into()],
        answer: 1,
    };
    let task = McTask::new(vec![item], McMode::Likelihood).unwrap();
    for normalize in [false, true] {
        let r = multiple_choice_eval(lm, &vocab, &task, McOptions { normalize }).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }
    let greedy = McTask::new(
        vec![McItem {
            prompt: "aba".into(),
            choices: vec!["a".into(), "b".into()],
            answer: 1,
        }],
        McMode::GreedySingleToken,
    )
    .unwrap();
    assert_eq!(multiple_choice_eval(lm, &vocab, &greedy, McOptions { normalize: false }).unwrap().accuracy, 1.0);
    let long = McTask::new(
        vec![McItem {
            prompt: "abab".into(),
            choices: vec!["ababa".into(), "b".into()],
            answer: 0,
        }],
        McMode::Likelihood,
    )
    .unwrap();
    assert!(multiple_choice_eval(lm, &vocab, &long, McOptions { normalize: false }).is_err());
}

#[test]
fn judge_perplexity_orders_samples_sensibly() {
    let (_, ar) = periodic_ar();
    let own: Vec<Vec<usize>> = (0..4)
        .map(|s| ar_sample(&ar, &[0], 7, ArStrategy::Greedy, s, &[]).unwrap().tokens)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise: Vec<Vec<usize>> = (0..16).map(|_| (0..8).map(|_| rng.gen_range(0..2)).collect()).collect();
    let good = judge_ppl(&ar, &own).unwrap().get("ppl").unwrap();
    let bad = judge_ppl(&ar, &noise).unwrap().get("ppl").unwrap();
    assert!(good < 1.05, "{good}");
    assert!(bad > good);
}

#[test]
fn top_k_over_everything_is_ancestral_sampling() {
    let ar = ArTransformer::<f32>::new(
        ArConfig {
            vocab: 5,
            context: 4,
            layers: 1,
            heads: 1,
            dim: 8,
            mlp_ratio: 2,
        },
        1,
    )
    .unwrap();
    // Put some structure in the zero-initialized head.
    let mut ar = ar;
    let names = ar.params.names().to_vec();
    let hb = names.iter().position(|n| n == "head.b").unwrap();
    ar.params.tensors_mut()[hb].data_mut().copy_from_slice(&[1.0, 0.2, -0.5, 0.7, 0.0]);
    let logits = sedd_core::eval::CausalLm::next_logits(&ar, &[]).unwrap();
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
    let draws = 10_000;
    for strategy in [ArStrategy::TopK(5), ArStrategy::Ancestral] {
        let mut counts = [0usize; 5];
        for s in 0..draws {
            counts[ar_sample(&ar, &[], 1, strategy, s, &[]).unwrap().tokens[0]] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, &p)| {
                let e = p * draws as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // 99th percentile of χ² with four degrees of freedom.
        assert!(chi2 < 13.28, "{strategy:?}: χ² = {chi2}");
    }
}
