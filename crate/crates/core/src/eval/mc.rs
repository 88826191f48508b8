use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ppl::LmRef;
use crate::error::{invalid, Error, Result};
use crate::text::Vocab;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub prompt: String,
    pub choices: Vec<String>,
    pub answer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMode {
    #[default]
    Likelihood,
    GreedySingleToken,
}

impl FromStr for McMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "likelihood" => Ok(Self::Likelihood),
            "greedy_single_token" => Ok(Self::GreedySingleToken),
            _ => Err(Error::Config(format!("unknown multiple-choice mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McTask {
    pub items: Vec<McItem>,
    pub mode: McMode,
}

impl McTask {
    pub fn new(items: Vec<McItem>, mode: McMode) -> Result<Self> {
        for (i, it) in items.iter().enumerate() {
            if it.choices.len() < 2 {
                return invalid(format!("item {i} has fewer than two choices"));
            }
            if it.answer >= it.choices.len() {
                return invalid(format!("item {i} answer {} out of range", it.answer));
            }
            if mode == McMode::GreedySingleToken && it.choices.iter().any(|c| c.chars().count() != 1) {
                return invalid(format!("item {i}: greedy_single_token needs one-symbol choices"));
            }
        }
        if items.is_empty() {
            return invalid("task has no items");
        }
        Ok(Self { items, mode })
    }

    /// One JSON object `{prompt, choices, answer}` per non-blank line.
    pub fn from_jsonl(text: &str, mode: McMode) -> Result<Self> {
        let items = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<McItem>, _>>()?;
        Self::new(items, mode)
    }

    pub fn load(path: &Path, mode: McMode) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?, mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    /// Divide each candidate's log-likelihood by its length.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Chosen index per item.
    pub predictions: Vec<usize>,
}

/// Index of the largest score; ties go to the lowest index.
pub fn choose(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn encode_clean(vocab: &Vocab, text: &str) -> Result<Vec<usize>> {
    vocab.encode(text)
}

/// Candidate log-likelihoods for one item; for diffusion models these are
/// negated conditional bounds with the prompt held clean.
pub fn candidate_scores(model: LmRef<'_>, vocab: &Vocab, item: &McItem, opts: McOptions, seed: u64) -> Result<Vec<f64>> {
    let prompt = encode_clean(vocab, &item.prompt)?;
    item.choices
        .iter()
        .map(|c| {
            let cont = encode_clean(vocab, c)?;
            if cont.is_empty() {
                return invalid("empty continuation");
            }
            let mut seq = prompt.clone();
            seq.extend_from_slice(&cont);
            let mut given = vec![true; prompt.len()];
            given.resize(seq.len(), false);
            let (nll, _) = model.conditional_nll(&seq, &given, seed)?;
            Ok(if opts.normalize { -nll / cont.len() as f64 } else { -nll })
        })
        .collect()
}

fn greedy_next(model: LmRef<'_>, vocab: &Vocab, prompt: &[usize]) -> Result<usize> {
    match model {
        LmRef::Autoregressive(m) => {
            if prompt.len() + 1 > m.context_len() {
                return Err(Error::ContextOverflow {
                    len: prompt.len() + 1,
                    context: m.context_len(),
                });
            }
            Ok(choose(&m.next_logits(prompt)?))
        }
        LmRef::Diffusion { model: m, process, .. } => {
            let Some(mask) = vocab.mask_id() else {
                return Err(Error::Config("greedy_single_token needs an absorbing diffusion model".into()));
            };
            let mut seq = prompt.to_vec();
            seq.push(mask);
            if seq.len() > m.context_len() {
                return Err(Error::ContextOverflow {
                    len: seq.len(),
                    context: m.context_len(),
                });
            }
            // Under absorption the ratios at a masked slot are proportional
            // to the conditional distribution of the hidden token.
            let sb = process.schedule.sigma_bar(1.0)?;
            let field = m.score(&seq, sb)?;
            Ok(choose(&field.row(prompt.len())[..mask]))
        }
    }
}

pub fn multiple_choice_eval(model: LmRef<'_>, vocab: &Vocab, task: &McTask, opts: McOptions) -> Result<McResult> {
    let seed0 = match model {
        LmRef::Diffusion { nelbo, .. } => nelbo.seed,
        LmRef::Autoregressive(_) => 0,
    };
    let mut predictions = Vec::with_capacity(task.items.len());
    for (j, item) in task.items.iter().enumerate() {
        let pick = match task.mode {
            McMode::Likelihood => choose(&candidate_scores(model, vocab, item, opts, seed0.wrapping_add(j as u64))?),
            McMode::GreedySingleToken => {
                let prompt = encode_clean(vocab, &item.prompt)?;
                let next = greedy_next(model, vocab, &prompt)?;
                let ids: Vec<usize> = item
                    .choices
                    .iter()
                    .map(|c| encode_clean(vocab, c).map(|v| v[0]))
                    .collect::<Result<_>>()?;
                ids.iter().position(|&t| t == next).unwrap_or(usize::MAX)
            }
        };
        predictions.push(pick);
    }
    let correct = predictions.iter().zip(&task.items).filter(|(p, it)| **p == it.answer).count();
    Ok(McResult {
        accuracy: correct as f64 / task.items.len() as f64,
        correct,
        total: task.items.len(),
        predictions,
    })
}
