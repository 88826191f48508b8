//! Character-level corpus handling: vocabulary, encode/decode, splits and
//! fixed-length training windows.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::KernelKind;

/// Glyph used when rendering MASK in decoded text.
pub const MASK_GLYPH: char = '\u{2591}';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<char>,
    mask: bool,
}

impl Vocab {
    /// Sorted distinct characters, plus MASK as the last id for the absorbing kernel.
    pub fn build(corpus: &Corpus, kind: KernelKind) -> Result<Self> {
        let mut chars: Vec<char> = corpus.documents.iter().flat_map(|d| d.text.chars()).collect();
        if chars.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        chars.sort_unstable();
        chars.dedup();
        Ok(Self {
            symbols: chars,
            mask: kind == KernelKind::Absorb,
        })
    }

    pub fn from_text(text: &str, kind: KernelKind) -> Result<Self> {
        Self::build(&Corpus::from_texts(&[text]), kind)
    }

    pub fn from_symbols(symbols: Vec<char>, mask: bool) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut sorted = symbols.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != symbols.len() {
            return Err(Error::Invalid("vocabulary symbols must be unique".into()));
        }
        Ok(Self { symbols, mask })
    }

    /// N, including MASK when present.
    pub fn size(&self) -> usize {
        self.symbols.len() + usize::from(self.mask)
    }

    /// Number of non-MASK symbols.
    pub fn clean_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn mask_id(&self) -> Option<usize> {
        self.mask.then_some(self.symbols.len())
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn kernel_kind(&self) -> KernelKind {
        if self.mask {
            KernelKind::Absorb
        } else {
            KernelKind::Uniform
        }
    }

    pub fn id_of(&self, ch: char) -> Option<usize> {
        self.symbols.binary_search(&ch).ok().or_else(|| self.symbols.iter().position(|&c| c == ch))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| self.id_of(ch).ok_or(Error::UnknownChar { ch, position }))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .enumerate()
            .map(|(position, &id)| {
                if id < self.symbols.len() {
                    Ok(self.symbols[id])
                } else if Some(id) == self.mask_id() {
                    Ok(MASK_GLYPH)
                } else {
                    Err(Error::TokenOutOfRange {
                        id,
                        position,
                        size: self.size(),
                    })
                }
            })
            .collect()
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().position(|&id| id >= self.size()) {
            Some(position) => Err(Error::TokenOutOfRange {
                id: ids[position],
                position,
                size: self.size(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Document {
    pub name: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Document>,
    /// Split tag per document.
    pub splits: Vec<Split>,
}

impl Corpus {
    /// Every document goes to the train split.
    pub fn from_texts(texts: &[&str]) -> Self {
        let documents: Vec<Document> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                name: format!("doc{i}"),
                text: t.to_string(),
            })
            .collect();
        let splits = vec![Split::Train; documents.len()];
        Self { documents, splits }
    }

    /// Reads every `.txt` file in `dir` (sorted by name) and splits by document.
    pub fn from_dir(dir: &Path, seed: u64) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort();
        let mut documents = Vec::new();
        for p in paths {
            let text = std::fs::read_to_string(&p)?;
            if !text.is_empty() {
                documents.push(Document {
                    name: p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                    text,
                });
            }
        }
        if documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut corpus = Self {
            splits: vec![Split::Train; documents.len()],
            documents,
        };
        corpus.assign_splits(seed);
        Ok(corpus)
    }

    /// 90/5/5 by document after a seeded shuffle. Corpora with fewer than
    /// three documents keep everything in train.
    pub fn assign_splits(&mut self, seed: u64) {
        let n = self.documents.len();
        self.splits = vec![Split::Train; n];
        if n < 3 {
            return;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((n as f64 * 0.05).round() as usize).max(1);
        for &i in &order[..held] {
            self.splits[i] = Split::Valid;
        }
        for &i in &order[held..2 * held] {
            self.splits[i] = Split::Test;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.documents.iter().all(|d| d.text.is_empty())
    }

    /// Concatenated text of one split, documents in corpus order.
    pub fn split_text(&self, split: Split) -> String {
        self.documents
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(d, _)| d.text.as_str())
            .collect()
    }

    pub fn split_tokens(&self, vocab: &Vocab, split: Split) -> Result<Vec<usize>> {
        vocab.encode(&self.split_text(split))
    }
}

/// Non-overlapping length-`len` windows over a token stream, served in a
/// seed-determined order that is reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct Windows {
    tokens: Vec<usize>,
    len: usize,
    count: usize,
    seed: u64,
}

impl Windows {
    pub fn new(tokens: Vec<usize>, len: usize, seed: u64) -> Result<Self> {
        if len == 0 || tokens.len() < len {
            return Err(Error::ShortSplit {
                have: tokens.len(),
                need: len,
            });
        }
        let count = tokens.len() / len;
        Ok(Self {
            tokens,
            len,
            count,
            seed,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn window_len(&self) -> usize {
        self.len
    }

    pub fn window(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.len..(i + 1) * self.len]
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.count).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// The `batch_size` windows making up global batch number `step`; a pure
    /// function of (seed, step), so resumed runs see the same data.
    pub fn batch(&self, step: u64, batch_size: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for j in 0..batch_size as u64 {
            let g = step * batch_size as u64 + j;
            let epoch = g / self.count as u64;
            let pos = (g % self.count as u64) as usize;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.epoch_order(epoch)));
            }
            let idx = cached.as_ref().unwrap().1[pos];
            out.push(self.window(idx).to_vec());
        }
        out
    }
}

/// One epoch of `[batch_size × len]` batches; trailing windows that do not
/// fill a batch are dropped, as is the token remainder.
pub fn make_batches(tokens: &[usize], len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<Vec<usize>>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let w = Windows::new(tokens.to_vec(), len, seed)?;
    let order = w.epoch_order(0);
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.iter().map(|&i| w.window(i).to_vec()).collect())
        .collect())
}
