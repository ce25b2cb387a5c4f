//! Synthetic classification and regression tasks.
//!
//! Token 0 is the classifier token at position 0 and token 1 is a marker.
//! Every other token is content, with class `(token − 2) mod classes`.
//!
//! - key-lookup: the label is the class of the token right after the
//!   marker, so the model must attend sharply to one special token.
//! - bag-majority: the label is the most frequent content class (lowest
//!   class on ties), so attention can stay spread out.
//! - pair-similarity: a regression target, the Jaccard similarity of the
//!   token sets on either side of the marker.

use kdqat_core::batch::Example;
use kdqat_core::{EncoderConfig, Target};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const CLS: usize = 0;
pub const MARKER: usize = 1;
pub const FIRST_CONTENT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    KeyLookup,
    BagMajority,
    PairSimilarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    /// Ignored by pair-similarity, which is a regression task.
    pub classes: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::KeyLookup,
            vocab: 16,
            seq_len: 8,
            classes: 2,
            train_size: 2048,
            dev_size: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl TaskConfig {
    pub fn is_regression(&self) -> bool {
        self.kind == TaskKind::PairSimilarity
    }

    /// Output width the model head needs.
    pub fn head_width(&self) -> usize {
        if self.is_regression() {
            1
        } else {
            self.classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        let content = self.vocab.saturating_sub(FIRST_CONTENT);
        if !self.is_regression() && (self.classes < 2 || content < self.classes) {
            return Err(HarnessError::Config(format!(
                "{} content tokens cannot cover {} classes",
                content, self.classes
            )));
        }
        if content == 0 {
            return Err(HarnessError::Config(format!("vocab {} leaves no content tokens", self.vocab)));
        }
        if self.seq_len < 4 {
            return Err(HarnessError::Config(format!("seq_len {} is below 4", self.seq_len)));
        }
        if self.train_size == 0 || self.dev_size == 0 {
            return Err(HarnessError::Config("train and dev sets must be non-empty".into()));
        }
        Ok(())
    }

    /// Checks that `model` can read this task's sequences and emit its labels.
    pub fn check_model(&self, model: &EncoderConfig) -> Result<()> {
        if model.vocab < self.vocab || model.max_len < self.seq_len || model.classes != self.head_width() {
            return Err(HarnessError::Config(format!(
                "model (vocab {}, max_len {}, classes {}) does not fit task (vocab {}, seq_len {}, head {})",
                model.vocab,
                model.max_len,
                model.classes,
                self.vocab,
                self.seq_len,
                self.head_width()
            )));
        }
        Ok(())
    }
}

pub fn content_class(token: usize, classes: usize) -> usize {
    (token - FIRST_CONTENT) % classes
}

/// The labelling rule of `kind`, as a function of the tokens alone.
pub fn label(kind: TaskKind, tokens: &[usize], classes: usize) -> Target {
    match kind {
        TaskKind::KeyLookup => {
            let p = tokens.iter().position(|&t| t == MARKER).expect("key-lookup sequence has a marker");
            Target::Class(content_class(tokens[p + 1], classes))
        }
        TaskKind::BagMajority => {
            let mut counts = vec![0usize; classes];
            for &t in tokens.iter().filter(|&&t| t >= FIRST_CONTENT) {
                counts[content_class(t, classes)] += 1;
            }
            let best = (0..classes).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
            Target::Class(best)
        }
        TaskKind::PairSimilarity => {
            let p = tokens.iter().position(|&t| t == MARKER).expect("pair sequence has a marker");
            let set = |s: &[usize]| {
                let mut v: Vec<usize> = s.to_vec();
                v.sort_unstable();
                v.dedup();
                v
            };
            let (a, b) = (set(&tokens[1..p]), set(&tokens[p + 1..]));
            let inter = a.iter().filter(|t| b.binary_search(t).is_ok()).count();
            let union = a.len() + b.len() - inter;
            Target::Value(inter as f32 / union.max(1) as f32)
        }
    }
}

fn sample(cfg: &TaskConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = cfg.seq_len;
    let content = |rng: &mut ChaCha8Rng| rng.random_range(FIRST_CONTENT..cfg.vocab);
    let mut tokens = vec![CLS];
    match cfg.kind {
        TaskKind::KeyLookup => {
            tokens.extend((1..n).map(|_| content(rng)));
            let p = rng.random_range(1..n - 1);
            tokens[p] = MARKER;
        }
        TaskKind::BagMajority => tokens.extend((1..n).map(|_| content(rng))),
        TaskKind::PairSimilarity => {
            let half = (n - 2) / 2;
            let a: Vec<usize> = (0..half).map(|_| content(rng)).collect();
            let copy = rng.random_range(0.0f64..1.0);
            tokens.extend(&a);
            tokens.push(MARKER);
            for _ in half + 2..n {
                let t = if rng.random_bool(copy) { *a.choose(rng).unwrap() } else { content(rng) };
                tokens.push(t);
            }
        }
    }
    tokens
}

/// Train and dev splits come from separate streams of one generator seed.
pub fn generate(cfg: &TaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let split = |stream: u64, size: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        (0..size)
            .map(|_| {
                let tokens = sample(cfg, &mut rng);
                let target = label(cfg.kind, &tokens, cfg.classes);
                Example { tokens, target }
            })
            .collect::<Vec<_>>()
    };
    Ok(Dataset {
        train: split(0, cfg.train_size),
        dev: split(1, cfg.dev_size),
    })
}
