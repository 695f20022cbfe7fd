//! Datasets, batching and the seeded synthetic generators.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadKind, TokenMatrix};
use crate::numerics::SeqMask;

/// Token id used for padding; padded positions are always masked out.
pub const PAD_ID: usize = 0;

/// Supervision for one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    /// One tag per token.
    Tags(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: Target,
}

/// Labelled sequences of one task kind, padded to `seq` when batched.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: HeadKind,
    pub seq: usize,
    pub n_classes: usize,
    /// Class that does not count as a hit for F1 (token tasks).
    pub negative_class: usize,
    pub examples: Vec<Example>,
}

/// Labels of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    /// One class per row.
    Sentence(Vec<usize>),
    /// Row-major `batch × seq` tags; `None` exactly at masked positions.
    Token(Vec<Option<usize>>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: TokenMatrix,
    pub mask: SeqMask,
    pub labels: Labels,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.batch
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.batch == 0
    }
}

impl Dataset {
    pub fn new(
        kind: HeadKind,
        seq: usize,
        n_classes: usize,
        negative_class: usize,
        examples: Vec<Example>,
    ) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            let bad = |msg: &str| Error::Input(format!("example {i}: {msg}"));
            if ex.tokens.is_empty() || ex.tokens.len() > seq {
                return Err(bad("length outside 1..=seq"));
            }
            match (&ex.target, kind) {
                (Target::Class(c), HeadKind::Sentence) if *c < n_classes => {}
                (Target::Tags(t), HeadKind::Token)
                    if t.len() == ex.tokens.len() && t.iter().all(|&c| c < n_classes) => {}
                _ => return Err(bad("target does not match the task kind")),
            }
        }
        Ok(Self {
            kind,
            seq,
            n_classes,
            negative_class,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Largest token id plus one.
    pub fn vocab_span(&self) -> usize {
        self.examples
            .iter()
            .flat_map(|e| e.tokens.iter())
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Pads and stacks the given examples.
    pub fn batch_of(&self, indices: &[usize]) -> Result<Batch> {
        let seq = self.seq;
        let mut ids = Vec::with_capacity(indices.len() * seq);
        let mut lengths = Vec::with_capacity(indices.len());
        let mut sentence = Vec::new();
        let mut token = Vec::new();
        for &i in indices {
            let ex = self
                .examples
                .get(i)
                .ok_or_else(|| Error::Input(format!("example index {i} out of range")))?;
            let n = ex.tokens.len();
            ids.extend_from_slice(&ex.tokens);
            ids.extend(std::iter::repeat_n(PAD_ID, seq - n));
            lengths.push(n);
            match &ex.target {
                Target::Class(c) => sentence.push(*c),
                Target::Tags(tags) => {
                    token.extend(tags.iter().map(|&t| Some(t)));
                    token.extend(std::iter::repeat_n(None, seq - n));
                }
            }
        }
        let labels = match self.kind {
            HeadKind::Sentence => Labels::Sentence(sentence),
            HeadKind::Token => Labels::Token(token),
        };
        Ok(Batch {
            tokens: TokenMatrix::new(indices.len(), seq, ids)?,
            mask: SeqMask::from_lengths(seq, &lengths)?,
            labels,
        })
    }

    /// Consecutive batches covering every example once, in order.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let all: Vec<usize> = (0..self.len()).collect();
        all.chunks(batch_size).map(|c| self.batch_of(c)).collect()
    }

    /// Uniform sample with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch_size: usize) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::Input("cannot sample from an empty dataset".into()));
        }
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..self.len())).collect();
        self.batch_of(&idx)
    }
}

/// Label of the sentence task: 1 iff more than half the tokens are in the
/// lower half of the vocabulary.
pub fn sentence_label(tokens: &[usize], vocab: usize) -> usize {
    let low = tokens.iter().filter(|&&t| t < vocab / 2).count();
    usize::from(2 * low > tokens.len())
}

/// Tags of the token task: 1 where a token repeats its predecessor.
pub fn duplicate_tags(tokens: &[usize]) -> Vec<usize> {
    (0..tokens.len())
        .map(|i| usize::from(i > 0 && tokens[i] == tokens[i - 1]))
        .collect()
}

/// Sequence classification over uniform tokens. The label is drawn first
/// (fair coin) and tokens are rejection-sampled until they carry it, so the
/// classes are balanced.
pub fn gen_sentence_task(seed: u64, n: usize, seq: usize, vocab: usize) -> Result<Dataset> {
    if vocab < 4 || seq == 0 {
        return Err(Error::Config(format!(
            "sentence task needs vocab >= 4 and seq >= 1, got {vocab} and {seq}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let want = usize::from(rng.random_bool(0.5));
        let tokens = loop {
            let t: Vec<usize> = (0..seq).map(|_| rng.random_range(0..vocab)).collect();
            if sentence_label(&t, vocab) == want {
                break t;
            }
        };
        examples.push(Example {
            tokens,
            target: Target::Class(want),
        });
    }
    Dataset::new(HeadKind::Sentence, seq, 2, 0, examples)
}

/// Probability that a token task position copies its predecessor.
pub const DUPLICATE_RATE: f64 = 0.4;

/// Adjacent-duplicate tagging. Each position after the first copies its
/// predecessor with probability [`DUPLICATE_RATE`], otherwise it is uniform.
pub fn gen_token_task(seed: u64, n: usize, seq: usize, vocab: usize) -> Result<Dataset> {
    if seq < 2 || vocab < 2 {
        return Err(Error::Config(format!(
            "token task needs seq >= 2 and vocab >= 2, got {seq} and {vocab}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tokens = vec![rng.random_range(0..vocab)];
        for i in 1..seq {
            let t = if rng.random_bool(DUPLICATE_RATE) {
                tokens[i - 1]
            } else {
                rng.random_range(0..vocab)
            };
            tokens.push(t);
        }
        let tags = duplicate_tags(&tokens);
        examples.push(Example {
            tokens,
            target: Target::Tags(tags),
        });
    }
    Dataset::new(HeadKind::Token, seq, 2, 0, examples)
}

/// Unlabelled sequences from a seeded sparse Markov chain: every token has
/// three preferred successors that take 90% of the mass.
pub fn gen_pretrain_corpus(seed: u64, n: usize, seq: usize, vocab: usize) -> Result<Vec<Vec<usize>>> {
    if vocab < 2 || seq == 0 {
        return Err(Error::Config("pretraining corpus needs vocab >= 2 and seq >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let successors: Vec<Vec<usize>> = (0..vocab)
        .map(|_| (0..3).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    Ok((0..n)
        .map(|_| {
            let mut s = vec![rng.random_range(0..vocab)];
            for i in 1..seq {
                let next = if rng.random_bool(0.9) {
                    *successors[s[i - 1]].choose(&mut rng).expect("three successors")
                } else {
                    rng.random_range(0..vocab)
                };
                s.push(next);
            }
            s
        })
        .collect())
}

/// Fraction of positions replaced by the mask token in pretraining.
pub const MASK_RATE: f64 = 0.15;

/// Replaces each position with `mask_id` with probability [`MASK_RATE`]
/// (at least one per row) and returns the corrupted tokens with targets set
/// only at replaced positions.
pub fn mask_tokens<R: Rng + ?Sized>(
    rng: &mut R,
    rows: &[Vec<usize>],
    mask_id: usize,
) -> Result<(TokenMatrix, Vec<Option<usize>>)> {
    let mut corrupted = Vec::with_capacity(rows.len());
    let mut targets = Vec::new();
    for row in rows {
        let mut hit: Vec<bool> = row.iter().map(|_| rng.random_bool(MASK_RATE)).collect();
        if !hit.iter().any(|&h| h) && !row.is_empty() {
            let i = rng.random_range(0..row.len());
            hit[i] = true;
        }
        let mut out = row.clone();
        for (i, &h) in hit.iter().enumerate() {
            targets.push(h.then_some(row[i]));
            if h {
                out[i] = mask_id;
            }
        }
        corrupted.push(out);
    }
    Ok((TokenMatrix::from_rows(&corrupted)?, targets))
}
