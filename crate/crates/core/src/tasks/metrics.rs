//! Accuracy and micro F1.

use serde::Serialize;

use super::data::{Batch, Dataset, Labels};
use crate::error::Result;
use crate::model::{HeadKind, ModelState};
use crate::numerics::Tape;

/// Micro-averaged counts where every class except `negative` is a hit class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub correct: u64,
    pub total: u64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, pred: usize, gold: usize, negative: usize) {
        self.total += 1;
        if pred == gold {
            self.correct += 1;
            if gold != negative {
                self.tp += 1;
            }
        } else {
            if pred != negative {
                self.fp += 1;
            }
            if gold != negative {
                self.fn_ += 1;
            }
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.total)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn confusion_counts(pred: &[usize], gold: &[usize], negative: usize) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gold) {
        c.add(p, g, negative);
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    /// `accuracy` for sentence tasks, `f1` for token tasks.
    pub name: &'static str,
    pub value: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

impl Metrics {
    fn from_confusion(kind: HeadKind, c: Confusion) -> Self {
        let (name, value) = match kind {
            HeadKind::Sentence => ("accuracy", c.accuracy()),
            HeadKind::Token => ("f1", c.f1()),
        };
        Self {
            name,
            value,
            accuracy: c.accuracy(),
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            confusion: c,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax class per row (sentence) or per valid position (token, `None` at
/// masked positions).
pub fn predict(state: &ModelState, batch: &Batch, kind: HeadKind) -> Result<Vec<Option<usize>>> {
    let mut tape = Tape::new();
    let logits = match kind {
        HeadKind::Sentence => state.forward_sentence(&mut tape, &batch.tokens, &batch.mask)?,
        HeadKind::Token => state.forward_tokens(&mut tape, &batch.tokens, &batch.mask)?,
    };
    let t = tape.value(logits);
    let mut out = Vec::with_capacity(t.batch() * t.seq());
    for b in 0..t.batch() {
        for s in 0..t.seq() {
            let valid = kind == HeadKind::Sentence || batch.mask.is_valid(b, s);
            out.push(valid.then(|| argmax(t.row(b, s))));
        }
    }
    Ok(out)
}

/// Accuracy for sentence tasks; micro F1 over the non-negative classes (plus
/// precision and recall) for token tasks.
pub fn evaluate(state: &ModelState, data: &Dataset, eval_batch_size: usize) -> Result<Metrics> {
    let mut c = Confusion::default();
    for batch in data.batches(eval_batch_size)? {
        let pred = predict(state, &batch, data.kind)?;
        match &batch.labels {
            Labels::Sentence(gold) => {
                for (p, &g) in pred.iter().zip(gold) {
                    c.add(p.expect("sentence rows are always predicted"), g, data.negative_class);
                }
            }
            Labels::Token(gold) => {
                for (p, g) in pred.iter().zip(gold) {
                    if let (Some(p), Some(g)) = (p, g) {
                        c.add(*p, *g, data.negative_class);
                    }
                }
            }
        }
    }
    Ok(Metrics::from_confusion(data.kind, c))
}
