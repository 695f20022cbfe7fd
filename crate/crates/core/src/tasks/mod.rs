//! Synthetic tasks, CoNLL ingestion, optimisation and the three training
//! scenarios (funnel-aware pretraining, funnel only at fine-tuning, funnel
//! only at inference).

mod conll;
mod data;
mod metrics;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use conll::{bucket, parse_conll, parse_conll_str, ConllCorpus, ConllSentence};
pub use data::{
    duplicate_tags, gen_pretrain_corpus, gen_sentence_task, gen_token_task, mask_tokens,
    sentence_label, Batch, Dataset, Example, Labels, Target, DUPLICATE_RATE, MASK_RATE, PAD_ID,
};
pub use metrics::{confusion_counts, evaluate, predict, Confusion, Metrics};
pub use train::{
    batch_loss, learning_rate, pretrain_mlm, run_scenario, train_supervised, AdamW,
    ScenarioOutcome,
};

use crate::error::{Error, Result};

/// Optimisation settings shared by pretraining and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Fine-tuning steps.
    pub max_steps: usize,
    pub max_lr: f64,
    /// Final learning rate as a fraction of `max_lr`.
    pub min_lr_fraction: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Masked-token pretraining steps before fine-tuning; 0 skips pretraining.
    pub pretrain_steps: usize,
    /// Funnel boundary used during funnel-aware pretraining. Unset means the
    /// fine-tuning funnel's boundary.
    pub pretrain_funnel_layer: Option<usize>,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            max_lr: 1e-3,
            min_lr_fraction: 0.1,
            warmup_steps: 100,
            batch_size: 16,
            eval_batch_size: 256,
            weight_decay: 0.0,
            seed: 0,
            pretrain_steps: 0,
            pretrain_funnel_layer: None,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning hyperparameters of the original large-model runs (learning
    /// rate 3e-5, batch 128). Too slow to move a randomly initialised toy model.
    pub fn large_model_reference() -> Self {
        Self {
            max_lr: 3e-5,
            batch_size: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.max_steps == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("max_steps, batch_size and eval_batch_size must be positive".into());
        }
        if !(self.min_lr_fraction > 0.0 && self.min_lr_fraction <= 1.0) {
            return fail(format!("min_lr_fraction {} outside (0, 1]", self.min_lr_fraction));
        }
        if self.warmup_steps >= self.max_steps {
            return fail(format!(
                "warmup_steps {} must be below max_steps {}",
                self.warmup_steps, self.max_steps
            ));
        }
        if !(self.max_lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return fail("max_lr must be positive, weight_decay and grad_clip non-negative".into());
        }
        Ok(())
    }
}

/// How the funnel enters the life of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scenario {
    /// Pretrain with the funnel, then fine-tune with it.
    FunnelAwarePretrainThenFinetune,
    /// Pretrain without the funnel, fine-tune with it.
    NormalPretrainThenFunnelFinetune,
    /// Pretrain and fine-tune without the funnel; insert it for evaluation.
    InferenceOnlyFunnel,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [
        Scenario::FunnelAwarePretrainThenFinetune,
        Scenario::NormalPretrainThenFunnelFinetune,
        Scenario::InferenceOnlyFunnel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::FunnelAwarePretrainThenFinetune => "funnel_aware",
            Scenario::NormalPretrainThenFunnelFinetune => "funnel_finetune",
            Scenario::InferenceOnlyFunnel => "inference_only",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "funnel_aware" | "funnel_aware_pretrain_then_finetune" => {
                Ok(Scenario::FunnelAwarePretrainThenFinetune)
            }
            "funnel_finetune" | "normal_pretrain_then_funnel_finetune" => {
                Ok(Scenario::NormalPretrainThenFunnelFinetune)
            }
            "inference_only" | "inference_only_funnel" => Ok(Scenario::InferenceOnlyFunnel),
            other => Err(Error::Usage(format!(
                "unknown scenario {other:?} (expected funnel_aware, funnel_finetune or inference_only)"
            ))),
        }
    }
}

impl TryFrom<String> for Scenario {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> String {
        s.name().to_string()
    }
}
