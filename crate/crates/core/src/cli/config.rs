//! Experiment configuration file and the task data it describes.
//!
//! Values resolve as: command-line flag, then config file, then built-in
//! default. The file is TOML whose keys are the field names below.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funnel_ops::{Recovery, RecoveryOp};
use crate::model::{HeadKind, ModelConfig};
use crate::tasks::{gen_sentence_task, gen_token_task, parse_conll, Dataset, Scenario, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Sentence,
    Token,
    Conll,
}

impl TaskName {
    pub fn name(self) -> &'static str {
        match self {
            TaskName::Sentence => "sentence",
            TaskName::Token => "token",
            TaskName::Conll => "conll",
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            TaskName::Sentence => HeadKind::Sentence,
            TaskName::Token | TaskName::Conll => HeadKind::Token,
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(TaskName::Sentence),
            "token" => Ok(TaskName::Token),
            "conll" => Ok(TaskName::Conll),
            other => Err(Error::Usage(format!(
                "unknown task {other:?} (expected sentence, token or conll)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskName,
    /// Sequence length of generated examples and of CoNLL chunks; unset means
    /// the model's `max_seq`.
    pub seq_len: Option<usize>,
    /// Token ids of the synthetic tasks are drawn from `0..task_vocab`; unset
    /// means `vocab_size - 1` (the last id is the pretraining mask token).
    pub task_vocab: Option<usize>,
    pub n_train: usize,
    pub n_eval: usize,
    /// Seed of the held-out set, shared by every run seed.
    pub eval_seed: u64,
    pub conll_path: Option<PathBuf>,
    /// Held-out CoNLL file; the training file is reused when unset.
    pub conll_eval_path: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            task: TaskName::Token,
            seq_len: None,
            task_vocab: None,
            n_train: 4096,
            n_eval: 512,
            eval_seed: 999,
            conll_path: None,
            conll_eval_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Funnel boundaries to sweep; 0 is the unfunneled baseline.
    pub layers: Vec<usize>,
    pub recovery: Recovery,
    pub scenario: Scenario,
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            layers: (0..=16).step_by(2).collect(),
            recovery: Recovery::Combine(RecoveryOp::AvgLast),
            scenario: Scenario::NormalPretrainThenFunnelFinetune,
            seeds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub model: ModelConfig,
    /// Funnel boundaries to profile; 0 pools before the first layer.
    pub layers: Vec<usize>,
    pub seq_len: usize,
    pub batch: usize,
    pub n_warmup: usize,
    pub n_reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            layers: (0..=16).step_by(2).collect(),
            seq_len: 128,
            batch: 1,
            n_warmup: 2,
            n_reps: 15,
        }
    }
}

/// Everything a command may need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: TaskConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::compact(),
            train: TrainConfig::default(),
            data: TaskConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn seq_len(&self) -> usize {
        self.data.seq_len.unwrap_or(self.model.max_seq)
    }

    pub fn task_vocab(&self) -> usize {
        self.data
            .task_vocab
            .unwrap_or(self.model.vocab_size.saturating_sub(1))
    }
}

/// Training and held-out sets for one run seed, plus the model config
/// widened to the task's class count.
pub fn task_data(cfg: &ExperimentConfig, seed: u64) -> Result<(ModelConfig, Dataset, Dataset)> {
    let d = &cfg.data;
    let (seq, vocab) = (cfg.seq_len(), cfg.task_vocab());
    let (train, eval) = match d.task {
        TaskName::Sentence => (
            gen_sentence_task(seed, d.n_train, seq, vocab)?,
            gen_sentence_task(d.eval_seed, d.n_eval, seq, vocab)?,
        ),
        TaskName::Token => (
            gen_token_task(seed, d.n_train, seq, vocab)?,
            gen_token_task(d.eval_seed, d.n_eval, seq, vocab)?,
        ),
        TaskName::Conll => {
            let path = d
                .conll_path
                .as_ref()
                .ok_or_else(|| Error::Usage("the conll task needs --data PATH".into()))?;
            let buckets = cfg.model.vocab_size.saturating_sub(1);
            let corpus = parse_conll(path)?;
            let train = corpus.to_dataset(buckets, seq)?;
            let eval = match &d.conll_eval_path {
                Some(p) => {
                    // Tag ids must agree with the training file.
                    let mut held_out = parse_conll(p)?;
                    let mut names = corpus.tag_names.clone();
                    for t in held_out.tag_names {
                        if !names.contains(&t) {
                            names.push(t);
                        }
                    }
                    held_out.tag_names = names;
                    held_out.to_dataset(buckets, seq)?
                }
                None => train.clone(),
            };
            if train.is_empty() {
                return Err(Error::Input(format!("{} holds no sentences", path.display())));
            }
            (train, eval)
        }
    };
    let mut mc = cfg.model.clone();
    mc.n_classes = mc.n_classes.max(train.n_classes).max(eval.n_classes);
    Ok((mc, train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn nested_keys_override() {
        let cfg = ExperimentConfig::from_toml(
            "[train]\nmax_steps = 10\nwarmup_steps = 1\n[sweep]\nlayers = [0, 4]\nrecovery = \"max_last\"\nscenario = \"inference_only\"\n[data]\ntask = \"sentence\"\n",
        )
        .unwrap();
        assert_eq!(cfg.train.max_steps, 10);
        assert_eq!(cfg.sweep.layers, vec![0, 4]);
        assert_eq!(cfg.sweep.recovery, Recovery::Combine(RecoveryOp::MaxLast));
        assert_eq!(cfg.sweep.scenario, Scenario::InferenceOnlyFunnel);
        assert_eq!(cfg.data.task, TaskName::Sentence);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("[train]\nmax_stepz = 3\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synthetic_data_fits_below_the_mask_id() {
        let cfg = ExperimentConfig::default();
        let (_, train, _) = task_data(&cfg, 0).unwrap();
        assert!(train.vocab_span() < cfg.model.vocab_size);
        assert_eq!(train.seq, cfg.model.max_seq);
    }
}
