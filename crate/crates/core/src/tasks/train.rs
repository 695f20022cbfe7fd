//! Learning-rate schedule, AdamW, the training loops and the scenarios.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{gen_pretrain_corpus, mask_tokens, Batch, Dataset, Labels};
use super::metrics::{evaluate, Metrics};
use super::{Scenario, TrainConfig};
use crate::error::{Error, Result};
use crate::funnel_ops::{FunnelConfig, Recovery};
use crate::model::{HeadKind, ModelConfig, ModelState};
use crate::numerics::{Grads, ParamStore, SeqMask, Tape, Tensor3, Var};

/// Linear warmup from 0 to `max_lr` over `warmup` steps, then cosine decay to
/// `max_lr · min_fraction` at step `max_steps - 1`.
pub fn learning_rate(max_lr: f64, min_fraction: f64, warmup: usize, max_steps: usize, step: usize) -> f64 {
    if step < warmup {
        return max_lr * step as f64 / warmup as f64;
    }
    let span = max_steps.saturating_sub(1).saturating_sub(warmup);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - warmup) as f64 / span as f64).min(1.0)
    };
    let min_lr = max_lr * min_fraction;
    min_lr + (max_lr - min_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor3>,
    v: Vec<Tensor3>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || Grads::zeros_like(store).iter().map(|(_, t)| t.clone()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id).data_mut();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= lr * (update + weight_decay * p[i]);
            }
        }
    }
}

/// Mean cross-entropy of `state` on a labelled batch.
pub fn batch_loss(state: &ModelState, tape: &mut Tape, batch: &Batch) -> Result<Var> {
    match &batch.labels {
        Labels::Sentence(gold) => {
            let logits = state.forward_sentence(tape, &batch.tokens, &batch.mask)?;
            let targets: Vec<Option<usize>> = gold.iter().map(|&g| Some(g)).collect();
            tape.cross_entropy(logits, &targets)
        }
        Labels::Token(gold) => {
            let logits = state.forward_tokens(tape, &batch.tokens, &batch.mask)?;
            tape.cross_entropy(logits, gold)
        }
    }
}

fn optimise(
    state: &mut ModelState,
    tc: &TrainConfig,
    steps: usize,
    warmup: usize,
    mut next_loss: impl FnMut(&ModelState, &mut Tape, usize) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut opt = AdamW::new(state.params());
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut tape = Tape::new();
        let loss = next_loss(state, &mut tape, step)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Input(format!("loss diverged at step {step}")));
        }
        losses.push(value);
        let mut grads = tape.backward(loss, state.params())?;
        if tc.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > tc.grad_clip {
                grads.scale(tc.grad_clip / norm);
            }
        }
        let lr = learning_rate(tc.max_lr, tc.min_lr_fraction, warmup, steps, step);
        opt.step(state.params_mut(), &grads, lr, tc.weight_decay);
    }
    Ok(losses)
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fine-tunes on `data` for `tc.max_steps` steps with batches sampled with
/// replacement. Returns the per-step training loss.
pub fn train_supervised(state: &mut ModelState, data: &Dataset, tc: &TrainConfig) -> Result<Vec<f64>> {
    tc.validate()?;
    let mut rng = stream(tc.seed, 1);
    optimise(state, tc, tc.max_steps, tc.warmup_steps, |s, tape, _| {
        let batch = data.sample_batch(&mut rng, tc.batch_size)?;
        batch_loss(s, tape, &batch)
    })
}

/// Masked-token pretraining on a seeded Markov-chain corpus for
/// `tc.pretrain_steps` steps. The mask token is the last vocabulary id, so
/// corpus tokens are drawn from `0..vocab_size - 1`.
pub fn pretrain_mlm(
    state: &mut ModelState,
    tc: &TrainConfig,
    seq: usize,
    recovery: Recovery,
) -> Result<Vec<f64>> {
    if tc.pretrain_steps == 0 {
        return Ok(Vec::new());
    }
    let vocab = state.config().vocab_size;
    if vocab < 3 {
        return Err(Error::Config("pretraining needs a vocabulary of at least 3".into()));
    }
    let mask_id = vocab - 1;
    let corpus = gen_pretrain_corpus(tc.seed ^ 0x9e37_79b9, 4096, seq, mask_id)?;
    let mut rng = stream(tc.seed, 2);
    let warmup = tc.warmup_steps.min(tc.pretrain_steps / 10);
    let batch = tc.batch_size;
    optimise(state, tc, tc.pretrain_steps, warmup, |s, tape, _| {
        use rand::Rng;
        let rows: Vec<Vec<usize>> = (0..batch)
            .map(|_| corpus[rng.random_range(0..corpus.len())].clone())
            .collect();
        let (tokens, targets) = mask_tokens(&mut rng, &rows, mask_id)?;
        let mask = SeqMask::all_valid(batch, seq);
        let logits = s.forward_mlm(tape, &tokens, &mask, recovery)?;
        tape.cross_entropy(logits, &targets)
    })
}

/// A finished scenario run.
#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    /// Weights and funnel as evaluated.
    pub state: ModelState,
    pub pretrain_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub metrics: Metrics,
}

fn pretrain_funnel(mc: &ModelConfig, fc: &FunnelConfig, tc: &TrainConfig) -> Result<FunnelConfig> {
    let n = mc.n_layers;
    let Some(layer) = tc.pretrain_funnel_layer.or(fc.funnel_layer()) else {
        return Ok(FunnelConfig::no_funnel(n));
    };
    // The masked-token head needs full length: reuse the configured combine,
    // otherwise tile only.
    let recovery = match fc.recovery_op {
        Recovery::Combine(op) => Recovery::Combine(op),
        _ => Recovery::TileOnly,
    };
    FunnelConfig::at_layer(n, layer, recovery)
}

/// Runs one scenario end to end: optional masked-token pretraining, supervised
/// fine-tuning on `train`, then evaluation on `eval` under `fc`.
pub fn run_scenario(
    scenario: Scenario,
    mc: &ModelConfig,
    fc: &FunnelConfig,
    tc: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
) -> Result<ScenarioOutcome> {
    tc.validate()?;
    fc.validate(mc.n_layers)?;
    if train.kind != eval.kind || train.seq != eval.seq {
        return Err(Error::Config("train and eval sets disagree on task or length".into()));
    }
    if train.n_classes > mc.n_classes || eval.n_classes > mc.n_classes {
        return Err(Error::Config(format!(
            "task has {} classes but the model has {}",
            train.n_classes.max(eval.n_classes),
            mc.n_classes
        )));
    }
    if train.seq > mc.max_seq {
        return Err(Error::Config(format!(
            "task length {} exceeds max_seq {}",
            train.seq, mc.max_seq
        )));
    }
    if train.kind == HeadKind::Token && fc.is_active() && fc.recovery_op == Recovery::None {
        return Err(Error::Config("token task requires recovery".into()));
    }
    let span = train.vocab_span().max(eval.vocab_span());
    let limit = if tc.pretrain_steps > 0 { mc.vocab_size - 1 } else { mc.vocab_size };
    if span > limit {
        return Err(Error::Config(format!(
            "task uses token ids up to {} but only {limit} are available",
            span - 1
        )));
    }

    let no_funnel = FunnelConfig::no_funnel(mc.n_layers).with_recovery(fc.recovery_op);
    let (pre_fc, tune_fc) = match scenario {
        Scenario::FunnelAwarePretrainThenFinetune => (pretrain_funnel(mc, fc, tc)?, fc.clone()),
        Scenario::NormalPretrainThenFunnelFinetune => (no_funnel.clone(), fc.clone()),
        Scenario::InferenceOnlyFunnel => (no_funnel.clone(), no_funnel),
    };

    let mut state = ModelState::init(mc.clone(), pre_fc.clone(), tc.seed)?;
    let pretrain_losses = pretrain_mlm(&mut state, tc, train.seq, pre_fc.recovery_op)?;
    state.set_funnel(tune_fc)?;
    let finetune_losses = train_supervised(&mut state, train, tc)?;
    state.set_funnel(fc.clone())?;
    let metrics = evaluate(&state, eval, tc.eval_batch_size)?;
    Ok(ScenarioOutcome {
        state,
        pretrain_losses,
        finetune_losses,
        metrics,
    })
}
