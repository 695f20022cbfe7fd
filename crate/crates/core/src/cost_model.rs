//! Analytical FLOPs accounting for a funnel placement, and a wall-clock
//! latency profiler.
//!
//! Convention: 2 flops per multiply-add in every matmul. Normalisation,
//! activations, softmax, rotary embeddings, pooling and tiling are not
//! counted. The recovery combine is counted elementwise (1 flop per value, 2
//! for `avg_last`). All counts are per sequence of the given length.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::funnel_ops::{FunnelConfig, Recovery};
use crate::model::{HeadKind, ModelConfig, ModelState, TokenMatrix};
use crate::numerics::{SeqMask, Tape};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    /// Flops of each stack layer at its effective length.
    pub per_layer: Vec<u64>,
    /// Sequence length each layer runs at.
    pub layer_lengths: Vec<usize>,
    /// Attention pooler plus sentence classifier (sentence head only).
    pub pooler_flops: u64,
    /// Token classifier at full length (token head only).
    pub head_flops: u64,
    pub recovery_flops: u64,
    pub total: u64,
    /// Same model and head with every pool factor 1.
    pub baseline_total: u64,
    /// `1 - total / baseline_total`. Slightly negative when a combining
    /// recovery follows a funnel that shortens nothing.
    pub savings_ratio: f64,
}

/// Matmul flops of one transformer block at length `len`.
pub fn block_flops(mc: &ModelConfig, len: usize) -> u64 {
    let (l, d, f) = (len as u64, mc.d_model as u64, mc.d_ff as u64);
    8 * l * d * d + 4 * l * l * d + 6 * l * d * f
}

fn pooler_flops(mc: &ModelConfig, len: usize) -> u64 {
    let (l, d, c) = (len as u64, mc.d_model as u64, mc.n_classes as u64);
    mc.pooler.n_pool_layers as u64 * block_flops(mc, len) + 4 * l * d * d + 4 * l * d + 2 * d * c
}

struct Walk {
    per_layer: Vec<u64>,
    layer_lengths: Vec<usize>,
    pooler: u64,
    head: u64,
    recovery: u64,
}

impl Walk {
    fn total(&self) -> u64 {
        self.per_layer.iter().sum::<u64>() + self.pooler + self.head + self.recovery
    }
}

fn walk(mc: &ModelConfig, fc: &FunnelConfig, seq: usize, head: HeadKind) -> Walk {
    let mut len = seq;
    let mut per_layer = Vec::with_capacity(mc.n_layers);
    let mut layer_lengths = Vec::with_capacity(mc.n_layers);
    for k in 0..=mc.n_layers {
        let factor = fc.factor_at(k);
        if factor > 1 {
            len = len.div_ceil(factor);
        }
        if k < mc.n_layers {
            layer_lengths.push(len);
            per_layer.push(block_flops(mc, len));
        }
    }
    let (d, c) = (mc.d_model as u64, mc.n_classes as u64);
    let (pooler, head_flops, recovery) = match head {
        HeadKind::Sentence => (pooler_flops(mc, len), 0, 0),
        HeadKind::Token => {
            let recovery = match (fc.is_active(), fc.recovery_op) {
                (true, Recovery::Combine(op)) => op.flops_per_element() * seq as u64 * d,
                _ => 0,
            };
            (0, 2 * seq as u64 * d * c, recovery)
        }
    };
    Walk {
        per_layer,
        layer_lengths,
        pooler,
        head: head_flops,
        recovery,
    }
}

/// Exact matmul flop count of one forward pass through `head`.
///
/// The token head always runs at full length: with recovery `none` or
/// `tile_only` the pooled states are tiled back and no combine is counted.
pub fn flops_estimate(
    mc: &ModelConfig,
    fc: &FunnelConfig,
    seq: usize,
    head: HeadKind,
) -> Result<FlopsReport> {
    mc.validate()?;
    fc.validate(mc.n_layers)?;
    if seq == 0 || seq > mc.max_seq {
        return Err(Error::Input(format!(
            "sequence length {seq} outside 1..={}",
            mc.max_seq
        )));
    }
    if head == HeadKind::Token && fc.is_active() && fc.recovery_op == Recovery::None {
        return Err(Error::Config("token head requires recovery".into()));
    }
    let w = walk(mc, fc, seq, head);
    let baseline_total = walk(mc, &FunnelConfig::no_funnel(mc.n_layers), seq, head).total();
    let total = w.total();
    Ok(FlopsReport {
        savings_ratio: 1.0 - total as f64 / baseline_total as f64,
        total,
        baseline_total,
        per_layer: w.per_layer,
        layer_lengths: w.layer_lengths,
        pooler_flops: w.pooler,
        head_flops: w.head,
        recovery_flops: w.recovery,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub n_warmup: usize,
    pub n_reps: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    /// Median of the all-ones baseline measured alongside.
    pub baseline_median_ms: f64,
    /// `1 - median_ms / baseline_median_ms`.
    pub savings_vs_baseline: f64,
}

/// Linear-interpolated percentile of sorted samples, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of no samples");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn time_forward(state: &ModelState, tokens: &TokenMatrix, mask: &SeqMask) -> Result<f64> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let logits = state.forward_sentence(&mut tape, tokens, mask)?;
    std::hint::black_box(tape.value(logits));
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Times the sentence-path forward of `state` against the same weights with
/// every pool factor 1. Runs are interleaved (alternating which goes first)
/// on one thread with fixed random inputs, so drift hits both equally.
pub fn wall_clock_profile(
    state: &ModelState,
    seq: usize,
    batch: usize,
    n_warmup: usize,
    n_reps: usize,
) -> Result<LatencyStats> {
    if n_reps < 5 {
        return Err(Error::Config(format!("n_reps must be at least 5, got {n_reps}")));
    }
    let mc = state.config();
    if seq == 0 || seq > mc.max_seq || batch == 0 {
        return Err(Error::Input(format!(
            "cannot profile batch {batch} at length {seq} (max_seq {})",
            mc.max_seq
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let ids = (0..batch * seq).map(|_| rng.random_range(0..mc.vocab_size)).collect();
    let tokens = TokenMatrix::new(batch, seq, ids)?;
    let mask = SeqMask::all_valid(batch, seq);
    let baseline = state
        .clone()
        .with_funnel(FunnelConfig::no_funnel(mc.n_layers))?;

    for _ in 0..n_warmup {
        time_forward(&baseline, &tokens, &mask)?;
        time_forward(state, &tokens, &mask)?;
    }
    let mut base_ms = Vec::with_capacity(n_reps);
    let mut funnel_ms = Vec::with_capacity(n_reps);
    for rep in 0..n_reps {
        if rep % 2 == 0 {
            base_ms.push(time_forward(&baseline, &tokens, &mask)?);
            funnel_ms.push(time_forward(state, &tokens, &mask)?);
        } else {
            funnel_ms.push(time_forward(state, &tokens, &mask)?);
            base_ms.push(time_forward(&baseline, &tokens, &mask)?);
        }
    }
    base_ms.sort_by(f64::total_cmp);
    funnel_ms.sort_by(f64::total_cmp);
    let median_ms = percentile(&funnel_ms, 0.5);
    let baseline_median_ms = percentile(&base_ms, 0.5);
    Ok(LatencyStats {
        n_warmup,
        n_reps,
        median_ms,
        p10_ms: percentile(&funnel_ms, 0.1),
        p90_ms: percentile(&funnel_ms, 0.9),
        baseline_median_ms,
        savings_vs_baseline: 1.0 - median_ms / baseline_median_ms,
    })
}
