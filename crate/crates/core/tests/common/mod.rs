//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::rc::Rc;

use funnel::funnel_ops::{FunnelConfig, Recovery, RecoveryOp};
use funnel::model::{HeadKind, ModelConfig, ModelState, PoolerConfig, StackOutput, TokenMatrix};
use funnel::numerics::{count_flops, SeqMask, Tape, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_case(rng: &mut ChaCha8Rng) -> (ModelConfig, FunnelConfig, usize) {
    let n_heads = rng.random_range(1..=3);
    let head_dim = 2 * rng.random_range(1..=3);
    let d_model = n_heads * head_dim;
    let n_pool_heads = if d_model % 2 == 0 && rng.random_bool(0.5) { 2 } else { 1 };
    let mc = ModelConfig {
        n_layers: rng.random_range(1..=4),
        d_model,
        n_heads,
        head_dim,
        d_ff: rng.random_range(1..=12),
        vocab_size: rng.random_range(2..=9),
        max_seq: 12,
        n_classes: rng.random_range(1..=4),
        pooler: PoolerConfig {
            n_pool_heads,
            n_pool_layers: rng.random_range(0..=2),
        },
        ..ModelConfig::default()
    };
    let seq = rng.random_range(1..=12);
    let fc = if rng.random_bool(0.2) {
        FunnelConfig::no_funnel(mc.n_layers)
    } else {
        let layer = rng.random_range(0..=mc.n_layers);
        let recovery = if rng.random_bool(0.25) {
            Recovery::TileOnly
        } else {
            Recovery::Combine(RecoveryOp::ALL[rng.random_range(0..6)])
        };
        FunnelConfig::at_layer(mc.n_layers, layer, recovery).unwrap()
    };
    (mc, fc, seq)
}

pub fn executed(state: &ModelState, seq: usize, batch: usize, head: HeadKind, rng: &mut ChaCha8Rng) -> u64 {
    let vocab = state.config().vocab_size;
    let ids = (0..batch * seq).map(|_| rng.random_range(0..vocab)).collect();
    let tokens = TokenMatrix::new(batch, seq, ids).unwrap();
    let mask = SeqMask::all_valid(batch, seq);
    let (res, flops) = count_flops(|| {
        let mut tape = Tape::new();
        match head {
            HeadKind::Sentence => state.forward_sentence(&mut tape, &tokens, &mask).map(|_| ()),
            HeadKind::Token => state.forward_tokens(&mut tape, &tokens, &mask).map(|_| ()),
        }
    });
    res.unwrap();
    flops
}

/// Logits from a loop over the blocks that never consults the funnel config.
pub fn unfunneled_logits(state: &ModelState, tokens: &TokenMatrix, mask: &SeqMask, head: HeadKind) -> Tensor3 {
    let mut tape = Tape::new();
    let mut x = state.embed(&mut tape, tokens).unwrap();
    let positions: Rc<[usize]> = (0..tokens.seq).collect();
    for k in 0..state.config().n_layers {
        x = state.block(&mut tape, k, x, mask, &positions).unwrap();
    }
    let out = StackOutput {
        hidden: x,
        cache: None,
        mask: mask.clone(),
        positions,
        full_len: tokens.seq,
        pooled_len: tokens.seq,
    };
    let logits = match head {
        HeadKind::Sentence => state.sentence_logits(&mut tape, &out).unwrap(),
        HeadKind::Token => state.token_logits(&mut tape, &out, Recovery::None).unwrap(),
    };
    tape.value(logits).clone()
}

/// Logits of the regular forward entry points.
pub fn model_logits(state: &ModelState, tokens: &TokenMatrix, mask: &SeqMask, head: HeadKind) -> Tensor3 {
    let mut tape = Tape::new();
    let logits = match head {
        HeadKind::Sentence => state.forward_sentence(&mut tape, tokens, mask).unwrap(),
        HeadKind::Token => state.forward_tokens(&mut tape, tokens, mask).unwrap(),
    };
    tape.value(logits).clone()
}

/// Adds N(0, 0.3²) noise to every parameter so no gradient path is degenerate.
pub fn perturb(state: &mut ModelState, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = state.params().ids().collect();
    for id in ids {
        let t = state.params_mut().get_mut(id);
        let (b, s, d) = t.shape();
        let noise = Tensor3::randn(b, s, d, 0.3, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}
