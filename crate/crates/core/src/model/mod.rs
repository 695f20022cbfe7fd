//! Gemma2-style block stack (RMSNorm, rotary attention, GeGLU MLP) with an
//! optional two-token funnel, a per-token head and an attention-pooling
//! sentence head.

mod checkpoint;
mod config;

use std::rc::Rc;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, PoolerConfig};

use crate::error::{Error, Result};
use crate::funnel_ops::{pool_positions, FunnelConfig, Recovery, TapeCache};
use crate::numerics::{KeyMask, ParamId, ParamStore, SeqMask, Tape, Tensor3, Var};

const INIT_STD: f64 = 0.02;

/// Row-major `batch × seq` matrix of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMatrix {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenMatrix {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::Shape(format!(
                "{} token ids do not form a {batch}x{seq} matrix",
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Shape("ragged token rows".into()));
        }
        Self::new(rows.len(), seq, rows.concat())
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Which output head a forward pass ends in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One label per sequence through the attention pooler.
    Sentence,
    /// One label per position through recovery and the token head.
    Token,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Sentence => "sentence",
            HeadKind::Token => "token",
        }
    }
}

/// Parameter handles of one transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub mlp_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

#[derive(Clone, Debug)]
struct ParamIds {
    embed: ParamId,
    layers: Vec<BlockParams>,
    final_norm: ParamId,
    token_w: ParamId,
    token_b: ParamId,
    pool_blocks: Vec<BlockParams>,
    pool_norm: ParamId,
    pool_wk: ParamId,
    pool_wv: ParamId,
    pool_queries: ParamId,
    sentence_w: ParamId,
    sentence_b: ParamId,
    mlm_w: ParamId,
    mlm_b: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Names, shapes and initialisers of every parameter, in registration order.
fn layout(mc: &ModelConfig) -> Vec<(String, (usize, usize, usize), Init)> {
    let d = mc.d_model;
    let mut out = Vec::new();
    let block = |out: &mut Vec<_>, prefix: String| {
        out.push((format!("{prefix}.attn_norm"), (1, 1, d), Init::Ones));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{w}"), (1, d, d), Init::Normal));
        }
        out.push((format!("{prefix}.mlp_norm"), (1, 1, d), Init::Ones));
        out.push((format!("{prefix}.w_gate"), (1, d, mc.d_ff), Init::Normal));
        out.push((format!("{prefix}.w_up"), (1, d, mc.d_ff), Init::Normal));
        out.push((format!("{prefix}.w_down"), (1, mc.d_ff, d), Init::Normal));
    };
    out.push(("embed".to_string(), (1, mc.vocab_size, d), Init::Normal));
    for k in 0..mc.n_layers {
        block(&mut out, format!("layers.{k}"));
    }
    out.push(("final_norm".into(), (1, 1, d), Init::Ones));
    out.push(("token_head.w".into(), (1, d, mc.n_classes), Init::Normal));
    out.push(("token_head.b".into(), (1, 1, mc.n_classes), Init::Zeros));
    for j in 0..mc.pooler.n_pool_layers {
        block(&mut out, format!("pooler.blocks.{j}"));
    }
    let hp = mc.pooler.n_pool_heads;
    out.push(("pooler.norm".into(), (1, 1, d), Init::Ones));
    out.push(("pooler.wk".into(), (1, d, d), Init::Normal));
    out.push(("pooler.wv".into(), (1, d, d), Init::Normal));
    out.push(("pooler.queries".into(), (hp, 1, d / hp), Init::Normal));
    out.push(("sentence_head.w".into(), (1, d, mc.n_classes), Init::Normal));
    out.push(("sentence_head.b".into(), (1, 1, mc.n_classes), Init::Zeros));
    out.push(("mlm_head.w".into(), (1, d, mc.vocab_size), Init::Normal));
    out.push(("mlm_head.b".into(), (1, 1, mc.vocab_size), Init::Zeros));
    out
}

fn resolve_ids(mc: &ModelConfig, store: &ParamStore) -> Result<ParamIds> {
    let id = |name: String| {
        store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    };
    let block = |prefix: String| -> Result<BlockParams> {
        Ok(BlockParams {
            attn_norm: id(format!("{prefix}.attn_norm"))?,
            wq: id(format!("{prefix}.wq"))?,
            wk: id(format!("{prefix}.wk"))?,
            wv: id(format!("{prefix}.wv"))?,
            wo: id(format!("{prefix}.wo"))?,
            mlp_norm: id(format!("{prefix}.mlp_norm"))?,
            w_gate: id(format!("{prefix}.w_gate"))?,
            w_up: id(format!("{prefix}.w_up"))?,
            w_down: id(format!("{prefix}.w_down"))?,
        })
    };
    Ok(ParamIds {
        embed: id("embed".into())?,
        layers: (0..mc.n_layers)
            .map(|k| block(format!("layers.{k}")))
            .collect::<Result<_>>()?,
        final_norm: id("final_norm".into())?,
        token_w: id("token_head.w".into())?,
        token_b: id("token_head.b".into())?,
        pool_blocks: (0..mc.pooler.n_pool_layers)
            .map(|j| block(format!("pooler.blocks.{j}")))
            .collect::<Result<_>>()?,
        pool_norm: id("pooler.norm".into())?,
        pool_wk: id("pooler.wk".into())?,
        pool_wv: id("pooler.wv".into())?,
        pool_queries: id("pooler.queries".into())?,
        sentence_w: id("sentence_head.w".into())?,
        sentence_b: id("sentence_head.b".into())?,
        mlm_w: id("mlm_head.w".into())?,
        mlm_b: id("mlm_head.b".into())?,
    })
}

/// Result of running the block stack.
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// Residual stream after the last layer (pooled if a funnel is active).
    pub hidden: Var,
    /// Full-length layer outputs before the funnel point, when recorded.
    pub cache: Option<TapeCache>,
    /// Validity mask at the final length.
    pub mask: SeqMask,
    /// Original-coordinate positions of the final rows.
    pub positions: Rc<[usize]>,
    pub full_len: usize,
    pub pooled_len: usize,
}

/// Parameters plus the architecture and funnel placement they run under.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: ModelConfig,
    funnel: FunnelConfig,
    params: ParamStore,
    ids: ParamIds,
}

impl ModelState {
    /// Seeded initialisation: `N(0, 0.02²)` weights, unit gains, zero biases.
    pub fn init(config: ModelConfig, funnel: FunnelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        funnel.validate(config.n_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, (b, s, d), init) in layout(&config) {
            let value = match init {
                Init::Normal => Tensor3::randn(b, s, d, INIT_STD, &mut rng),
                Init::Ones => Tensor3::filled(b, s, d, 1.0),
                Init::Zeros => Tensor3::zeros(b, s, d),
            };
            params.register(name, value)?;
        }
        let ids = resolve_ids(&config, &params)?;
        Ok(Self {
            config,
            funnel,
            params,
            ids,
        })
    }

    /// Rebuilds a state from loaded parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, funnel: FunnelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        funnel.validate(config.n_layers)?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (_, got_name, got)) in expected.iter().zip(params.iter()) {
            if name != got_name || *shape != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    got.shape()
                )));
            }
        }
        let ids = resolve_ids(&config, &params)?;
        Ok(Self {
            config,
            funnel,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn funnel(&self) -> &FunnelConfig {
        &self.funnel
    }

    pub fn set_funnel(&mut self, funnel: FunnelConfig) -> Result<()> {
        funnel.validate(self.config.n_layers)?;
        self.funnel = funnel;
        Ok(())
    }

    pub fn with_funnel(mut self, funnel: FunnelConfig) -> Result<Self> {
        self.set_funnel(funnel)?;
        Ok(self)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layer_params(&self, k: usize) -> &BlockParams {
        &self.ids.layers[k]
    }

    fn check_tokens(&self, tokens: &TokenMatrix, mask: &SeqMask) -> Result<()> {
        if tokens.seq > self.config.max_seq {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.seq, self.config.max_seq
            )));
        }
        if mask.batch() != tokens.batch || mask.seq() != tokens.seq {
            return Err(Error::Shape("mask does not match token matrix".into()));
        }
        if let Some(bad) = tokens.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token embeddings scaled by `sqrt(d_model)`.
    pub fn embed(&self, tape: &mut Tape, tokens: &TokenMatrix) -> Result<Var> {
        let table = tape.param(&self.params, self.ids.embed);
        let x = tape.gather(table, &tokens.ids, tokens.batch, tokens.seq)?;
        Ok(tape.scale(x, (self.config.d_model as f64).sqrt()))
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &BlockParams,
        x: Var,
        mask: &SeqMask,
        positions: &Rc<[usize]>,
    ) -> Result<Var> {
        let mc = &self.config;
        let heads = mc.n_heads;
        let project = |tape: &mut Tape, w: ParamId| -> Result<Var> {
            let w = tape.param(&self.params, w);
            let y = tape.matmul(x, w, false)?;
            tape.split_heads(y, heads)
        };
        let q = project(tape, p.wq)?;
        let q = tape.rope(q, positions.clone(), mc.rope_base)?;
        let k = project(tape, p.wk)?;
        let k = tape.rope(k, positions.clone(), mc.rope_base)?;
        let v = project(tape, p.wv)?;
        let scores = tape.matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (mc.head_dim as f64).sqrt());
        let key_mask = KeyMask::new(mask.clone(), heads, mc.causal);
        let weights = tape.softmax(scores, Some(&key_mask))?;
        let ctx = tape.matmul(weights, v, false)?;
        let ctx = tape.merge_heads(ctx, heads)?;
        let wo = tape.param(&self.params, p.wo);
        tape.matmul(ctx, wo, false)
    }

    fn run_block(
        &self,
        tape: &mut Tape,
        p: &BlockParams,
        x: Var,
        mask: &SeqMask,
        positions: &Rc<[usize]>,
    ) -> Result<Var> {
        let eps = self.config.norm_eps;
        let g = tape.param(&self.params, p.attn_norm);
        let xn = tape.rmsnorm(x, g, eps)?;
        let attn = self.attention(tape, p, xn, mask, positions)?;
        let h = tape.add(x, attn)?;

        let g = tape.param(&self.params, p.mlp_norm);
        let hn = tape.rmsnorm(h, g, eps)?;
        let w_gate = tape.param(&self.params, p.w_gate);
        let gate = tape.matmul(hn, w_gate, false)?;
        let gate = tape.gelu(gate);
        let w_up = tape.param(&self.params, p.w_up);
        let up = tape.matmul(hn, w_up, false)?;
        let inner = tape.mul(gate, up)?;
        let w_down = tape.param(&self.params, p.w_down);
        let mlp = tape.matmul(inner, w_down, false)?;
        tape.add(h, mlp)
    }

    /// Transformer block `k` of the stack.
    pub fn block(
        &self,
        tape: &mut Tape,
        k: usize,
        x: Var,
        mask: &SeqMask,
        positions: &Rc<[usize]>,
    ) -> Result<Var> {
        self.run_block(tape, &self.ids.layers[k], x, mask, positions)
    }

    /// Runs the stack, pooling at the configured boundary. The cache of
    /// full-length layer outputs is recorded when the configured recovery
    /// combines with it.
    pub fn forward(&self, tape: &mut Tape, tokens: &TokenMatrix, mask: &SeqMask) -> Result<StackOutput> {
        let record = self.funnel.recovery_op.op().is_some();
        self.forward_with_cache(tape, tokens, mask, record)
    }

    /// [`ModelState::forward`] with explicit control over cache recording.
    pub fn forward_with_cache(
        &self,
        tape: &mut Tape,
        tokens: &TokenMatrix,
        mask: &SeqMask,
        record_cache: bool,
    ) -> Result<StackOutput> {
        self.check_tokens(tokens, mask)?;
        let funnel_at = self.funnel.funnel_layer();
        let mut cache = (record_cache && funnel_at.is_some()).then(TapeCache::new);
        let mut x = self.embed(tape, tokens)?;
        // Pooling before layer 0 leaves the embeddings as the only
        // full-length representation to recover from.
        if let (Some(c), Some(0)) = (cache.as_mut(), funnel_at) {
            c.push(tape, x)?;
        }
        let mut mask = mask.clone();
        let mut positions: Rc<[usize]> = (0..tokens.seq).collect();
        let n = self.config.n_layers;

        for k in 0..=n {
            let factor = self.funnel.factor_at(k);
            if factor > 1 {
                let (pooled, pooled_mask) = tape.max_pool_seq(x, &mask, factor)?;
                x = pooled;
                mask = pooled_mask;
                positions = pool_positions(&positions, factor).into();
            }
            if k == n {
                break;
            }
            x = self.block(tape, k, x, &mask, &positions)?;
            if let (Some(c), Some(f)) = (cache.as_mut(), funnel_at) {
                if k < f {
                    c.push(tape, x)?;
                }
            }
        }
        Ok(StackOutput {
            hidden: x,
            cache,
            pooled_len: mask.seq(),
            mask,
            positions,
            full_len: tokens.seq,
        })
    }

    fn full_length(&self, tape: &mut Tape, out: &StackOutput, recovery: Recovery) -> Result<Var> {
        let Some(f) = self.funnel.funnel_layer() else {
            return Ok(out.hidden);
        };
        let factor = self.funnel.factor_at(f);
        if recovery == Recovery::None {
            return Err(Error::Config("token task requires recovery".into()));
        }
        let tiled = tape.tile_upsample(out.hidden, factor, out.full_len)?;
        if recovery == Recovery::TileOnly {
            return Ok(tiled);
        }
        let cache = out.cache.as_ref().ok_or_else(|| {
            Error::Usage("stack output was produced without a layer cache".into())
        })?;
        cache.recover(tape, tiled, recovery)
    }

    fn linear_head(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let g = tape.param(&self.params, self.ids.final_norm);
        let xn = tape.rmsnorm(x, g, self.config.norm_eps)?;
        let w = tape.param(&self.params, w);
        let y = tape.matmul(xn, w, false)?;
        let b = tape.param(&self.params, b);
        tape.add(y, b)
    }

    /// Per-token logits from a stack output: tile, recover, final norm, head.
    pub fn token_logits(&self, tape: &mut Tape, out: &StackOutput, recovery: Recovery) -> Result<Var> {
        let full = self.full_length(tape, out, recovery)?;
        self.linear_head(tape, full, self.ids.token_w, self.ids.token_b)
    }

    /// Per-token logits at full length (`batch × seq × n_classes`).
    pub fn forward_tokens(&self, tape: &mut Tape, tokens: &TokenMatrix, mask: &SeqMask) -> Result<Var> {
        if self.funnel.is_active() && self.funnel.recovery_op == Recovery::None {
            return Err(Error::Config("token task requires recovery".into()));
        }
        let out = self.forward(tape, tokens, mask)?;
        self.token_logits(tape, &out, self.funnel.recovery_op)
    }

    /// Vocabulary logits at full length for masked-token pretraining.
    /// `recovery` replaces the configured one (pretraining may run a funnel
    /// even when the downstream task never recovers).
    pub fn forward_mlm(
        &self,
        tape: &mut Tape,
        tokens: &TokenMatrix,
        mask: &SeqMask,
        recovery: Recovery,
    ) -> Result<Var> {
        let out = self.forward_with_cache(tape, tokens, mask, recovery.op().is_some())?;
        let full = self.full_length(tape, &out, recovery)?;
        self.linear_head(tape, full, self.ids.mlm_w, self.ids.mlm_b)
    }

    /// Pools a sequence of hidden states into one vector per batch entry:
    /// pooling blocks, norm, then learned queries attending over positions.
    pub fn attention_pool(
        &self,
        tape: &mut Tape,
        hidden: Var,
        mask: &SeqMask,
        positions: &Rc<[usize]>,
    ) -> Result<Var> {
        let mut h = hidden;
        for p in &self.ids.pool_blocks {
            h = self.run_block(tape, p, h, mask, positions)?;
        }
        let g = tape.param(&self.params, self.ids.pool_norm);
        let hn = tape.rmsnorm(h, g, self.config.norm_eps)?;
        self.query_attention(tape, hn, mask)
    }

    /// Learned-query multi-head attention over the positions of `x`
    /// (`batch × seq × d` → `batch × 1 × d`).
    pub fn query_attention(&self, tape: &mut Tape, x: Var, mask: &SeqMask) -> Result<Var> {
        let heads = self.config.pooler.n_pool_heads;
        let batch = tape.value(x).batch();
        let wk = tape.param(&self.params, self.ids.pool_wk);
        let k = tape.matmul(x, wk, false)?;
        let k = tape.split_heads(k, heads)?;
        let wv = tape.param(&self.params, self.ids.pool_wv);
        let v = tape.matmul(x, wv, false)?;
        let v = tape.split_heads(v, heads)?;
        let queries = tape.param(&self.params, self.ids.pool_queries);
        let q = tape.repeat_batch(queries, batch);
        let scores = tape.matmul(q, k, true)?;
        let hd = self.config.d_model / heads;
        let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let key_mask = KeyMask::new(mask.clone(), heads, false);
        let weights = tape.softmax(scores, Some(&key_mask))?;
        let ctx = tape.matmul(weights, v, false)?;
        tape.merge_heads(ctx, heads)
    }

    /// Sentence logits (`batch × 1 × n_classes`) from a stack output.
    pub fn sentence_logits(&self, tape: &mut Tape, out: &StackOutput) -> Result<Var> {
        let pooled = self.attention_pool(tape, out.hidden, &out.mask, &out.positions)?;
        let w = tape.param(&self.params, self.ids.sentence_w);
        let y = tape.matmul(pooled, w, false)?;
        let b = tape.param(&self.params, self.ids.sentence_b);
        tape.add(y, b)
    }

    /// Per-sequence logits; the funnel output is never recovered here.
    pub fn forward_sentence(&self, tape: &mut Tape, tokens: &TokenMatrix, mask: &SeqMask) -> Result<Var> {
        let out = self.forward_with_cache(tape, tokens, mask, false)?;
        self.sentence_logits(tape, &out)
    }
}
