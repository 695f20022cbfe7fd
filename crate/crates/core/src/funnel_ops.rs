//! Sequence funneling: window max-pooling between layers, tile upsampling and
//! the six ways of recombining the tiled activations with cached full-length
//! layer outputs.
//!
//! Layer boundaries are numbered `0..=n_layers`: boundary `k < n_layers` is the
//! input of layer `k`, boundary `n_layers` is the output of the stack. A
//! funnel "at layer `k`" pools the hidden states at boundary `k`, so layers
//! `0..k` run at full length and layers `k..n_layers` at the pooled length.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use crate::numerics::SeqMask;
use crate::error::{Error, Result};
use crate::numerics::ops::record_flops;
use crate::numerics::{Tape, Tensor3, Var};

/// Combination of the tiled funnel output with cached full-length activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RecoveryOp {
    /// tiled + output of layer 0
    SumFirst,
    /// tiled + output of the last full-length layer
    SumLast,
    /// tiled + elementwise max over all full-length layer outputs
    SumPrevMax,
    /// tiled + mean of all full-length layer outputs
    SumPrevAvg,
    /// (tiled + last full-length output) / 2
    AvgLast,
    /// max(tiled, last full-length output)
    MaxLast,
}

impl RecoveryOp {
    pub const ALL: [RecoveryOp; 6] = [
        RecoveryOp::SumFirst,
        RecoveryOp::SumLast,
        RecoveryOp::SumPrevMax,
        RecoveryOp::SumPrevAvg,
        RecoveryOp::AvgLast,
        RecoveryOp::MaxLast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecoveryOp::SumFirst => "sum_first",
            RecoveryOp::SumLast => "sum_last",
            RecoveryOp::SumPrevMax => "sum_prev_max",
            RecoveryOp::SumPrevAvg => "sum_prev_avg",
            RecoveryOp::AvgLast => "avg_last",
            RecoveryOp::MaxLast => "max_last",
        }
    }

    /// Elementwise flops per recovered value (the tiling itself is a copy).
    pub fn flops_per_element(self) -> u64 {
        match self {
            RecoveryOp::AvgLast => 2,
            _ => 1,
        }
    }
}

/// What happens to pooled activations when full length is needed again.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Recovery {
    /// No recovery: only the sentence path is usable while funneling.
    None,
    /// Tile the pooled activations back to full length and stop there.
    TileOnly,
    Combine(RecoveryOp),
}

impl Recovery {
    pub fn name(self) -> &'static str {
        match self {
            Recovery::None => "none",
            Recovery::TileOnly => "tile_only",
            Recovery::Combine(op) => op.name(),
        }
    }

    pub fn op(self) -> Option<RecoveryOp> {
        match self {
            Recovery::Combine(op) => Some(op),
            _ => None,
        }
    }
}

impl fmt::Display for Recovery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recovery {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Recovery::None),
            "tile_only" => Ok(Recovery::TileOnly),
            other => RecoveryOp::ALL
                .into_iter()
                .find(|op| op.name() == other)
                .map(Recovery::Combine)
                .ok_or_else(|| Error::Usage(format!("unknown recovery op {other:?}"))),
        }
    }
}

impl TryFrom<String> for Recovery {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Recovery> for String {
    fn from(r: Recovery) -> String {
        r.name().to_string()
    }
}

/// Pool factor at every layer boundary plus the recovery applied after the
/// final layer.
///
/// `pool_factors` has `n_layers + 1` entries (one per boundary, see the module
/// docs), each 1 or 2, and at most one of them is 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelConfig {
    pub pool_factors: Vec<usize>,
    pub recovery_op: Recovery,
}

impl FunnelConfig {
    pub fn new(pool_factors: Vec<usize>, recovery_op: Recovery) -> Result<Self> {
        let fc = Self {
            pool_factors,
            recovery_op,
        };
        fc.check_factors()?;
        Ok(fc)
    }

    /// All factors 1.
    pub fn no_funnel(n_layers: usize) -> Self {
        Self {
            pool_factors: vec![1; n_layers + 1],
            recovery_op: Recovery::None,
        }
    }

    /// A two-token funnel at boundary `layer` (`0..=n_layers`).
    pub fn at_layer(n_layers: usize, layer: usize, recovery_op: Recovery) -> Result<Self> {
        if layer > n_layers {
            return Err(Error::Config(format!(
                "funnel layer {layer} outside 0..={n_layers}"
            )));
        }
        let mut pool_factors = vec![1; n_layers + 1];
        pool_factors[layer] = 2;
        Self::new(pool_factors, recovery_op)
    }

    pub fn with_recovery(mut self, recovery_op: Recovery) -> Self {
        self.recovery_op = recovery_op;
        self
    }

    fn check_factors(&self) -> Result<()> {
        if let Some(f) = self.pool_factors.iter().find(|&&f| f != 1 && f != 2) {
            return Err(Error::Config(format!(
                "pool factor {f} not supported (only 1 or 2)"
            )));
        }
        if self.pool_factors.iter().filter(|&&f| f > 1).count() > 1 {
            return Err(Error::Config(
                "at most one funnel point per stack is supported".into(),
            ));
        }
        Ok(())
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.pool_factors.len() != n_layers + 1 {
            return Err(Error::Config(format!(
                "funnel config has {} boundary factors, expected {} for {n_layers} layers",
                self.pool_factors.len(),
                n_layers + 1
            )));
        }
        self.check_factors()
    }

    /// Boundary index of the funnel, if any.
    pub fn funnel_layer(&self) -> Option<usize> {
        self.pool_factors.iter().position(|&f| f > 1)
    }

    pub fn is_active(&self) -> bool {
        self.funnel_layer().is_some()
    }

    pub fn factor_at(&self, boundary: usize) -> usize {
        self.pool_factors.get(boundary).copied().unwrap_or(1)
    }
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 1 || factor == 2 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "pool factor {factor} not supported (only 1 or 2)"
        )))
    }
}

/// Marks a pooled element whose window holds no valid position.
const NO_SOURCE: usize = usize::MAX;

/// Window max along the sequence axis.
///
/// Output length is `ceil(seq / factor)`. Padding positions are ignored; a
/// window without any valid position yields zeros and an invalid output
/// position. `factor == 1` returns the input unchanged.
pub fn max_pool_seq(x: &Tensor3, mask: &SeqMask, factor: usize) -> Result<(Tensor3, SeqMask)> {
    let (out, m, _) = max_pool_with_argmax(x, mask, factor)?;
    Ok((out, m))
}

/// [`max_pool_seq`] plus, for every output element, the flat input index it
/// was taken from (first index wins ties).
pub(crate) fn max_pool_with_argmax(
    x: &Tensor3,
    mask: &SeqMask,
    factor: usize,
) -> Result<(Tensor3, SeqMask, Vec<usize>)> {
    check_factor(factor)?;
    let (batch, seq, dim) = x.shape();
    if mask.batch() != batch || mask.seq() != seq {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match activations {batch}x{seq}",
            mask.batch(),
            mask.seq()
        )));
    }
    if factor == 1 {
        return Ok((x.clone(), mask.clone(), (0..x.len()).collect()));
    }
    let pooled = seq.div_ceil(factor);
    let mut data = vec![0.0; batch * pooled * dim];
    let mut argmax = vec![NO_SOURCE; batch * pooled * dim];
    let mut valid = vec![false; batch * pooled];
    for b in 0..batch {
        for w in 0..pooled {
            let out_row = (b * pooled + w) * dim;
            for s in w * factor..((w + 1) * factor).min(seq) {
                if !mask.is_valid(b, s) {
                    continue;
                }
                let in_row = (b * seq + s) * dim;
                let src = x.row(b, s);
                if !valid[b * pooled + w] {
                    valid[b * pooled + w] = true;
                    data[out_row..out_row + dim].copy_from_slice(src);
                    for (j, a) in argmax[out_row..out_row + dim].iter_mut().enumerate() {
                        *a = in_row + j;
                    }
                    continue;
                }
                for j in 0..dim {
                    if src[j] > data[out_row + j] {
                        data[out_row + j] = src[j];
                        argmax[out_row + j] = in_row + j;
                    }
                }
            }
        }
    }
    Ok((
        Tensor3::from_raw(batch, pooled, dim, data),
        SeqMask::from_raw(batch, pooled, valid),
        argmax,
    ))
}

pub(crate) fn max_pool_backward(
    argmax: &[usize],
    input_shape: (usize, usize, usize),
    grad: &Tensor3,
) -> Tensor3 {
    let (b, s, d) = input_shape;
    let mut gx = vec![0.0; b * s * d];
    for (&src, &g) in argmax.iter().zip(grad.data()) {
        if src != NO_SOURCE {
            gx[src] += g;
        }
    }
    Tensor3::from_raw(b, s, d, gx)
}

/// Positions of pooled rows: each window keeps the position of its first row.
pub fn pool_positions(positions: &[usize], factor: usize) -> Vec<usize> {
    positions.iter().step_by(factor.max(1)).copied().collect()
}

/// Repeats each position `factor` times and truncates to `target_len`:
/// `(1, 3, 4)` becomes `(1, 1, 3, 3, 4, 4)`.
pub fn tile_upsample(x: &Tensor3, factor: usize, target_len: usize) -> Result<Tensor3> {
    let (batch, seq, dim) = x.shape();
    if factor == 0 || target_len == 0 || target_len.div_ceil(factor) != seq {
        return Err(Error::Shape(format!(
            "cannot tile {seq} positions by {factor} to length {target_len}"
        )));
    }
    let mut data = Vec::with_capacity(batch * target_len * dim);
    for b in 0..batch {
        for t in 0..target_len {
            data.extend_from_slice(x.row(b, t / factor));
        }
    }
    Ok(Tensor3::from_raw(batch, target_len, dim, data))
}

pub(crate) fn tile_backward(grad: &Tensor3, factor: usize, pooled_len: usize) -> Tensor3 {
    let (batch, target_len, dim) = grad.shape();
    let mut gx = vec![0.0; batch * pooled_len * dim];
    for b in 0..batch {
        for t in 0..target_len {
            let dst = (b * pooled_len + t / factor) * dim;
            for (acc, v) in gx[dst..dst + dim].iter_mut().zip(grad.row(b, t)) {
                *acc += v;
            }
        }
    }
    Tensor3::from_raw(batch, pooled_len, dim, gx)
}

/// Full-length outputs of the layers before the funnel point.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub first_full: Tensor3,
    pub last_full: Tensor3,
    pub running_max: Tensor3,
    pub running_avg: Tensor3,
    pub pre_funnel_count: usize,
}

impl LayerCache {
    /// Builds the cache from the ordered outputs of layers `0..f` (the
    /// embeddings alone when `f` is 0).
    pub fn from_layers(outputs: &[Tensor3]) -> Result<Self> {
        let first = outputs
            .first()
            .ok_or_else(|| Error::Config("recovery needs at least one full-length layer".into()))?;
        if outputs.iter().any(|t| !t.same_shape(first)) {
            return Err(Error::Shape("cached layer outputs differ in shape".into()));
        }
        let (b, s, d) = first.shape();
        let mut max = first.data().to_vec();
        let mut sum = first.data().to_vec();
        for t in &outputs[1..] {
            for ((m, a), v) in max.iter_mut().zip(sum.iter_mut()).zip(t.data()) {
                if *v > *m {
                    *m = *v;
                }
                *a += v;
            }
        }
        let n = outputs.len() as f64;
        let avg = sum.into_iter().map(|v| v * (1.0 / n)).collect();
        Ok(Self {
            first_full: first.clone(),
            last_full: outputs[outputs.len() - 1].clone(),
            running_max: Tensor3::from_raw(b, s, d, max),
            running_avg: Tensor3::from_raw(b, s, d, avg),
            pre_funnel_count: outputs.len(),
        })
    }
}

/// Restores full-length activations from the tiled funnel output.
///
/// `Recovery::None` is a usage error: callers must not ask for recovery when
/// none is configured. `Recovery::TileOnly` returns `tiled` unchanged.
pub fn recover(tiled: &Tensor3, cache: &LayerCache, recovery: Recovery) -> Result<Tensor3> {
    for t in [
        &cache.first_full,
        &cache.last_full,
        &cache.running_max,
        &cache.running_avg,
    ] {
        if !t.same_shape(tiled) {
            return Err(Error::Shape(format!(
                "tiled activations {:?} do not match cached {:?}",
                tiled.shape(),
                t.shape()
            )));
        }
    }
    let op = match recovery {
        Recovery::None => {
            return Err(Error::Usage(
                "recover called with no recovery op configured".into(),
            ))
        }
        Recovery::TileOnly => return Ok(tiled.clone()),
        Recovery::Combine(op) => op,
    };
    let combine = |other: &Tensor3, f: fn(f64, f64) -> f64| {
        let (b, s, d) = tiled.shape();
        let data = tiled
            .data()
            .iter()
            .zip(other.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor3::from_raw(b, s, d, data)
    };
    Ok(match op {
        RecoveryOp::SumFirst => combine(&cache.first_full, |x, y| x + y),
        RecoveryOp::SumLast => combine(&cache.last_full, |x, y| x + y),
        RecoveryOp::SumPrevMax => combine(&cache.running_max, |x, y| x + y),
        RecoveryOp::SumPrevAvg => combine(&cache.running_avg, |x, y| x + y),
        RecoveryOp::AvgLast => combine(&cache.last_full, |x, y| (x + y) * 0.5),
        RecoveryOp::MaxLast => combine(&cache.last_full, |x, y| if y > x { y } else { x }),
    })
}

/// [`LayerCache`] built on a tape so gradients reach the cached layers.
#[derive(Clone, Debug)]
pub struct TapeCache {
    first_full: Option<Var>,
    last_full: Option<Var>,
    running_max: Option<Var>,
    running_sum: Option<Var>,
    count: usize,
}

impl Default for TapeCache {
    fn default() -> Self {
        Self::new()
    }
}

impl TapeCache {
    pub fn new() -> Self {
        Self {
            first_full: None,
            last_full: None,
            running_max: None,
            running_sum: None,
            count: 0,
        }
    }

    pub fn pre_funnel_count(&self) -> usize {
        self.count
    }

    /// Records the output of the next full-length layer.
    pub fn push(&mut self, tape: &mut Tape, output: Var) -> Result<()> {
        match (self.running_max, self.running_sum) {
            (Some(max), Some(sum)) => {
                self.running_max = Some(tape.maximum(max, output)?);
                self.running_sum = Some(tape.add(sum, output)?);
            }
            _ => {
                self.first_full = Some(output);
                self.running_max = Some(output);
                self.running_sum = Some(output);
            }
        }
        self.last_full = Some(output);
        self.count += 1;
        Ok(())
    }

    /// Current cache contents as plain tensors.
    pub fn resolve(&self, tape: &Tape) -> Result<LayerCache> {
        let (Some(first), Some(last), Some(max), Some(sum)) = (
            self.first_full,
            self.last_full,
            self.running_max,
            self.running_sum,
        ) else {
            return Err(Error::Config(
                "recovery needs at least one full-length layer".into(),
            ));
        };
        let n = self.count as f64;
        let s = tape.value(sum);
        let (b, q, d) = s.shape();
        Ok(LayerCache {
            first_full: tape.value(first).clone(),
            last_full: tape.value(last).clone(),
            running_max: tape.value(max).clone(),
            running_avg: Tensor3::from_raw(b, q, d, s.data().iter().map(|v| v * (1.0 / n)).collect()),
            pre_funnel_count: self.count,
        })
    }

    /// Replaces the cached layer-0 output (used for ablations).
    pub fn set_first_full(&mut self, v: Var) {
        self.first_full = Some(v);
    }

    /// [`recover`] recorded on the tape.
    pub fn recover(&self, tape: &mut Tape, tiled: Var, recovery: Recovery) -> Result<Var> {
        let op = match recovery {
            Recovery::None => {
                return Err(Error::Usage(
                    "recover called with no recovery op configured".into(),
                ))
            }
            Recovery::TileOnly => return Ok(tiled),
            Recovery::Combine(op) => op,
        };
        let missing = || Error::Config("recovery needs at least one full-length layer".into());
        let (b, s, d) = tape.value(tiled).shape();
        record_flops(op.flops_per_element() * (b * s * d) as u64);
        match op {
            RecoveryOp::SumFirst => tape.add(tiled, self.first_full.ok_or_else(missing)?),
            RecoveryOp::SumLast => tape.add(tiled, self.last_full.ok_or_else(missing)?),
            RecoveryOp::SumPrevMax => tape.add(tiled, self.running_max.ok_or_else(missing)?),
            RecoveryOp::SumPrevAvg => {
                let avg = tape.scale(self.running_sum.ok_or_else(missing)?, 1.0 / self.count as f64);
                tape.add(tiled, avg)
            }
            RecoveryOp::AvgLast => {
                let sum = tape.add(tiled, self.last_full.ok_or_else(missing)?)?;
                Ok(tape.scale(sum, 0.5))
            }
            RecoveryOp::MaxLast => tape.maximum(tiled, self.last_full.ok_or_else(missing)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq1(values: &[f64]) -> Tensor3 {
        Tensor3::from_vec(1, values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn max_pool_window_max() {
        let x = seq1(&[1.0, 3.0, 4.0, 2.0]);
        let (y, m) = max_pool_seq(&x, &SeqMask::all_valid(1, 4), 2).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
        assert_eq!(m, SeqMask::all_valid(1, 2));
    }

    #[test]
    fn max_pool_odd_length_keeps_tail() {
        let x = seq1(&[5.0, 1.0, 2.0]);
        let (y, m) = max_pool_seq(&x, &SeqMask::all_valid(1, 3), 2).unwrap();
        assert_eq!(y.data(), &[5.0, 2.0]);
        assert_eq!(m.seq(), 2);
    }

    #[test]
    fn max_pool_factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor3::randn(2, 5, 3, 1.0, &mut rng);
        let mask = SeqMask::from_lengths(5, &[5, 3]).unwrap();
        let (y, m) = max_pool_seq(&x, &mask, 1).unwrap();
        assert_eq!(y, x);
        assert_eq!(m, mask);
    }

    #[test]
    fn max_pool_rejects_large_factor() {
        let x = seq1(&[1.0, 2.0, 3.0, 4.0]);
        let err = max_pool_seq(&x, &SeqMask::all_valid(1, 4), 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn max_pool_skips_padding() {
        // position 1 is padding with a large value; window 2 is all padding
        let x = seq1(&[1.0, 99.0, 7.0, 8.0, 50.0]);
        let mask = SeqMask::new(1, 5, vec![true, false, true, true, false]).unwrap();
        let (y, m) = max_pool_seq(&x, &mask, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 8.0, 0.0]);
        assert_eq!(m.flags(), &[true, true, false]);
    }

    #[test]
    fn positions_keep_window_start() {
        assert_eq!(pool_positions(&[0, 1, 2, 3], 2), vec![0, 2]);
        assert_eq!(pool_positions(&[0, 1, 2, 3, 4], 2), vec![0, 2, 4]);
        assert_eq!(pool_positions(&[0, 1, 2], 1), vec![0, 1, 2]);
    }

    #[test]
    fn tile_examples() {
        let y = tile_upsample(&seq1(&[1.0, 3.0, 4.0]), 2, 6).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 3.0, 3.0, 4.0, 4.0]);
        let y = tile_upsample(&seq1(&[7.0]), 2, 2).unwrap();
        assert_eq!(y.data(), &[7.0, 7.0]);
        let y = tile_upsample(&seq1(&[5.0, 2.0]), 2, 3).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0, 2.0]);
    }

    #[test]
    fn tile_rejects_inconsistent_target() {
        assert!(matches!(
            tile_upsample(&seq1(&[1.0, 2.0]), 2, 5),
            Err(Error::Shape(_))
        ));
    }

    fn cache_of(layers: &[Tensor3]) -> LayerCache {
        LayerCache::from_layers(layers).unwrap()
    }

    #[test]
    fn recover_simple_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor3::randn(1, 4, 3, 1.0, &mut rng);
        let cache = cache_of(std::slice::from_ref(&t));
        let avg = recover(&t, &cache, Recovery::Combine(RecoveryOp::AvgLast)).unwrap();
        assert_eq!(avg, t);

        let zero = Tensor3::zeros(1, 4, 3);
        let cache = cache_of(&[zero, t.clone()]);
        let sum_first = recover(&t, &cache, Recovery::Combine(RecoveryOp::SumFirst)).unwrap();
        assert_eq!(sum_first, t);

        let tiled = Tensor3::from_vec(1, 1, 2, vec![2.0, -1.0]).unwrap();
        let last = Tensor3::from_vec(1, 1, 2, vec![1.0, 3.0]).unwrap();
        let cache = cache_of(&[last]);
        let m = recover(&tiled, &cache, Recovery::Combine(RecoveryOp::MaxLast)).unwrap();
        assert_eq!(m.data(), &[2.0, 3.0]);
    }

    #[test]
    fn recover_prev_avg_matches_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layers: Vec<Tensor3> = (0..3).map(|_| Tensor3::randn(2, 5, 4, 1.0, &mut rng)).collect();
        let tiled = Tensor3::randn(2, 5, 4, 1.0, &mut rng);
        let cache = cache_of(&layers);
        let out = recover(&tiled, &cache, Recovery::Combine(RecoveryOp::SumPrevAvg)).unwrap();
        for i in 0..tiled.len() {
            let explicit =
                tiled.data()[i] + (layers[0].data()[i] + layers[1].data()[i] + layers[2].data()[i]) / 3.0;
            assert!((out.data()[i] - explicit).abs() < 1e-12);
        }
        // running_avg · count reproduces the running sum
        for i in 0..tiled.len() {
            let sum: f64 = layers.iter().map(|l| l.data()[i]).sum();
            assert!((cache.running_avg.data()[i] * 3.0 - sum).abs() < 1e-9);
        }
    }

    #[test]
    fn recover_none_and_shape_errors() {
        let t = Tensor3::zeros(1, 2, 2);
        let cache = cache_of(std::slice::from_ref(&t));
        assert!(matches!(recover(&t, &cache, Recovery::None), Err(Error::Usage(_))));
        let other = Tensor3::zeros(1, 3, 2);
        assert!(matches!(
            recover(&other, &cache, Recovery::Combine(RecoveryOp::SumLast)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn tape_cache_matches_plain_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers: Vec<Tensor3> = (0..4).map(|_| Tensor3::randn(1, 6, 2, 1.0, &mut rng)).collect();
        let tiled = Tensor3::randn(1, 6, 2, 1.0, &mut rng);
        let plain = cache_of(&layers);
        let mut tape = Tape::new();
        let mut tc = TapeCache::new();
        for l in &layers {
            let v = tape.input(l.clone());
            tc.push(&mut tape, v).unwrap();
        }
        let resolved = tc.resolve(&tape).unwrap();
        assert_eq!(resolved.first_full, plain.first_full);
        assert_eq!(resolved.last_full, plain.last_full);
        assert_eq!(resolved.running_max, plain.running_max);
        for (a, b) in resolved.running_avg.data().iter().zip(plain.running_avg.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let tv = tape.input(tiled.clone());
        for op in RecoveryOp::ALL {
            let r = tc.recover(&mut tape, tv, Recovery::Combine(op)).unwrap();
            let expect = recover(&tiled, &plain, Recovery::Combine(op)).unwrap();
            for (a, b) in tape.value(r).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12, "{op:?}");
            }
        }
    }

    #[test]
    fn recovery_names_round_trip() {
        for op in RecoveryOp::ALL {
            let r = Recovery::Combine(op);
            assert_eq!(r.name().parse::<Recovery>().unwrap(), r);
        }
        assert_eq!("none".parse::<Recovery>().unwrap(), Recovery::None);
        assert_eq!("tile_only".parse::<Recovery>().unwrap(), Recovery::TileOnly);
        assert!("avg".parse::<Recovery>().is_err());
    }

    #[test]
    fn funnel_config_rules() {
        assert!(FunnelConfig::new(vec![1, 4, 1], Recovery::None).is_err());
        assert!(FunnelConfig::new(vec![2, 1, 2], Recovery::None).is_err());
        let fc = FunnelConfig::at_layer(4, 2, Recovery::TileOnly).unwrap();
        assert_eq!(fc.pool_factors, vec![1, 1, 2, 1, 1]);
        assert_eq!(fc.funnel_layer(), Some(2));
        assert!(fc.validate(4).is_ok());
        assert!(fc.validate(3).is_err());
        assert_eq!(FunnelConfig::no_funnel(4).funnel_layer(), None);
        assert!(FunnelConfig::at_layer(4, 5, Recovery::None).is_err());
    }
}
