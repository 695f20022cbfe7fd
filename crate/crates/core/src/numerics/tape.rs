//! Reverse-mode tape over a closed set of primitive ops.
//!
//! Every op appends a node holding its output value; [`Tape::backward`] walks
//! the nodes in exact reverse order. Parameters enter the tape through
//! [`Tape::param`] and their gradients come back as a [`Grads`] aligned with
//! the originating [`ParamStore`].

use std::rc::Rc;

use super::mask::SeqMask;
use super::ops::{self, KeyMask};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::funnel_ops;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Maximum { a: Var, b: Var },
    Softmax { x: Var },
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Gelu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Tile { x: Var, factor: usize },
    Gather { table: Var, ids: Vec<usize> },
    Rope { x: Var, positions: Rc<[usize]>, base: f64 },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    RepeatBatch { x: Var, times: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor3,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor3 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor3, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient is reported for it).
    pub fn input(&mut self, value: Tensor3) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b), trans_b)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }))
    }

    /// Elementwise sum; `b` may also be a `1 × 1 × dim` row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.same_shape(vb) {
            zip_map(va, vb, |x, y| x + y)
        } else if vb.shape() == (1, 1, va.dim()) {
            let bias = vb.data();
            let mut data = va.data().to_vec();
            for row in data.chunks_mut(bias.len()) {
                for (x, y) in row.iter_mut().zip(bias) {
                    *x += y;
                }
            }
            let (b0, s, d) = va.shape();
            Tensor3::from_raw(b0, s, d, data)
        } else {
            return Err(shape_mismatch("add", va, vb));
        };
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(shape_mismatch("mul", va, vb));
        }
        let out = zip_map(va, vb, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let (b, s, d) = v.shape();
        let out = Tensor3::from_raw(b, s, d, v.data().iter().map(|e| e * factor).collect());
        self.push(out, Op::Scale { x, factor })
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(shape_mismatch("maximum", va, vb));
        }
        let out = zip_map(va, vb, |x, y| if y > x { y } else { x });
        Ok(self.push(out, Op::Maximum { a, b }))
    }

    pub fn softmax(&mut self, x: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let out = ops::softmax_lastdim(self.value(x), mask)?;
        Ok(self.push(out, Op::Softmax { x }))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let out = ops::rmsnorm(self.value(x), self.value(gain), eps)?;
        Ok(self.push(out, Op::RmsNorm { x, gain, eps }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.push(out, Op::Gelu { x })
    }

    /// Window max-pool along the sequence axis; see [`funnel_ops::max_pool_seq`].
    pub fn max_pool_seq(&mut self, x: Var, mask: &SeqMask, factor: usize) -> Result<(Var, SeqMask)> {
        let (out, pooled_mask, argmax) =
            funnel_ops::max_pool_with_argmax(self.value(x), mask, factor)?;
        Ok((self.push(out, Op::MaxPool { x, argmax }), pooled_mask))
    }

    /// Repeat each position `factor` times, truncated to `target_len`.
    pub fn tile_upsample(&mut self, x: Var, factor: usize, target_len: usize) -> Result<Var> {
        let out = funnel_ops::tile_upsample(self.value(x), factor, target_len)?;
        Ok(self.push(out, Op::Tile { x, factor }))
    }

    /// Row lookup: `table` is `1 × rows × dim`, `ids` is a `batch × seq`
    /// row-major id matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize], batch: usize, seq: usize) -> Result<Var> {
        let t = self.value(table);
        let (tb, rows, dim) = t.shape();
        if tb != 1 || ids.len() != batch * seq {
            return Err(Error::Shape(format!(
                "gather of {} ids as {batch}x{seq} from a {tb}x{rows}x{dim} table",
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {rows}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(t.row(0, i));
        }
        let out = Tensor3::from_raw(batch, seq, dim, data);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn rope(&mut self, x: Var, positions: Rc<[usize]>, base: f64) -> Result<Var> {
        let out = ops::rope(self.value(x), &positions, base, false)?;
        Ok(self.push(out, Op::Rope { x, positions, base }))
    }

    /// `batch × seq × (heads·hd)` → `(batch·heads) × seq × hd`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let v = self.value(x);
        let (b, s, d) = v.shape();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let hd = d / heads;
        let mut out = vec![0.0; v.len()];
        for bi in 0..b {
            for si in 0..s {
                let row = v.row(bi, si);
                for h in 0..heads {
                    let dst = ((bi * heads + h) * s + si) * hd;
                    out[dst..dst + hd].copy_from_slice(&row[h * hd..(h + 1) * hd]);
                }
            }
        }
        let out = Tensor3::from_raw(b * heads, s, hd, out);
        Ok(self.push(out, Op::SplitHeads { x, heads }))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let v = self.value(x);
        let bh = v.batch();
        if heads == 0 || bh % heads != 0 {
            return Err(Error::Shape(format!("batch {bh} is not a multiple of {heads} heads")));
        }
        let out = merge_heads_raw(v, heads);
        Ok(self.push(out, Op::MergeHeads { x, heads }))
    }

    /// Stack `times` copies along the batch axis (copy `i` lands at batch
    /// rows `i·batch .. (i+1)·batch`).
    pub fn repeat_batch(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let (b, s, d) = v.shape();
        let mut data = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            data.extend_from_slice(v.data());
        }
        let out = Tensor3::from_raw(b * times, s, d, data);
        self.push(out, Op::RepeatBatch { x, times })
    }

    /// Mean cross-entropy over positions with a target; `targets` is indexed
    /// by `batch·seq` row of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let v = self.value(logits);
        let (b, s, classes) = v.shape();
        if targets.len() != b * s {
            return Err(Error::Shape(format!(
                "{} targets for {b}x{s} logits",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; v.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, (row, t)) in v.data().chunks(classes).zip(targets).enumerate() {
            let Some(t) = *t else { continue };
            if t >= classes {
                return Err(Error::Input(format!("label {t} out of range for {classes} classes")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * classes..(r + 1) * classes];
            let mut z = 0.0;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            total += z.ln() + max - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Input("cross-entropy over zero labelled positions".into()));
        }
        let out = Tensor3::from_raw(1, 1, 1, vec![total / count as f64]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor3::from_raw(1, 1, 1, vec![total]), Op::Sum { x })
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Grads> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called before any forward op".into()));
        }
        if loss.0 != self.nodes.len() - 1 {
            return Err(Error::Usage("loss must be the final tape value".into()));
        }
        if self.value(loss).shape() != (1, 1, 1) {
            return Err(Error::Usage("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor3>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads::zeros_like(store);
        grads[loss.0] = Some(Tensor3::filled(1, 1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    if id.0 >= store.len() || !store.get(*id).same_shape(&g) {
                        return Err(Error::Usage(format!(
                            "parameter {} does not belong to this store",
                            id.0
                        )));
                    }
                    out.accumulate(*id, &g);
                }
                Op::MatMul { a, b, trans_b } => {
                    let (ga, gb) =
                        ops::matmul_backward(self.value(*a), self.value(*b), &g, *trans_b);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    let vb = self.value(*b);
                    if vb.same_shape(&g) {
                        accumulate(&mut grads, *b, g.clone());
                    } else {
                        let dim = vb.dim();
                        let mut gb = vec![0.0; dim];
                        for row in g.data().chunks(dim) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor3::from_raw(1, 1, dim, gb));
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul { a, b } => {
                    let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale { x, factor } => {
                    let (b, s, d) = g.shape();
                    let gx = g.data().iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, *x, Tensor3::from_raw(b, s, d, gx));
                }
                Op::Maximum { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (n0, n1, n2) = g.shape();
                    let mut ga = vec![0.0; g.len()];
                    let mut gb = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        if vb.data()[i] > va.data()[i] {
                            gb[i] = g.data()[i];
                        } else {
                            ga[i] = g.data()[i];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor3::from_raw(n0, n1, n2, ga));
                    accumulate(&mut grads, *b, Tensor3::from_raw(n0, n1, n2, gb));
                }
                Op::Softmax { x } => {
                    accumulate(&mut grads, *x, ops::softmax_backward(&node.value, &g));
                }
                Op::RmsNorm { x, gain, eps } => {
                    let (gx, gg) =
                        ops::rmsnorm_backward(self.value(*x), self.value(*gain), *eps, &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                }
                Op::Gelu { x } => {
                    accumulate(&mut grads, *x, ops::gelu_backward(self.value(*x), &g));
                }
                Op::MaxPool { x, argmax } => {
                    let (b, s, d) = self.value(*x).shape();
                    accumulate(
                        &mut grads,
                        *x,
                        funnel_ops::max_pool_backward(argmax, (b, s, d), &g),
                    );
                }
                Op::Tile { x, factor } => {
                    let pooled = self.value(*x).seq();
                    accumulate(
                        &mut grads,
                        *x,
                        funnel_ops::tile_backward(&g, *factor, pooled),
                    );
                }
                Op::Gather { table, ids } => {
                    let (_, rows, dim) = self.value(*table).shape();
                    let mut gt = vec![0.0; rows * dim];
                    for (row, &i) in g.data().chunks(dim).zip(ids) {
                        for (acc, v) in gt[i * dim..(i + 1) * dim].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *table, Tensor3::from_raw(1, rows, dim, gt));
                }
                Op::Rope { x, positions, base } => {
                    let gx = ops::rope(&g, positions, *base, true)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::SplitHeads { x, heads } => {
                    accumulate(&mut grads, *x, merge_heads_raw(&g, *heads));
                }
                Op::MergeHeads { x, heads } => {
                    let (bh, s, hd) = self.value(*x).shape();
                    let mut gx = vec![0.0; g.len()];
                    let b = bh / heads;
                    for bi in 0..b {
                        for si in 0..s {
                            let row = g.row(bi, si);
                            for h in 0..*heads {
                                let dst = ((bi * heads + h) * s + si) * hd;
                                gx[dst..dst + hd].copy_from_slice(&row[h * hd..(h + 1) * hd]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor3::from_raw(bh, s, hd, gx));
                }
                Op::RepeatBatch { x, times } => {
                    let (b, s, d) = self.value(*x).shape();
                    let chunk = b * s * d;
                    let mut gx = vec![0.0; chunk];
                    for copy in 0..*times {
                        for (acc, v) in gx.iter_mut().zip(&g.data()[copy * chunk..(copy + 1) * chunk]) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor3::from_raw(b, s, d, gx));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (b, s, classes) = self.value(*logits).shape();
                    let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                    let upstream = g.data()[0] / count;
                    let mut gl = vec![0.0; probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..classes {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * classes + c] = (probs[r * classes + c] - onehot) * upstream;
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor3::from_raw(b, s, classes, gl));
                }
                Op::Sum { x } => {
                    let (b, s, d) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Tensor3::filled(b, s, d, g.data()[0]));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor3>], v: Var, g: Tensor3) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor3, b: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Tensor3 {
    let (n0, n1, n2) = a.shape();
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor3::from_raw(n0, n1, n2, data)
}

fn merge_heads_raw(v: &Tensor3, heads: usize) -> Tensor3 {
    let (bh, s, hd) = v.shape();
    let b = bh / heads;
    let d = heads * hd;
    let mut out = vec![0.0; v.len()];
    for bi in 0..b {
        for h in 0..heads {
            for si in 0..s {
                let src = v.row(bi * heads + h, si);
                let dst = (bi * s + si) * d + h * hd;
                out[dst..dst + hd].copy_from_slice(src);
            }
        }
    }
    Tensor3::from_raw(b, s, d, out)
}

fn shape_mismatch(op: &str, a: &Tensor3, b: &Tensor3) -> Error {
    Error::Shape(format!(
        "{op} operands disagree: {:?} vs {:?}",
        a.shape(),
        b.shape()
    ))
}
