//! Forward and backward kernels over [`Tensor3`].
//!
//! The kernels are plain functions; [`super::tape::Tape`] records them for the
//! reverse pass. Everything here is single-threaded and deterministic.

use std::cell::Cell;

use super::mask::SeqMask;
use super::tensor::Tensor3;
use crate::error::{Error, Result};

thread_local! {
    static FLOP_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns the number of flops the counted kernels executed on
/// this thread while it ran (2 per multiply-add for matmuls, plus whatever
/// elementwise work callers record explicitly).
pub fn count_flops<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let previous = FLOP_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let counted = FLOP_COUNTER.with(|c| c.replace(previous)).unwrap_or(0);
    if let Some(outer) = previous {
        FLOP_COUNTER.with(|c| c.set(Some(outer + counted)));
    }
    (out, counted)
}

pub(crate) fn record_flops(n: u64) {
    FLOP_COUNTER.with(|c| {
        if let Some(total) = c.get() {
            c.set(Some(total + n));
        }
    });
}

// c(m×n) += a(m×k) · b(k×n)
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

// c(m×n) += a(m×k) · b(n×k)ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

// c(m×n) += a(k×m)ᵀ · b(k×n)
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Shape bookkeeping shared by the matmul forward and backward kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// Right operand has batch 1 and is shared by every left batch entry.
    shared_rhs: bool,
}

pub(crate) fn matmul_dims(a: &Tensor3, b: &Tensor3, trans_b: bool) -> Result<MatmulDims> {
    let (batch, m, k) = a.shape();
    let (bb, r, c) = b.shape();
    let (bk, n) = if trans_b { (c, r) } else { (r, c) };
    if bk != k {
        return Err(Error::Config(format!(
            "matmul inner dimensions disagree: {}x{}x{} by {}x{}x{}{}",
            batch,
            m,
            k,
            bb,
            r,
            c,
            if trans_b { " (transposed)" } else { "" }
        )));
    }
    if bb != batch && bb != 1 {
        return Err(Error::Config(format!(
            "matmul batch mismatch: {batch} by {bb}"
        )));
    }
    Ok(MatmulDims {
        batch,
        m,
        k,
        n,
        shared_rhs: bb == 1 && batch > 1,
    })
}

/// Batched matrix product `a · b` (or `a · bᵀ`). A right operand with batch 1
/// is broadcast over the left operand's batch.
pub fn matmul(a: &Tensor3, b: &Tensor3, trans_b: bool) -> Result<Tensor3> {
    let d = matmul_dims(a, b, trans_b)?;
    record_flops(2 * (d.batch * d.m * d.k * d.n) as u64);
    let mut out = vec![0.0; d.batch * d.m * d.n];
    if d.shared_rhs {
        let rows = d.batch * d.m;
        if trans_b {
            gemm_nt(a.data(), b.data(), &mut out, rows, d.k, d.n);
        } else {
            gemm_nn(a.data(), b.data(), &mut out, rows, d.k, d.n);
        }
    } else {
        for bi in 0..d.batch {
            let c = &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n];
            if trans_b {
                gemm_nt(a.slab(bi), b.slab(bi), c, d.m, d.k, d.n);
            } else {
                gemm_nn(a.slab(bi), b.slab(bi), c, d.m, d.k, d.n);
            }
        }
    }
    Ok(Tensor3::from_raw(d.batch, d.m, d.n, out))
}

/// Gradients of `matmul` with respect to both operands.
pub(crate) fn matmul_backward(
    a: &Tensor3,
    b: &Tensor3,
    grad: &Tensor3,
    trans_b: bool,
) -> (Tensor3, Tensor3) {
    let d = matmul_dims(a, b, trans_b).expect("shapes checked in forward");
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let g = grad.data();
    if d.shared_rhs {
        let rows = d.batch * d.m;
        if trans_b {
            // C = A Bᵀ: dA = dC B, dB = dCᵀ A
            gemm_nn(g, b.data(), &mut ga, rows, d.n, d.k);
            gemm_tn(g, a.data(), &mut gb, d.n, rows, d.k);
        } else {
            // C = A B: dA = dC Bᵀ, dB = Aᵀ dC
            gemm_nt(g, b.data(), &mut ga, rows, d.n, d.k);
            gemm_tn(a.data(), g, &mut gb, d.k, rows, d.n);
        }
    } else {
        let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for bi in 0..d.batch {
            let gs = &g[bi * mn..(bi + 1) * mn];
            let ga_s = &mut ga[bi * mk..(bi + 1) * mk];
            let gb_s = &mut gb[bi * kn..(bi + 1) * kn];
            if trans_b {
                gemm_nn(gs, b.slab(bi), ga_s, d.m, d.n, d.k);
                gemm_tn(gs, a.slab(bi), gb_s, d.n, d.m, d.k);
            } else {
                gemm_nt(gs, b.slab(bi), ga_s, d.m, d.n, d.k);
                gemm_tn(a.slab(bi), gs, gb_s, d.k, d.m, d.n);
            }
        }
    }
    let (ab, as_, ad) = a.shape();
    let (bb, bs, bd) = b.shape();
    (
        Tensor3::from_raw(ab, as_, ad, ga),
        Tensor3::from_raw(bb, bs, bd, gb),
    )
}

/// Which last-dim positions a softmax row may attend to.
#[derive(Clone, Debug)]
pub struct KeyMask {
    pub mask: SeqMask,
    /// Consecutive batch rows of the input sharing one mask row (the head count
    /// once heads are folded into the batch axis).
    pub group: usize,
    pub causal: bool,
}

impl KeyMask {
    pub fn new(mask: SeqMask, group: usize, causal: bool) -> Self {
        Self {
            mask,
            group,
            causal,
        }
    }

    fn allowed(&self, b: usize, query: usize, key: usize) -> bool {
        self.mask.is_valid(b / self.group, key) && (!self.causal || key <= query)
    }
}

/// Softmax over the last axis with max subtraction. Masked positions get
/// exactly zero weight.
pub fn softmax_lastdim(x: &Tensor3, mask: Option<&KeyMask>) -> Result<Tensor3> {
    let (batch, seq, dim) = x.shape();
    if let Some(km) = mask {
        if km.mask.seq() != dim || km.mask.batch() * km.group != batch {
            return Err(Error::Shape(format!(
                "mask {}x{} (group {}) does not cover softmax input {batch}x{seq}x{dim}",
                km.mask.batch(),
                km.mask.seq(),
                km.group
            )));
        }
    }
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for s in 0..seq {
            let row = x.row(b, s);
            let o = &mut out[(b * seq + s) * dim..(b * seq + s + 1) * dim];
            let allowed = |j: usize| mask.is_none_or(|km| km.allowed(b, s, j));
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyAttentionRow);
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
    }
    Ok(Tensor3::from_raw(batch, seq, dim, out))
}

pub(crate) fn softmax_backward(y: &Tensor3, grad: &Tensor3) -> Tensor3 {
    let dim = y.dim();
    let mut gx = vec![0.0; y.len()];
    for ((yr, gr), out) in y
        .data()
        .chunks(dim)
        .zip(grad.data().chunks(dim))
        .zip(gx.chunks_mut(dim))
    {
        let inner = dot(yr, gr);
        for j in 0..dim {
            out[j] = yr[j] * (gr[j] - inner);
        }
    }
    let (b, s, d) = y.shape();
    Tensor3::from_raw(b, s, d, gx)
}

fn check_gain(x: &Tensor3, gain: &Tensor3) -> Result<()> {
    if gain.shape() != (1, 1, x.dim()) {
        return Err(Error::Shape(format!(
            "gain of shape {:?} does not match feature dim {}",
            gain.shape(),
            x.dim()
        )));
    }
    Ok(())
}

/// Root-mean-square normalisation of every feature vector, scaled by `gain`.
pub fn rmsnorm(x: &Tensor3, gain: &Tensor3, eps: f64) -> Result<Tensor3> {
    check_gain(x, gain)?;
    let dim = x.dim();
    let g = gain.data();
    let mut out = vec![0.0; x.len()];
    for (xr, o) in x.data().chunks(dim).zip(out.chunks_mut(dim)) {
        let inv = 1.0 / (dot(xr, xr) / dim as f64 + eps).sqrt();
        for j in 0..dim {
            o[j] = xr[j] * inv * g[j];
        }
    }
    let (b, s, d) = x.shape();
    Ok(Tensor3::from_raw(b, s, d, out))
}

pub(crate) fn rmsnorm_backward(
    x: &Tensor3,
    gain: &Tensor3,
    eps: f64,
    grad: &Tensor3,
) -> (Tensor3, Tensor3) {
    let dim = x.dim();
    let g = gain.data();
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; dim];
    for ((xr, gr), out) in x
        .data()
        .chunks(dim)
        .zip(grad.data().chunks(dim))
        .zip(gx.chunks_mut(dim))
    {
        let inv = 1.0 / (dot(xr, xr) / dim as f64 + eps).sqrt();
        // d/dx of x·inv·g: inv·(dxhat − xhat·mean(dxhat ⊙ xhat))
        let mut proj = 0.0;
        for j in 0..dim {
            let xhat = xr[j] * inv;
            gg[j] += gr[j] * xhat;
            proj += gr[j] * g[j] * xhat;
        }
        proj /= dim as f64;
        for j in 0..dim {
            out[j] = inv * (gr[j] * g[j] - xr[j] * inv * proj);
        }
    }
    let (b, s, d) = x.shape();
    (
        Tensor3::from_raw(b, s, d, gx),
        Tensor3::from_raw(1, 1, dim, gg),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor3) -> Tensor3 {
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
        .collect();
    let (b, s, d) = x.shape();
    Tensor3::from_raw(b, s, d, data)
}

pub(crate) fn gelu_backward(x: &Tensor3, grad: &Tensor3) -> Tensor3 {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * dt)
        })
        .collect();
    let (b, s, d) = x.shape();
    Tensor3::from_raw(b, s, d, data)
}

/// Rotary position embedding over consecutive feature pairs.
///
/// `x` is `(batch·heads) × seq × head_dim`; `positions[s]` is the (original
/// coordinate) position of row `s`, shared across the batch. `inverse` rotates
/// by the negated angles, which is also the backward map.
pub fn rope(x: &Tensor3, positions: &[usize], base: f64, inverse: bool) -> Result<Tensor3> {
    let (batch, seq, hd) = x.shape();
    if positions.len() != seq {
        return Err(Error::Shape(format!(
            "{} positions for sequence of length {seq}",
            positions.len()
        )));
    }
    if hd % 2 != 0 {
        return Err(Error::Config(format!("rotary head dim {hd} must be even")));
    }
    let half = hd / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / hd as f64))
        .collect();
    let mut table = Vec::with_capacity(seq * half);
    for &p in positions {
        for f in &freqs {
            let angle = sign * p as f64 * f;
            table.push(angle.sin_cos());
        }
    }
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for s in 0..seq {
            let xr = x.row(b, s);
            let o = &mut out[(b * seq + s) * hd..(b * seq + s + 1) * hd];
            for i in 0..half {
                let (sin, cos) = table[s * half + i];
                let (x0, x1) = (xr[2 * i], xr[2 * i + 1]);
                o[2 * i] = x0 * cos - x1 * sin;
                o[2 * i + 1] = x0 * sin + x1 * cos;
            }
        }
    }
    Ok(Tensor3::from_raw(batch, seq, hd, out))
}
