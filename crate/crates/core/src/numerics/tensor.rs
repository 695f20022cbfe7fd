use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense `batch × seq × dim` array of f64, row-major.
///
/// Weight matrices are stored with `batch == 1` (`1 × rows × cols`), gains and
/// biases as `1 × 1 × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    batch: usize,
    seq: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, seq: usize, dim: usize) -> Self {
        Self::filled(batch, seq, dim, 0.0)
    }

    pub fn filled(batch: usize, seq: usize, dim: usize, value: f64) -> Self {
        assert!(
            batch >= 1 && seq >= 1 && dim >= 1,
            "tensor dimensions must be positive, got {batch}x{seq}x{dim}"
        );
        Self {
            batch,
            seq,
            dim,
            data: vec![value; batch * seq * dim],
        }
    }

    pub fn from_vec(batch: usize, seq: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || seq == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {batch}x{seq}x{dim}"
            )));
        }
        if data.len() != batch * seq * dim {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {batch}x{seq}x{dim} tensor",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite tensor value {bad}")));
        }
        Ok(Self {
            batch,
            seq,
            dim,
            data,
        })
    }

    /// A `1 × rows × cols` matrix from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        Self::from_vec(1, rows.len(), cols, rows.concat())
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(
        batch: usize,
        seq: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let mut t = Self::zeros(batch, seq, dim);
        for v in &mut t.data {
            *v = normal.sample(rng);
        }
        t
    }

    pub(crate) fn from_raw(batch: usize, seq: usize, dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), batch * seq * dim);
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced"
        );
        Self {
            batch,
            seq,
            dim,
            data,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.seq, self.dim)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, b: usize, s: usize, d: usize) -> f64 {
        self.data[self.offset(b, s, d)]
    }

    pub fn set(&mut self, b: usize, s: usize, d: usize, value: f64) {
        let i = self.offset(b, s, d);
        self.data[i] = value;
    }

    /// Feature vector at `(b, s)`.
    pub fn row(&self, b: usize, s: usize) -> &[f64] {
        let start = (b * self.seq + s) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn row_mut(&mut self, b: usize, s: usize) -> &mut [f64] {
        let start = (b * self.seq + s) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// The `seq × dim` slab of one batch entry.
    pub fn slab(&self, b: usize) -> &[f64] {
        let n = self.seq * self.dim;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn offset(&self, b: usize, s: usize, d: usize) -> usize {
        assert!(b < self.batch && s < self.seq && d < self.dim);
        (b * self.seq + s) * self.dim + d
    }

    pub(crate) fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }
}
