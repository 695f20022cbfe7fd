use crate::error::{Error, Result};

/// Per-position validity flags for a batch of sequences (`false` = padding).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqMask {
    batch: usize,
    seq: usize,
    valid: Vec<bool>,
}

impl SeqMask {
    pub fn all_valid(batch: usize, seq: usize) -> Self {
        Self {
            batch,
            seq,
            valid: vec![true; batch * seq],
        }
    }

    /// Rejects masks with a sequence that has no valid position.
    pub fn new(batch: usize, seq: usize, valid: Vec<bool>) -> Result<Self> {
        if batch == 0 || seq == 0 || valid.len() != batch * seq {
            return Err(Error::Shape(format!(
                "mask of {} flags does not match {batch}x{seq}",
                valid.len()
            )));
        }
        let mask = Self { batch, seq, valid };
        for b in 0..batch {
            if !mask.row(b).iter().any(|&v| v) {
                return Err(Error::Input(format!(
                    "sequence {b} has no valid position"
                )));
            }
        }
        Ok(mask)
    }

    /// Right-padded mask: sequence `b` is valid on `0..lengths[b]`.
    pub fn from_lengths(seq: usize, lengths: &[usize]) -> Result<Self> {
        let mut valid = Vec::with_capacity(seq * lengths.len());
        for &len in lengths {
            if len > seq {
                return Err(Error::Shape(format!("length {len} exceeds seq {seq}")));
            }
            valid.extend((0..seq).map(|s| s < len));
        }
        Self::new(lengths.len(), seq, valid)
    }

    /// Built by pooling: may contain fully padded rows only if the input did.
    pub(crate) fn from_raw(batch: usize, seq: usize, valid: Vec<bool>) -> Self {
        debug_assert_eq!(valid.len(), batch * seq);
        Self { batch, seq, valid }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn is_valid(&self, b: usize, s: usize) -> bool {
        self.valid[b * self.seq + s]
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.valid[b * self.seq..(b + 1) * self.seq]
    }

    pub fn flags(&self) -> &[bool] {
        &self.valid
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}
