//! Central finite differences against tape gradients.

use rand::seq::IteratorRandom;
use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use crate::error::Result;

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|g_fd − g_ad| / max(1, |g_fd|)`.
    pub fn relative_error(&self) -> f64 {
        (self.numeric - self.analytic).abs() / self.numeric.abs().max(1.0)
    }
}

/// Samples `n` (parameter, index) coordinates uniformly over all scalar
/// entries of `params` (or of the whole store when `params` is empty) and
/// compares the tape gradient against `(L(θ+h) − L(θ−h)) / 2h`.
pub fn compare<R: Rng + ?Sized>(
    store: &mut ParamStore,
    grads: &Grads,
    params: &[ParamId],
    n: usize,
    h: f64,
    rng: &mut R,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<Vec<GradSample>> {
    let pool: Vec<ParamId> = if params.is_empty() {
        store.ids().collect()
    } else {
        params.to_vec()
    };
    let coords: Vec<(ParamId, usize)> = pool
        .iter()
        .flat_map(|&id| (0..store.get(id).len()).map(move |i| (id, i)))
        .choose_multiple(rng, n);

    let mut out = Vec::with_capacity(coords.len());
    for (id, i) in coords {
        let original = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = original + h;
        let plus = loss(store)?;
        store.get_mut(id).data_mut()[i] = original - h;
        let minus = loss(store)?;
        store.get_mut(id).data_mut()[i] = original;
        out.push(GradSample {
            param: store.name(id).to_string(),
            index: i,
            analytic: grads.get(id).data()[i],
            numeric: (plus - minus) / (2.0 * h),
        });
    }
    Ok(out)
}
