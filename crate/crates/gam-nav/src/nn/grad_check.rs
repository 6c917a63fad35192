//! Central finite-difference gradient checker.

use rand::seq::SliceRandom;
use rand::Rng;

use super::param_store::ParamStore;
use crate::error::Result;

/// Compare analytic gradients against central finite differences on
/// `n_samples` randomly chosen parameter coordinates.
///
/// `eval(store, with_grad)` must return the (deterministic) scalar loss;
/// when `with_grad` is true it must also accumulate analytic gradients
/// into the store (grads are zeroed here first). Returns the max relative
/// error over sampled coordinates.
pub fn grad_check<R, F>(
    store: &mut ParamStore,
    n_samples: usize,
    h: f64,
    rng: &mut R,
    mut eval: F,
) -> Result<f64>
where
    R: Rng,
    F: FnMut(&mut ParamStore, bool) -> f64,
{
    store.zero_grads();
    let _ = eval(store, true);
    let analytic: Vec<f64> = (0..store.n_params()).map(|i| store.grad_coord(i)).collect();

    let n = store.n_params();
    let mut coords: Vec<usize> = (0..n).collect();
    coords.shuffle(rng);
    coords.truncate(n_samples.min(n));

    let mut max_rel = 0.0f64;
    for &c in &coords {
        let x0 = store.coord(c);
        store.set_coord(c, x0 + h);
        let lp = eval(store, false);
        store.set_coord(c, x0 - h);
        let lm = eval(store, false);
        store.set_coord(c, x0);
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[c];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < 1e-7 {
            // both effectively zero
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        };
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
