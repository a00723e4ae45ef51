//! Central finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tape::{Tape, Var};

/// Build a scalar loss from the current parameter values.
pub type LossFn<'a> = &'a dyn Fn(&ParamStore, &mut Tape) -> Result<Var>;

/// Compare analytic gradients against central differences on a random sample
/// of at least `min_coords` coordinates per parameter. Returns the max
/// relative error over all sampled coordinates.
pub fn gradient_check(
    store: &ParamStore,
    f: LossFn,
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numeric("non-finite loss in gradient check".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(&grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for (name, tensor) in store.iter() {
        let zero = vec![0.0; tensor.data.len()];
        let grad = analytic.get(name).unwrap_or(&zero);
        let mut coords: Vec<usize> = (0..tensor.data.len()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(min_coords.max(1).min(tensor.data.len()));
        for idx in coords {
            let mut perturbed = store.clone();
            let orig = tensor.data[idx];
            perturbed.get_mut(name).unwrap().data[idx] = orig + eps;
            let mut t = Tape::new();
            let vp = f(&perturbed, &mut t)?;
            let fp = t.scalar(vp);
            perturbed.get_mut(name).unwrap().data[idx] = orig - eps;
            let mut t = Tape::new();
            let vm = f(&perturbed, &mut t)?;
            let fm = t.scalar(vm);
            let numeric = (fp - fm) / (2.0 * eps);
            // Relative error with an absolute floor: central differences carry
            // roundoff noise of order ulp(loss)/eps (~1e-10 here), so coordinates
            // whose true gradient is zero would otherwise report spurious errors.
            let err = (grad[idx] - numeric).abs() / (grad[idx].abs() + numeric.abs()).max(1e-4);
            if err > max_err {
                max_err = err;
            }
            if std::env::var("GRADCHECK_DEBUG").is_ok() && err > 5e-5 {
                eprintln!(
                    "gradcheck: {}[{}] analytic={:+.9e} numeric={:+.9e} err={:.3e}",
                    name, idx, grad[idx], numeric, err
                );
            }
        }
    }
    Ok(max_err)
}
