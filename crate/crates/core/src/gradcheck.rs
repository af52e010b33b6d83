//! Finite-difference verification harness.
//!
//! Runs a model fragment in relaxation mode (every hard threshold replaced by
//! its smooth ATan primitive), compares central differences against tape
//! gradients, and reports the maximum relative error over sampled
//! coordinates. Double precision with eps = 1e-5 keeps the arithmetic noise
//! floor near 1e-10.

use crate::tape::{ParamId, ParamStore, SpikeMode, Tape};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const FD_EPS: f64 = 1e-5;

/// Relative error with a unit floor so near-zero gradient pairs compare
/// absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check tape gradients of `loss_fn` against central differences for every
/// parameter in `params`, sampling up to `coords_per_param` coordinates each.
/// `loss_fn` must build the full forward onto the provided tape and return
/// the scalar loss node. Returns the max relative error observed.
pub fn finite_diff_check(
    store: &mut ParamStore,
    params: &[ParamId],
    coords_per_param: usize,
    seed: u64,
    loss_fn: &dyn Fn(&mut Tape) -> usize,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // analytic gradients from one tape pass
    let analytic: BTreeMap<ParamId, Vec<f64>> = {
        let mut tape = Tape::new(store, SpikeMode::Relaxation);
        let loss = loss_fn(&mut tape);
        assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
        let grads = tape.backward(loss);
        let map = tape.param_grads(&grads);
        params
            .iter()
            .map(|&p| (p, map.get(&p).map(|t| t.data.clone()).unwrap_or_default()))
            .collect()
    };

    let eval = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new(store, SpikeMode::Relaxation);
        let loss = loss_fn(&mut tape);
        tape.value(loss).data[0]
    };

    let mut max_err: f64 = 0.0;
    for &p in params {
        let n = store.get(p).len();
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(&mut rng);
        coords.truncate(coords_per_param.min(n));
        let ga = &analytic[&p];
        assert!(
            !ga.is_empty(),
            "parameter {} received no gradient",
            store.name(p)
        );
        for &c in &coords {
            let orig = store.get(p).data[c];
            store.get_mut(p).data[c] = orig + FD_EPS;
            let fplus = eval(store);
            store.get_mut(p).data[c] = orig - FD_EPS;
            let fminus = eval(store);
            store.get_mut(p).data[c] = orig;
            let fd = (fplus - fminus) / (2.0 * FD_EPS);
            max_err = max_err.max(rel_err(fd, ga[c]));
        }
    }
    max_err
}

/// Random projection loss: sum(output * fixed random weights). Turns any
/// tensor-valued fragment into a scalar objective with dense gradients.
pub fn random_projection(tape: &mut Tape, out: usize, seed: u64) -> usize {
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dims = tape.dims(out).to_vec();
    let wn = tape.input(crate::tensor::PotentialTensor { dims, data: w });
    let prod = tape.mul(out, wn);
    tape.sum_all(prod)
}
