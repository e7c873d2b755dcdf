//! Central-difference verification of tape gradients.

use super::tape::{Tape, TensorRef};
use ndarray::Array2;
use std::collections::BTreeMap;

pub type ParamMap = BTreeMap<String, Array2<f64>>;
pub type ParamRefs = BTreeMap<String, TensorRef>;

/// Absolute floor below which analytic and numeric gradients count as equal.
/// Central differences carry ~1e-11 absolute noise at any step size, so
/// relative comparison is meaningless for gradients much smaller than this.
const GRAD_ATOL: f64 = 1e-6;

/// Compares analytic gradients of `build` (a tape program ending in a scalar)
/// against central differences with step `h`, returning the maximum relative
/// error |a − n| / (|a| + |n| + 1e-12) over all parameter entries. Entries
/// where both sides are below [`GRAD_ATOL`] in magnitude count as exact.
///
/// The function must be smooth at the evaluation point; keep inputs away
/// from ReLU kinks.
pub fn grad_check<F>(build: F, params: &ParamMap, h: f64) -> f64
where
    F: Fn(&mut Tape, &ParamRefs) -> TensorRef,
{
    let mut tape = Tape::new();
    let refs: ParamRefs = params
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), true)))
        .collect();
    let loss = build(&mut tape, &refs);
    tape.backward(loss);
    let analytic: ParamMap = refs
        .iter()
        .map(|(k, &r)| {
            let g = tape
                .grad(r)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(params[k].dim()));
            (k.clone(), g)
        })
        .collect();

    let eval = |point: &ParamMap| -> f64 {
        let mut tape = Tape::new();
        let refs: ParamRefs = point
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), false)))
            .collect();
        let loss = build(&mut tape, &refs);
        tape.value(loss)[[0, 0]]
    };

    let mut max_err = 0.0f64;
    for (key, value) in params {
        let (rows, cols) = value.dim();
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = params.clone();
                plus.get_mut(key).unwrap()[[r, c]] += h;
                let mut minus = params.clone();
                minus.get_mut(key).unwrap()[[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[key][[r, c]];
                if a.abs() < GRAD_ATOL && numeric.abs() < GRAD_ATOL {
                    continue;
                }
                let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
                max_err = max_err.max(err);
            }
        }
    }
    max_err
}
