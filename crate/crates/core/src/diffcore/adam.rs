//! Adam optimizer over named parameter arrays.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-parameter first/second moment accumulators plus the step counter.
///
/// Moment shapes always equal the corresponding parameter shapes; they are
/// allocated lazily on the first step that touches a parameter name.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update with bias correction.
///
/// `params` is the full set of named parameter arrays; `grads` must hold a
/// same-shaped gradient for every name. Non-finite gradient entries abort
/// with an error naming the parameter. `lr = 0` leaves parameters
/// bit-identical (the step counter still advances).
pub fn adam_step(
    params: &mut [(&str, &mut Array2<f64>)],
    grads: &BTreeMap<String, Array2<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(*name).ok_or_else(|| Error::MissingBinding {
            name: format!("gradient for '{name}'"),
        })?;
        if g.dim() != p.dim() {
            return Err(Error::Shape {
                context: format!("adam gradient for '{name}'"),
                expected: format!("{}x{}", p.nrows(), p.ncols()),
                actual: format!("{}x{}", g.nrows(), g.ncols()),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient for '{name}'"),
            });
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (name, p) in params.iter_mut() {
        let g = &grads[*name];
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(p.dim()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(p.dim()));
        ndarray::Zip::from(&mut **p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = state.beta1 * *m + (1.0 - state.beta1) * g;
                *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
            });
    }
    Ok(())
}
