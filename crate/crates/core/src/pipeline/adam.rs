use ndarray::{Array2, Zip};

use crate::tensor::{Grads, ParamStore};

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Grads,
    pub v: Grads,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam step. Parameters without a gradient entry are
/// left alone.
pub fn adam_update(params: &mut ParamStore, grads: &Grads, state: &mut AdamState, lr: f64, betas: (f64, f64)) {
    state.t += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
        Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
        });
    }
}
