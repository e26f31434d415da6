//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used to build the numeric gradient, so the
//! check is independent of every backward rule it verifies.

use ndarray::Array2;

use super::tape::{Tape, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all inputs, `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Compare backward gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `inputs`, and must
/// return a scalar. Relative error is measured per input tensor in the
/// Euclidean norm; an input whose gradient is identically zero on both
/// sides scores 0.
pub fn check_gradients<F>(inputs: &[Array2<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Array2<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
        let out = f(&mut t, &vars)?;
        Ok(t.value(out)[[0, 0]])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(inputs[k].dim()));
        let mut numeric = Array2::zeros(inputs[k].dim());
        for idx in 0..inputs[k].len() {
            let (r, c) = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
            let orig = work[k][[r, c]];
            work[k][[r, c]] = orig + step;
            let plus = eval(&work)?;
            work[k][[r, c]] = orig - step;
            let minus = eval(&work)?;
            work[k][[r, c]] = orig;
            numeric[[r, c]] = (plus - minus) / (2.0 * step);
        }
        per_input.push(relative_error(&analytic, &numeric));
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        per_input,
    })
}

pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let na = a.mapv(|x| x * x).sum().sqrt();
    let nb = b.mapv(|x| x * x).sum().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
