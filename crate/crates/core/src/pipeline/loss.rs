use ndarray::Array2;
use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::tensor::{Tape, Var};

pub const FOCAL_CLAMP: f64 = 1e-7;

/// Focal loss with separate weights for positive and negative entries:
/// mean of `−w_pos·(1−p)^γ·ln p` over positives and `−w_neg·p^γ·ln(1−p)`
/// over negatives, with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn focal_loss_weighted(tape: &mut Tape, pred: Var, target: &Array2<f64>, gamma: f64, w_pos: f64, w_neg: f64) -> Result<Var> {
    if tape.shape(pred) != target.dim() {
        return Err(dim_err(format!("focal: prediction {:?} vs target {:?}", tape.shape(pred), target.dim())));
    }
    let p = tape.clamp(pred, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    let neg_p = tape.scale(p, -1.0);
    let q = tape.add_scalar(neg_p, 1.0);
    let ln_p = tape.ln(p);
    let ln_q = tape.ln(q);
    let mod_pos = tape.powf(q, gamma);
    let mod_neg = tape.powf(p, gamma);
    let pos = tape.mul(mod_pos, ln_p)?;
    let neg = tape.mul(mod_neg, ln_q)?;
    let pos = tape.mul_const(pos, Arc::new(target.mapv(|y| -w_pos * y)))?;
    let neg = tape.mul_const(neg, Arc::new(target.mapv(|y| -w_neg * (1.0 - y))))?;
    let all = tape.add(pos, neg)?;
    Ok(tape.mean(all))
}

/// Standard focal loss: positives weighted by `alpha`, negatives by `1 − alpha`.
pub fn focal_loss(tape: &mut Tape, pred: Var, target: &Array2<f64>, gamma: f64, alpha: f64) -> Result<Var> {
    focal_loss_weighted(tape, pred, target, gamma, alpha, 1.0 - alpha)
}

/// Negative-to-positive count ratio of a binary target, at least 1.
pub fn class_balance(target: &Array2<f64>) -> f64 {
    let pos = target.iter().filter(|&&y| y > 0.5).count();
    if pos == 0 {
        return 1.0;
    }
    ((target.len() - pos) as f64 / pos as f64).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(pred: &Array2<f64>, y: &Array2<f64>, g: f64, a: f64) -> f64 {
        let mut t = Tape::new();
        let p = t.constant(pred.clone());
        let l = focal_loss(&mut t, p, y, g, a).unwrap();
        t.value(l)[[0, 0]]
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = Array2::from_shape_fn((5, 5), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let pred = y.mapv(|v| if v > 0.5 { 1.0 - 1e-7 } else { 1e-7 });
        assert!(eval(&pred, &y, 2.0, 0.25) < 1e-5);
    }

    #[test]
    fn reduces_to_half_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred: Array2<f64> = Array2::from_shape_fn((4, 6), |_| rng.random_range(0.01..0.99));
        let y = Array2::from_shape_fn((4, 6), |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let mut bce = 0.0_f64;
        for (&p, &t) in pred.iter().zip(y.iter()) {
            bce += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        }
        bce /= 24.0;
        assert!((eval(&pred, &y, 0.0, 0.5) - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let pred = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.05..0.95));
            let y = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
            let rep = check_gradients(&[pred], DEFAULT_STEP * 0.01, |t, v| focal_loss(t, v[0], &y, 2.0, 0.25)).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
        }
    }

    #[test]
    fn balance_ratio() {
        let y = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        assert_eq!(class_balance(&y), 3.0);
        assert_eq!(class_balance(&Array2::zeros((2, 2))), 1.0);
    }
}
