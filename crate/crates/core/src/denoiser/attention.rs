use ndarray::Array2;

use super::rotary::RotaryEncoding;
use crate::error::{dim_err, Result};
use crate::tensor::{BoundParams, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    SelfAttention,
    Cross,
}

/// Three-layer MLP `relu(LN(x W0 + b0)) -> relu(. W1 + b1) -> . W2 + b2`.
pub fn mlp(tape: &mut Tape, x: Var, params: &BoundParams, prefix: &str) -> Result<Var> {
    let mut h = x;
    for layer in 0..3 {
        let w = params.get(&format!("{prefix}.w{layer}"))?;
        let b = params.get(&format!("{prefix}.b{layer}"))?;
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if layer == 0 {
            h = tape.layer_norm(h, 1e-5);
        }
        if layer < 2 {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// One rotary attention layer with a residual MLP update.
///
/// In self mode the context arguments are ignored and `f_src` attends to
/// itself.
#[allow(clippy::too_many_arguments)]
pub fn attention_layer(
    tape: &mut Tape,
    f_src: Var,
    f_ctx: Var,
    rot_src: &RotaryEncoding,
    rot_ctx: &RotaryEncoding,
    params: &BoundParams,
    prefix: &str,
    mode: AttentionMode,
) -> Result<Var> {
    let (f_ctx, rot_ctx) = match mode {
        AttentionMode::SelfAttention => (f_src, rot_src),
        AttentionMode::Cross => (f_ctx, rot_ctx),
    };
    let (n, d) = tape.shape(f_src);
    let (m, dc) = tape.shape(f_ctx);
    if d != dc {
        return Err(dim_err(format!("attention widths {d} and {dc} differ")));
    }
    if rot_src.n_points() != n || rot_ctx.n_points() != m {
        return Err(dim_err(format!(
            "rotary sizes {}/{} do not match features {n}/{m}",
            rot_src.n_points(),
            rot_ctx.n_points()
        )));
    }
    let wq = params.get(&format!("{prefix}.wq"))?;
    let wk = params.get(&format!("{prefix}.wk"))?;
    let wv = params.get(&format!("{prefix}.wv"))?;
    let q = tape.matmul(f_src, wq)?;
    let q = tape.rotate_pairs(q, rot_src.0.clone())?;
    let k = tape.matmul(f_ctx, wk)?;
    let k = tape.rotate_pairs(k, rot_ctx.0.clone())?;
    let v = tape.matmul(f_ctx, wv)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let alpha = tape.softmax_rows(scores);
    let msg = tape.matmul(alpha, v)?;
    let cat = tape.concat_cols(f_src, msg)?;
    let upd = mlp(tape, cat, params, &format!("{prefix}.mlp"))?;
    tape.add(f_src, upd)
}

/// Plain-array wrapper, mainly for inspection and tests.
pub fn attention_weights(
    q_feat: &Array2<f64>,
    k_feat: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    rot_q: &RotaryEncoding,
    rot_k: &RotaryEncoding,
) -> Array2<f64> {
    let q = rot_q.apply(&q_feat.dot(wq));
    let k = rot_k.apply(&k_feat.dot(wk));
    let d = q.ncols() as f64;
    let mut s = q.dot(&k.t()) / d.sqrt();
    for mut row in s.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    s
}
