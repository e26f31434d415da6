//! Denoising network: Sinkhorn, soft Procrustes, warp, an interleaved
//! rotary-attention transformer and a positional matching head.

mod attention;
mod rotary;

pub use attention::{attention_layer, attention_weights, mlp, AttentionMode};
pub use rotary::{pair_frequencies, rotary_encode, RotaryEncoding};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsm::{sinkhorn_project, sinkhorn_var, Marginals, MatchMatrix};
use crate::error::{dim_err, Error, Result};
use crate::geometry::{rigid_warp, soft_procrustes, PointCloud, RigidTransform};
use crate::tensor::{BoundParams, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d_model: usize,
    /// Rounds of (self, cross) attention.
    pub n_layers: usize,
    pub n_heads: usize,
    pub rotary_freq_base: f64,
    /// Coordinate length (m) that maps to one radian at the highest frequency.
    pub rotary_voxel: f64,
    pub sinkhorn_iters_inner: usize,
    pub procrustes_k: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 66,
            n_layers: 2,
            n_heads: 1,
            rotary_freq_base: 100.0,
            rotary_voxel: 0.1,
            sinkhorn_iters_inner: 5,
            procrustes_k: 128,
        }
    }
}

impl DenoiserConfig {
    /// Width and depth used for the full-size model.
    pub fn full_scale() -> Self {
        Self {
            d_model: 528,
            n_layers: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 6 != 0 {
            return Err(Error::Config(format!("denoiser.d_model {} must be a positive multiple of 6", self.d_model)));
        }
        if self.n_heads != 1 {
            return Err(Error::Config(format!("denoiser.n_heads {} unsupported, only 1", self.n_heads)));
        }
        if !(self.rotary_freq_base > 0.0) || !(self.rotary_voxel > 0.0) {
            return Err(Error::Config("rotary_freq_base and rotary_voxel must be positive".into()));
        }
        if self.sinkhorn_iters_inner == 0 {
            return Err(Error::Config("denoiser.sinkhorn_iters_inner must be >= 1".into()));
        }
        if self.procrustes_k < 3 {
            return Err(Error::Config("denoiser.procrustes_k must be >= 3".into()));
        }
        Ok(())
    }
}

pub(crate) fn init_mlp<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, d_out: usize, out_gain: f64, rng: &mut R) {
    store.init_linear(&format!("{prefix}.w0"), d_in, hidden, 2f64.sqrt(), rng);
    store.init_zeros(&format!("{prefix}.b0"), 1, hidden);
    store.init_linear(&format!("{prefix}.w1"), hidden, hidden, 2f64.sqrt(), rng);
    store.init_zeros(&format!("{prefix}.b1"), 1, hidden);
    store.init_linear(&format!("{prefix}.w2"), hidden, d_out, out_gain, rng);
    store.init_zeros(&format!("{prefix}.b2"), 1, d_out);
}

/// Add freshly initialized `denoiser.*` tensors to `store`.
pub fn init_params<R: Rng>(store: &mut ParamStore, cfg: &DenoiserConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    for layer in 0..2 * cfg.n_layers {
        let p = format!("denoiser.layer{layer}");
        for w in ["wq", "wk", "wv"] {
            store.init_linear(&format!("{p}.{w}"), d, d, 1.0, rng);
        }
        init_mlp(store, &format!("{p}.mlp"), 2 * d, d, d, 0.3, rng);
    }
    store.init_linear("denoiser.match.wp", d, d, 1.0, rng);
    store.init_linear("denoiser.match.wq", d, d, 1.0, rng);
    Ok(())
}

/// Interleaved transformer: each round runs a self layer on both sides,
/// then a cross layer where each side attends to the other's pre-cross
/// features. Both sides share weights.
pub fn f_theta(
    tape: &mut Tape,
    f_p: Var,
    f_q: Var,
    rot_p: &RotaryEncoding,
    rot_q: &RotaryEncoding,
    params: &BoundParams,
    n_layers: usize,
) -> Result<(Var, Var)> {
    let (mut fp, mut fq) = (f_p, f_q);
    for round in 0..n_layers {
        let s = format!("denoiser.layer{}", 2 * round);
        fp = attention_layer(tape, fp, fp, rot_p, rot_p, params, &s, AttentionMode::SelfAttention)?;
        fq = attention_layer(tape, fq, fq, rot_q, rot_q, params, &s, AttentionMode::SelfAttention)?;
        let c = format!("denoiser.layer{}", 2 * round + 1);
        let np = attention_layer(tape, fp, fq, rot_p, rot_q, params, &c, AttentionMode::Cross)?;
        let nq = attention_layer(tape, fq, fp, rot_q, rot_p, params, &c, AttentionMode::Cross)?;
        fp = np;
        fq = nq;
    }
    Ok((fp, fq))
}

/// `logits[i, j] = <rot(p_i) f_p[i] W_P, rot(q_j) f_q[j] W_Q> / sqrt(d)`,
/// with weights read from `{prefix}.wp` and `{prefix}.wq`.
pub fn matching_logits(
    tape: &mut Tape,
    f_p: Var,
    f_q: Var,
    rot_p: &RotaryEncoding,
    rot_q: &RotaryEncoding,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let (_, d) = tape.shape(f_p);
    let (_, dq) = tape.shape(f_q);
    if d != dq {
        return Err(dim_err(format!("matching widths {d} and {dq} differ")));
    }
    let wp = params.get(&format!("{prefix}.wp"))?;
    let wq = params.get(&format!("{prefix}.wq"))?;
    let a = tape.matmul(f_p, wp)?;
    let a = tape.rotate_pairs(a, rot_p.0.clone())?;
    let b = tape.matmul(f_q, wq)?;
    let b = tape.rotate_pairs(b, rot_q.0.clone())?;
    let bt = tape.transpose(b);
    let s = tape.matmul(a, bt)?;
    Ok(tape.scale(s, 1.0 / (d as f64).sqrt()))
}

/// Everything one denoiser call produces on the tape.
#[derive(Clone, Debug)]
pub struct Denoised {
    /// Projected estimate of the clean matrix, entries in `[0, 1]`.
    pub e0: Var,
    pub logits: Var,
    /// Transform estimated from the input matrix and used for the warp.
    pub transform: RigidTransform,
}

/// Transform implied by a non-negative score matrix; falls back to identity
/// when the weighted alignment is degenerate.
pub fn estimate_transform(e_t: &MatchMatrix, p: &PointCloud, q: &PointCloud, cfg: &DenoiserConfig) -> Result<RigidTransform> {
    let projected = sinkhorn_project(e_t, cfg.sinkhorn_iters_inner, Marginals::Relaxed, 0.0)?;
    let k = cfg.procrustes_k.min(p.len() * q.len());
    match soft_procrustes(&projected, p, q, k) {
        Ok(rt) => Ok(rt),
        Err(Error::Degenerate(msg)) => {
            log::debug!("procrustes degenerate ({msg}), warping with identity");
            Ok(RigidTransform::identity())
        }
        Err(e) => Err(e),
    }
}

/// Denoiser on a tape. `e_t` holds non-negative scores (the sigmoid of the
/// noisy iterate). The alignment step is not differentiated.
#[allow(clippy::too_many_arguments)]
pub fn g_theta_var(
    tape: &mut Tape,
    e_t: &MatchMatrix,
    p: &PointCloud,
    q: &PointCloud,
    f_p: Var,
    f_q: Var,
    params: &BoundParams,
    cfg: &DenoiserConfig,
) -> Result<Denoised> {
    if e_t.n_src() != p.len() || e_t.n_tgt() != q.len() {
        return Err(dim_err(format!(
            "matrix {}x{} vs clouds {} and {}",
            e_t.n_src(),
            e_t.n_tgt(),
            p.len(),
            q.len()
        )));
    }
    if tape.shape(f_p).0 != p.len() || tape.shape(f_q).0 != q.len() {
        return Err(dim_err("feature rows do not match cloud sizes"));
    }
    let transform = estimate_transform(e_t, p, q, cfg)?;
    let warped = rigid_warp(p, &transform);
    let rot_p = rotary_encode(&warped, cfg)?;
    let rot_q = rotary_encode(q, cfg)?;
    let (hp, hq) = f_theta(tape, f_p, f_q, &rot_p, &rot_q, params, cfg.n_layers)?;
    let logits = matching_logits(tape, hp, hq, &rot_p, &rot_q, params, "denoiser.match")?;
    let e0 = sinkhorn_var(tape, logits, cfg.sinkhorn_iters_inner, Marginals::Relaxed)?;
    Ok(Denoised { e0, logits, transform })
}

/// Inference wrapper around [`g_theta_var`] with constant inputs.
pub fn g_theta(
    e_t: &MatchMatrix,
    p: &PointCloud,
    q: &PointCloud,
    f_p: &Array2<f64>,
    f_q: &Array2<f64>,
    params: &ParamStore,
    cfg: &DenoiserConfig,
) -> Result<(MatchMatrix, Array2<f64>, RigidTransform)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &["denoiser", "encoder"]);
    let fp = tape.constant(f_p.clone());
    let fq = tape.constant(f_q.clone());
    let out = g_theta_var(&mut tape, e_t, p, q, fp, fq, &bound, cfg)?;
    Ok((
        MatchMatrix(tape.value(out.e0).clone()),
        tape.value(out.logits).clone(),
        out.transform,
    ))
}

#[cfg(test)]
mod tests;
