use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{identity_rotary, Model, ScheduleConfig};
use crate::denoiser::g_theta;
use crate::dsm::{top_k_matches, Match, MatchMatrix};
use crate::encoder::{initial_matching_values, EncodedCloud};
use crate::error::{dim_err, Error, Result};
use crate::geometry::{soft_procrustes, RigidTransform};
use crate::schedule::{ddim_step, DiffusionSchedule, StepFormula, TauSubsequence};
use crate::tensor::sigmoid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Gaussian,
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub init_mode: InitMode,
    pub steps: usize,
    pub eta: f64,
    pub formula: StepFormula,
    pub top_k: usize,
    /// Keep only mutually best matches among the top-k.
    pub mutual: bool,
    /// Most confident entries of the final Ê₀ used for the returned transform.
    pub procrustes_k: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            init_mode: InitMode::Gaussian,
            steps: 10,
            eta: 0.0,
            formula: StepFormula::Standard,
            top_k: 128,
            mutual: false,
            procrustes_k: 16,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sample.steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config("sample.eta must lie in [0, 1]".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("sample.top_k must be >= 1".into()));
        }
        if self.procrustes_k < 3 {
            return Err(Error::Config("sample.procrustes_k must be >= 3".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub e0: MatchMatrix,
    pub transform: RigidTransform,
    pub correspondences: Vec<Match>,
    /// Every denoiser output in sampling order; the last one is `e0`.
    pub trajectory: Vec<MatchMatrix>,
}

/// Shift and scale to zero mean, unit variance; constant input maps to zeros.
pub fn standardize(x: &Array2<f64>) -> Array2<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 || !var.is_finite() {
        return Array2::zeros(x.dim());
    }
    let sd = var.sqrt();
    x.mapv(|v| (v - mean) / sd)
}

/// Standardized backbone logits used as `E^T`.
pub fn backbone_init(p: &EncodedCloud, q: &EncodedCloud, model: &Model) -> Result<Array2<f64>> {
    let rp = identity_rotary(p.superpoints.len(), &model.config.denoiser)?;
    let rq = identity_rotary(q.superpoints.len(), &model.config.denoiser)?;
    let l = initial_matching_values(&p.features, &q.features, &rp, &rq, &model.params)?;
    Ok(standardize(&l))
}

/// Reverse loop with an arbitrary denoiser.
///
/// `denoise` receives `sigmoid(E^t)` and returns `Ê₀`. Fresh noise `z` is
/// drawn only for intermediate steps with `eta > 0`; the final step into
/// `t = 0` uses none. Returns every `Ê₀` in order.
pub fn reverse_sample_with<R, F>(
    init: Array2<f64>,
    s: &DiffusionSchedule,
    tau: &TauSubsequence,
    formula: StepFormula,
    schedule: &ScheduleConfig,
    rng: &mut R,
    mut denoise: F,
) -> Result<Vec<MatchMatrix>>
where
    R: Rng,
    F: FnMut(&MatchMatrix) -> Result<MatchMatrix>,
{
    let mut e = init;
    let mut out = Vec::with_capacity(tau.indices.len());
    for (t, t_prev) in tau.pairs() {
        let e0 = denoise(&MatchMatrix(e.mapv(sigmoid)))?;
        if e0.0.dim() != e.dim() {
            return Err(dim_err("denoiser changed the matrix shape"));
        }
        let target = schedule.to_diffusion_space(&e0.0);
        let z = (t_prev > 0 && tau.eta > 0.0)
            .then(|| Array2::from_shape_fn(e.dim(), |_| StandardNormal.sample(rng)));
        e = ddim_step(&e, &target, t, t_prev, tau.eta, z.as_ref(), s, formula)?;
        out.push(e0);
    }
    Ok(out)
}

/// Sample a matching matrix for an encoded pair with the model's denoiser.
pub fn reverse_sample<R: Rng>(
    p: &EncodedCloud,
    q: &EncodedCloud,
    model: &Model,
    s: &DiffusionSchedule,
    tau: &TauSubsequence,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let (n, m) = (p.superpoints.len(), q.superpoints.len());
    if n == 0 || m == 0 {
        return Err(Error::Parameter("cannot sample matches for an empty cloud".into()));
    }
    let d = model.config.denoiser.d_model;
    if p.features.dim() != (n, d) || q.features.dim() != (m, d) {
        return Err(dim_err("clouds must be encoded with the model width before sampling"));
    }
    let init = match cfg.init_mode {
        InitMode::Gaussian => Array2::from_shape_fn((n, m), |_| StandardNormal.sample(rng)),
        InitMode::Backbone => backbone_init(p, q, model)?,
    };
    let dcfg = &model.config.denoiser;
    let trajectory = reverse_sample_with(init, s, tau, cfg.formula, &model.config.schedule, rng, |et| {
        g_theta(et, &p.superpoints, &q.superpoints, &p.features, &q.features, &model.params, dcfg).map(|r| r.0)
    })?;
    let e0 = trajectory.last().cloned().expect("tau has at least one step");
    let transform = estimate_transform_final(&e0, p, q, cfg.procrustes_k)?;
    let correspondences = top_k_matches(&e0, cfg.top_k, cfg.mutual);
    Ok(SampleOutput {
        e0,
        transform,
        correspondences,
        trajectory,
    })
}

fn estimate_transform_final(e0: &MatchMatrix, p: &EncodedCloud, q: &EncodedCloud, k: usize) -> Result<RigidTransform> {
    let k = k.min(p.superpoints.len() * q.superpoints.len()).max(3);
    match soft_procrustes(e0, &p.superpoints, &q.superpoints, k) {
        Ok(rt) => Ok(rt),
        Err(Error::Degenerate(msg)) => {
            log::debug!("final alignment degenerate ({msg}), reporting identity");
            Ok(RigidTransform::identity())
        }
        Err(e) => Err(e),
    }
}
