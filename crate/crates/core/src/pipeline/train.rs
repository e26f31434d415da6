use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{class_balance, focal_loss_weighted};
use super::{adam_update, identity_rotary, AdamState, Model, ModelConfig, PreparedPair};
use crate::data::derive_seed;
use crate::denoiser::g_theta_var;
use crate::dsm::{sinkhorn_var, Marginals, MatchMatrix};
use crate::encoder::{encode_var, initial_matching};
use crate::error::{Error, Result};
use crate::schedule::{forward_diffuse, DiffusionSchedule};
use crate::tensor::{accumulate, Grads, ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Backbone matching surrogate.
    pub matching: f64,
    /// Warp residual surrogate.
    pub warp: f64,
    /// Denoising term.
    pub simple: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            matching: 1.0,
            warp: 1.0,
            simple: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Multiply the positive focal weight by the negative/positive count ratio.
    pub focal_balance: bool,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 2,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            focal_balance: true,
            loss_weights: LossWeights::default(),
            seed: 0,
            freeze_encoder: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("train.adam_betas must lie in [0, 1)".into()));
        }
        if !(self.focal_gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("train.focal_gamma must be >= 0 and focal_alpha in [0, 1]".into()));
        }
        let w = self.loss_weights;
        if !(w.matching >= 0.0 && w.warp >= 0.0 && w.simple >= 0.0) {
            return Err(Error::Config("train.loss_weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-pair (or batch-averaged) loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub simple: f64,
    pub matching: f64,
    pub warp: f64,
    /// Diffusion step drawn for the pair (0 for batch averages).
    pub t: usize,
}

/// Weight `(T − t + 1) / T` applied to the denoising term at step `t`.
pub fn loss_reweight(t: usize, total: usize) -> f64 {
    (total - t + 1) as f64 / total as f64
}

fn focal_weights(cfg: &TrainConfig, target: &Array2<f64>) -> (f64, f64) {
    let balance = if cfg.focal_balance { class_balance(target) } else { 1.0 };
    (cfg.focal_alpha * balance, 1.0 - cfg.focal_alpha)
}

/// Loss and parameter gradients for one pair. All randomness comes from `seed`.
pub fn pair_loss(
    pair: &PreparedPair,
    params: &ParamStore,
    model: &ModelConfig,
    s: &DiffusionSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(StepLosses, Grads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (pair.src.superpoints.len(), pair.tgt.superpoints.len());
    let t = rng.random_range(1..=s.steps());
    let noise = Array2::from_shape_fn((n, m), |_| StandardNormal.sample(&mut rng));
    let diffused = forward_diffuse(&model.schedule.to_diffusion_space(&pair.e0.0), t, &noise, s)?;

    let mut tape = Tape::new();
    let frozen: &[&str] = if cfg.freeze_encoder { &["encoder"] } else { &[] };
    let bound = params.bind(&mut tape, frozen);
    let fp = encode_var(&mut tape, &pair.desc_src, &bound)?;
    let fq = encode_var(&mut tape, &pair.desc_tgt, &bound)?;
    let out = g_theta_var(
        &mut tape,
        &MatchMatrix(diffused.squashed),
        &pair.src.superpoints,
        &pair.tgt.superpoints,
        fp,
        fq,
        &bound,
        &model.denoiser,
    )?;
    let (wp, wn) = focal_weights(cfg, &pair.e0.0);
    let simple = focal_loss_weighted(&mut tape, out.e0, &pair.e0.0, cfg.focal_gamma, wp, wn)?;
    let simple = tape.scale(simple, loss_reweight(t, s.steps()));

    let rot_p = identity_rotary(n, &model.denoiser)?;
    let rot_q = identity_rotary(m, &model.denoiser)?;
    let init = initial_matching(&mut tape, fp, fq, &rot_p, &rot_q, &bound)?;
    let init = sinkhorn_var(&mut tape, init, model.denoiser.sinkhorn_iters_inner, Marginals::Relaxed)?;
    let matching = focal_loss_weighted(&mut tape, init, &pair.e0.0, cfg.focal_gamma, wp, wn)?;

    // The alignment step has no backward pass, so this term is reported
    // and added to the total but carries no gradient.
    let warp = if pair.gt_pairs.is_empty() {
        log::warn!("{}: no ground-truth pairs, skipping warp loss", pair.name);
        0.0
    } else {
        let src = &pair.src.superpoints.points;
        let tgt = &pair.tgt.superpoints.points;
        pair.gt_pairs
            .iter()
            .map(|&(i, j)| (out.transform.apply(&src[i]) - tgt[j]).norm())
            .sum::<f64>()
            / pair.gt_pairs.len() as f64
    };

    let w = cfg.loss_weights;
    let a = tape.scale(simple, w.simple);
    let b = tape.scale(matching, w.matching);
    let total = tape.add(a, b)?;
    let total = tape.add_scalar(total, w.warp * warp);
    tape.backward(total)?;

    let mut grads = bound.grads(&tape);
    if cfg.freeze_encoder {
        grads.retain(|k, _| !k.starts_with("encoder"));
    }
    let losses = StepLosses {
        total: tape.value(total)[[0, 0]],
        simple: tape.value(simple)[[0, 0]],
        matching: tape.value(matching)[[0, 0]],
        warp,
        t,
    };
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!("{}: non-finite loss at t={t}", pair.name)));
    }
    Ok((losses, grads))
}

/// One optimizer step over `batch`. Pairs are evaluated in parallel; their
/// gradients are summed in batch order and averaged, so the result does not
/// depend on the thread count.
pub fn train_step<R: Rng>(
    batch: &[&PreparedPair],
    model: &mut Model,
    opt: &mut AdamState,
    s: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty training batch".into()));
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let results: Vec<Result<(StepLosses, Grads)>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(p, &seed)| pair_loss(p, &model.params, &model.config, s, cfg, seed))
        .collect();
    let mut sum = Grads::new();
    let mut avg = StepLosses::default();
    let k = batch.len() as f64;
    for r in results {
        let (l, g) = r?;
        accumulate(&mut sum, &g);
        avg.total += l.total / k;
        avg.simple += l.simple / k;
        avg.matching += l.matching / k;
        avg.warp += l.warp / k;
    }
    for g in sum.values_mut() {
        g.mapv_inplace(|v| v / k);
    }
    adam_update(&mut model.params, &sum, opt, cfg.learning_rate, cfg.adam_betas);
    Ok(avg)
}

/// Full training loop. The pair order is reshuffled every epoch from the
/// training seed; `progress` sees `(step, losses)` after each update.
pub fn train(
    pairs: &[PreparedPair],
    model: &mut Model,
    s: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, &StepLosses),
) -> Result<Vec<StepLosses>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Parameter("no training pairs".into()));
    }
    let mut opt = AdamState::new(&model.params);
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    'outer: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| curve.len() >= m) {
                break 'outer;
            }
            let batch: Vec<&PreparedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let l = train_step(&batch, model, &mut opt, s, cfg, &mut rng)?;
            curve.push(l);
            progress(curve.len(), &l);
        }
    }
    Ok(curve)
}
