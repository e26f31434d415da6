//! Variance schedules, closed-form forward diffusion and DDIM/DDPM reverse
//! steps over matrix-shaped states.
//!
//! Timesteps are 1-based (`1..=T`); `t = 0` denotes the clean sample with
//! `ᾱ_0 = 1`.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::sigmoid;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Betas linearly spaced over `[beta_start, beta_end]`, endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product `ᾱ_t`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Parameter(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// DDPM posterior variance `(1-α_t)(1-ᾱ_{t-1})/(1-ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha(t)) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Reverse-step noise scale between `t` and `t_prev` for a given `eta`.
    pub fn sigma(&self, t: usize, t_prev: usize, eta: f64) -> f64 {
        let (ab_t, ab_p) = (self.alpha_bar(t), self.alpha_bar(t_prev));
        let var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p);
        eta * var.max(0.0).sqrt()
    }
}

/// Output of the closed-form forward process.
#[derive(Clone, Debug, PartialEq)]
pub struct Diffused {
    /// `√ᾱ_t·e0 + √(1−ᾱ_t)·noise`
    pub raw: Array2<f64>,
    /// `sigmoid(raw)`
    pub squashed: Array2<f64>,
}

/// Sample `q(E^t | E^0)` in closed form with caller-supplied standard normal noise.
pub fn forward_diffuse(e0: &Array2<f64>, t: usize, noise: &Array2<f64>, s: &DiffusionSchedule) -> Result<Diffused> {
    s.check_step(t)?;
    if e0.dim() != noise.dim() {
        return Err(dim_err(format!("noise {:?} vs e0 {:?}", noise.dim(), e0.dim())));
    }
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let raw = Zip::from(e0).and(noise).map_collect(|&x, &z| a * x + b * z);
    let squashed = raw.mapv(sigmoid);
    Ok(Diffused { raw, squashed })
}

/// Which `ε_t` expression the reverse step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepFormula {
    /// `ε_t = (E^t − √ᾱ_t·Ê₀) / √(1−ᾱ_t)`, the DDIM inversion identity.
    #[default]
    Standard,
    /// `ε_t = Ê₀/√(1−ᾱ_t) − √ᾱ_t/√(1−ᾱ_t)·E^t`, with the roles of Ê₀ and
    /// E^t swapped; kept for side-by-side comparison runs.
    Swapped,
}

/// One reverse step from `t` to `t_prev < t` (`t_prev = 0` is the final step).
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    e_t: &Array2<f64>,
    e0_hat: &Array2<f64>,
    t: usize,
    t_prev: usize,
    eta: f64,
    z: Option<&Array2<f64>>,
    s: &DiffusionSchedule,
    formula: StepFormula,
) -> Result<Array2<f64>> {
    s.check_step(t)?;
    if t_prev >= t {
        return Err(Error::Parameter(format!("t_prev {t_prev} must be below t {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Parameter(format!("eta {eta} outside [0, 1]")));
    }
    if e_t.dim() != e0_hat.dim() || z.is_some_and(|z| z.dim() != e_t.dim()) {
        return Err(dim_err("ddim_step operands must share a shape"));
    }
    let (ab_t, ab_p) = (s.alpha_bar(t), s.alpha_bar(t_prev));
    let sigma = s.sigma(t, t_prev, eta);
    let mut dir = 1.0 - ab_p - sigma * sigma;
    if dir < 0.0 {
        // rounding only: sigma² ≤ 1 − ᾱ_prev holds analytically for eta ≤ 1
        if dir < -1e-12 {
            return Err(Error::Numeric(format!("sigma² {} exceeds 1 − ᾱ_prev {}", sigma * sigma, 1.0 - ab_p)));
        }
        dir = 0.0;
    }
    let dir = dir.sqrt();
    let inv = 1.0 / (1.0 - ab_t).sqrt();
    let sq_t = ab_t.sqrt();
    let sq_p = ab_p.sqrt();

    let mut out = Zip::from(e_t).and(e0_hat).map_collect(|&xt, &x0| {
        let eps = match formula {
            StepFormula::Standard => (xt - sq_t * x0) * inv,
            StepFormula::Swapped => x0 * inv - sq_t * inv * xt,
        };
        sq_p * x0 + dir * eps
    });
    if let Some(z) = z {
        if sigma > 0.0 {
            Zip::from(&mut out).and(z).for_each(|o, &n| *o += sigma * n);
        }
    }
    Ok(out)
}

/// Strictly increasing sampling subsequence of `1..=T` ending at `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TauSubsequence {
    pub indices: Vec<usize>,
    pub eta: f64,
}

impl TauSubsequence {
    /// `(t, t_prev)` pairs in sampling order, from `T` down to the final step into 0.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.indices.len())
            .rev()
            .map(|k| (self.indices[k], if k == 0 { 0 } else { self.indices[k - 1] }))
            .collect()
    }
}

/// Evenly spaced `steps` indices `⌈T·i/steps⌉, i = 1..=steps`.
pub fn make_tau(total: usize, steps: usize, eta: f64) -> Result<TauSubsequence> {
    if steps == 0 || steps > total {
        return Err(Error::Parameter(format!("need 1 <= steps <= T, got steps={steps}, T={total}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Parameter(format!("eta {eta} outside [0, 1]")));
    }
    let indices = (1..=steps).map(|i| (total * i).div_ceil(steps)).collect();
    Ok(TauSubsequence { indices, eta })
}
