//! Training and reverse sampling.

mod adam;
mod eval;
mod loss;
mod sample;
mod train;

pub use adam::{adam_update, AdamState, ADAM_EPS};
pub use eval::{evaluate_prediction, predicted_flow};
pub use loss::{class_balance, focal_loss, focal_loss_weighted, FOCAL_CLAMP};
pub use sample::{backbone_init, reverse_sample, reverse_sample_with, standardize, InitMode, SampleConfig, SampleOutput};
pub use train::{loss_reweight, pair_loss, train, train_step, LossWeights, StepLosses, TrainConfig};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gt_matching_matrix, mutual_nn_pairs, ScenePair};
use crate::denoiser::{self, rotary_encode, DenoiserConfig, RotaryEncoding};
use crate::dsm::MatchMatrix;
use crate::encoder::{self, local_descriptors, prepare, EncodedCloud, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::schedule::DiffusionSchedule;
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Diffuse `2·E⁰ − 1` instead of the binary `E⁰`.
    pub symmetric_scaling: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            symmetric_scaling: false,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end).map_err(|e| Error::Config(e.to_string()))
    }

    pub(crate) fn to_diffusion_space(&self, e0: &Array2<f64>) -> Array2<f64> {
        if self.symmetric_scaling {
            e0.mapv(|v| 2.0 * v - 1.0)
        } else {
            e0.clone()
        }
    }
}

/// Architecture settings that must travel with a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.denoiser.validate()?;
        self.encoder.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ParamStore,
    pub config: ModelConfig,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        denoiser::init_params(&mut params, &config.denoiser, &mut rng)?;
        encoder::init_params(&mut params, config.denoiser.d_model, &mut rng);
        Ok(Self { params, config })
    }

    /// Check that every tensor the architecture needs is present with the right shape.
    pub fn check_params(&self) -> Result<()> {
        let fresh = Model::init(self.config.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            match self.params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(p) if p.dim() != t.dim() => {
                    return Err(Error::Checkpoint(format!("parameter {name} has shape {:?}, expected {:?}", p.dim(), t.dim())))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn encode(&self, cloud: &EncodedCloud) -> Result<EncodedCloud> {
        encoder::encode_features(cloud, &self.params, &self.config.encoder)
    }
}

/// Rotary encoding that leaves features untouched, used by the backbone
/// head because source and target arrive in unrelated frames.
pub fn identity_rotary(n: usize, cfg: &DenoiserConfig) -> Result<RotaryEncoding> {
    rotary_encode(&PointCloud::new(vec![Point::zeros(); n]), cfg)
}

/// A scene pair reduced to superpoints, with descriptors and ground truth
/// expressed on the superpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPair {
    pub name: String,
    pub src: EncodedCloud,
    pub tgt: EncodedCloud,
    pub desc_src: Array2<f64>,
    pub desc_tgt: Array2<f64>,
    pub gt_pairs: Vec<(usize, usize)>,
    pub e0: MatchMatrix,
}

pub fn prepare_pair(pair: &ScenePair, cfg: &EncoderConfig) -> Result<PreparedPair> {
    let src = prepare(&pair.src, cfg)?;
    let tgt = prepare(&pair.tgt, cfg)?;
    let warp = pair.gt_warp();
    let gt_pairs = if cfg.voxel > 0.0 {
        let moved = PointCloud::new(
            src.superpoints
                .points
                .iter()
                .zip(&src.origin_indices)
                .map(|(p, &o)| warp.apply(o, p))
                .collect(),
        );
        mutual_nn_pairs(&moved, &tgt.superpoints, pair.sigma)
    } else {
        pair.gt_pairs.clone()
    };
    let mut e0 = MatchMatrix::zeros(src.superpoints.len(), tgt.superpoints.len());
    for &(i, j) in &gt_pairs {
        e0.0[[i, j]] = 1.0;
    }
    debug_assert!(cfg.voxel > 0.0 || e0 == gt_matching_matrix(pair));
    Ok(PreparedPair {
        name: pair.name.clone(),
        desc_src: local_descriptors(&src.superpoints, cfg),
        desc_tgt: local_descriptors(&tgt.superpoints, cfg),
        src,
        tgt,
        gt_pairs,
        e0,
    })
}
