//! Lightweight feature encoder standing in for a convolutional backbone.
//!
//! Points are optionally voxel-subsampled into superpoints, each superpoint
//! gets a hand-built descriptor of its neighborhood in relative coordinates
//! and a shared MLP lifts that descriptor to the model width.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{init_mlp, matching_logits, mlp, RotaryEncoding};
use crate::error::{Error, Result};
use crate::geometry::{knn_indices, Point, PointCloud};
use crate::tensor::{BoundParams, ParamStore, Tape, Var};

/// Descriptor width: mean offset (3), covariance spread (3), radial histogram.
pub const N_BINS: usize = 8;
pub const DESCRIPTOR_DIM: usize = 6 + N_BINS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Voxel edge for subsampling; `0` keeps every input point.
    pub voxel: f64,
    pub k_neighbors: usize,
    /// Length (m) used to normalize offsets and spreads.
    pub feature_scale: f64,
    /// Outer edge (m) of the radial histogram; farther neighbors land in the last bin.
    pub hist_radius: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            voxel: 0.0,
            k_neighbors: 8,
            feature_scale: 0.3,
            hist_radius: 0.8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel >= 0.0) || !self.voxel.is_finite() {
            return Err(Error::Config("encoder.voxel must be finite and >= 0".into()));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("encoder.k_neighbors must be >= 1".into()));
        }
        if !(self.feature_scale > 0.0) || !(self.hist_radius > 0.0) {
            return Err(Error::Config("encoder scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCloud {
    pub superpoints: PointCloud,
    /// `n × d` features; empty (`n × 0`) until [`encode_features`] runs.
    pub features: Array2<f64>,
    /// For each superpoint, the input point nearest to it.
    pub origin_indices: Vec<usize>,
}

impl EncodedCloud {
    /// Wrap a cloud without subsampling.
    pub fn identity(p: &PointCloud) -> Self {
        Self {
            superpoints: p.clone(),
            features: Array2::zeros((p.len(), 0)),
            origin_indices: (0..p.len()).collect(),
        }
    }
}

/// One centroid per occupied voxel, ordered by first occurrence in the input.
pub fn voxel_subsample(p: &PointCloud, voxel: f64) -> Result<EncodedCloud> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(Error::Parameter(format!("voxel size {voxel} must be positive")));
    }
    let mut slot: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, pt) in p.points.iter().enumerate() {
        let key = (
            (pt.x / voxel).floor() as i64,
            (pt.y / voxel).floor() as i64,
            (pt.z / voxel).floor() as i64,
        );
        let s = *slot.entry(key).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[s].push(i);
    }
    let mut centers = Vec::with_capacity(members.len());
    let mut origin = Vec::with_capacity(members.len());
    for m in &members {
        let c: Point = m.iter().map(|&i| p.points[i]).sum::<Point>() / m.len() as f64;
        let nearest = m
            .iter()
            .copied()
            .min_by(|&a, &b| (p.points[a] - c).norm().total_cmp(&(p.points[b] - c).norm()))
            .expect("voxel has members");
        centers.push(c);
        origin.push(nearest);
    }
    Ok(EncodedCloud {
        superpoints: PointCloud::new(centers),
        features: Array2::zeros((members.len(), 0)),
        origin_indices: origin,
    })
}

/// Subsample when `cfg.voxel > 0`, otherwise keep the cloud as is.
pub fn prepare(p: &PointCloud, cfg: &EncoderConfig) -> Result<EncodedCloud> {
    if cfg.voxel > 0.0 {
        voxel_subsample(p, cfg.voxel)
    } else {
        Ok(EncodedCloud::identity(p))
    }
}

/// Translation-invariant neighborhood statistics, one row per point.
///
/// Clouds with fewer than two points get all-zero rows.
pub fn local_descriptors(p: &PointCloud, cfg: &EncoderConfig) -> Array2<f64> {
    let n = p.len();
    let mut out = Array2::zeros((n, DESCRIPTOR_DIM));
    if n < 2 {
        return out;
    }
    let k = cfg.k_neighbors.min(n - 1);
    for (i, x) in p.points.iter().enumerate() {
        let offsets: Vec<Point> = knn_indices(x, &p.points, k + 1)
            .into_iter()
            .filter(|&(j, _)| j != i)
            .take(k)
            .map(|(j, _)| p.points[j] - x)
            .collect();
        let kf = offsets.len() as f64;
        let mean: Point = offsets.iter().sum::<Point>() / kf;
        let mut cov = Matrix3::zeros();
        for o in &offsets {
            let c = o - mean;
            cov += c * c.transpose();
        }
        cov /= kf;
        let lam = SymmetricEigen::new(cov).eigenvalues;
        // flat or collinear neighbourhoods: the zero eigenvalues come out as
        // rounding noise, whose square root would dominate the descriptor
        let floor = 1e-10 * lam.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut eig: Vec<f64> = lam.iter().map(|&v| if v > floor { v.sqrt() } else { 0.0 }).collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let mut row = out.row_mut(i);
        for a in 0..3 {
            row[a] = mean[a] / cfg.feature_scale;
            row[3 + a] = eig[a] / cfg.feature_scale;
        }
        for o in &offsets {
            let b = ((o.norm() / cfg.hist_radius) * N_BINS as f64) as usize;
            row[6 + b.min(N_BINS - 1)] += 1.0 / kf;
        }
    }
    out
}

pub fn init_params<R: Rng>(store: &mut ParamStore, d_model: usize, rng: &mut R) {
    init_mlp(store, "encoder.mlp", DESCRIPTOR_DIM, d_model, d_model, 1.0, rng);
    store.init_linear("encoder.match.wp", d_model, d_model, 1.0, rng);
    store.init_linear("encoder.match.wq", d_model, d_model, 1.0, rng);
}

/// Features on a tape, for joint training.
pub fn encode_var(tape: &mut Tape, descriptors: &Array2<f64>, params: &BoundParams) -> Result<Var> {
    let x = tape.constant(descriptors.clone());
    mlp(tape, x, params, "encoder.mlp")
}

/// Fill in `features` for a prepared cloud.
pub fn encode_features(cloud: &EncodedCloud, params: &ParamStore, cfg: &EncoderConfig) -> Result<EncodedCloud> {
    let desc = local_descriptors(&cloud.superpoints, cfg);
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &["encoder"]);
    let f = encode_var(&mut tape, &desc, &b)?;
    let mut out = cloud.clone();
    out.features = tape.value(f).clone();
    Ok(out)
}

/// Backbone matching head; see [`matching_logits`].
pub fn initial_matching(
    tape: &mut Tape,
    f_p: Var,
    f_q: Var,
    rot_p: &RotaryEncoding,
    rot_q: &RotaryEncoding,
    params: &BoundParams,
) -> Result<Var> {
    matching_logits(tape, f_p, f_q, rot_p, rot_q, params, "encoder.match")
}

/// Plain-array version of [`initial_matching`].
pub fn initial_matching_values(
    f_p: &Array2<f64>,
    f_q: &Array2<f64>,
    rot_p: &RotaryEncoding,
    rot_q: &RotaryEncoding,
    params: &ParamStore,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &["encoder"]);
    let (a, c) = (tape.constant(f_p.clone()), tape.constant(f_q.clone()));
    let l = initial_matching(&mut tape, a, c, rot_p, rot_q, &b)?;
    Ok(tape.value(l).clone())
}
