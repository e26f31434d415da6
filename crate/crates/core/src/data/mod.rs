//! Scene pairs with ground truth, synthetic generators and file I/O.

mod io;
mod synth;

pub use io::{load_dataset, load_pair, load_ply, parse_ply, save_dataset, save_ply, write_ply, Manifest, ManifestEntry, MANIFEST_FILE, SCHEMA_VERSION};
pub use synth::{derive_seed, gen_deformable_pair, gen_deformable_with, gen_rigid_pair, primitive_cloud, rbf_flow, synth_dataset, uniform_rotation, Rbf, SceneKind, SynthSpec, MAX_ATTEMPTS};

use nalgebra::Vector3;

use crate::dsm::MatchMatrix;
use crate::geometry::{Point, PointCloud, RigidTransform};
use crate::metrics::GtWarp;

pub const SIGMA_RIGID: f64 = 0.1;
pub const SIGMA_DEFORMABLE: f64 = 0.04;

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub name: String,
    pub src: PointCloud,
    pub tgt: PointCloud,
    /// Present for rigid scenes.
    pub gt_transform: Option<RigidTransform>,
    /// Present for deformable scenes, one vector per source point.
    pub gt_flow: Option<Vec<Vector3<f64>>>,
    pub gt_pairs: Vec<(usize, usize)>,
    pub overlap: f64,
    pub sigma: f64,
}

impl ScenePair {
    /// Ground-truth motion; identity when neither transform nor flow is set.
    pub fn gt_warp(&self) -> GtWarp {
        match (&self.gt_flow, &self.gt_transform) {
            (Some(f), _) => GtWarp::Flow(f.clone()),
            (None, Some(t)) => GtWarp::Rigid(*t),
            (None, None) => GtWarp::Rigid(RigidTransform::identity()),
        }
    }

    pub fn warped_src(&self) -> PointCloud {
        let w = self.gt_warp();
        PointCloud::new(self.src.points.iter().enumerate().map(|(i, p)| w.apply(i, p)).collect())
    }

    pub fn is_rigid(&self) -> bool {
        self.gt_flow.is_none()
    }
}

/// Binary matrix with ones exactly at the ground-truth pairs.
pub fn gt_matching_matrix(pair: &ScenePair) -> MatchMatrix {
    let mut m = MatchMatrix::zeros(pair.src.len(), pair.tgt.len());
    for &(i, j) in &pair.gt_pairs {
        m.0[[i, j]] = 1.0;
    }
    m
}

fn nearest(p: &Point, cloud: &[Point]) -> Option<(usize, f64)> {
    cloud
        .iter()
        .enumerate()
        .map(|(j, q)| (j, (p - q).norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// One-to-one pairs: mutual nearest neighbors closer than `sigma`, sorted by
/// source index.
pub fn mutual_nn_pairs(warped_src: &PointCloud, tgt: &PointCloud, sigma: f64) -> Vec<(usize, usize)> {
    let back: Vec<Option<(usize, f64)>> = tgt.points.iter().map(|q| nearest(q, &warped_src.points)).collect();
    warped_src
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (j, d) = nearest(p, &tgt.points)?;
            (d < sigma && back[j].map(|b| b.0) == Some(i)).then_some((i, j))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutual_pairs_are_one_to_one() {
        let a = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [0.05, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let b = PointCloud::from_rows(&[[0.04, 0.0, 0.0], [9.0, 0.0, 0.0]]);
        assert_eq!(mutual_nn_pairs(&a, &b, 0.1), vec![(1, 0)]);
    }
}
