//! Rigid transforms, weighted Procrustes alignment and flow interpolation.

use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::dsm::{top_k_matches, MatchMatrix};
use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// A set of 3-D points in meters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Self {
        Self {
            points: rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn translated(&self, v: &Point) -> Self {
        Self::new(self.points.iter().map(|p| p + v).collect())
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.points.is_empty() {
            return None;
        }
        Some(self.points.iter().sum::<Point>() / self.points.len() as f64)
    }
}

/// `x ↦ R·x + t` with `R ∈ SO(3)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn apply(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> Self {
        Self::new(
            self.rotation * first.rotation,
            self.rotation * first.translation + self.translation,
        )
    }

    /// Whether `RᵀR = I` and `det R = 1` within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        ((r.transpose() * r) - Matrix3::identity()).abs().max() <= tol && (r.determinant() - 1.0).abs() <= tol
    }

    /// Row-major `3×4` `[R | t]`.
    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let mut out = [[0.0; 4]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for j in 0..3 {
                row[j] = self.rotation[(i, j)];
            }
            row[3] = self.translation[i];
        }
        out
    }

    pub fn from_rows(rows: &[[f64; 4]; 3]) -> Self {
        let r = Matrix3::from_fn(|i, j| rows[i][j]);
        let t = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        Self::new(r, t)
    }
}

/// Apply `rt` to every point.
pub fn rigid_warp(p: &PointCloud, rt: &RigidTransform) -> PointCloud {
    PointCloud::new(p.points.iter().map(|x| rt.apply(x)).collect())
}

/// Weighted rigid alignment from the `k` strongest entries of a projected
/// matching matrix.
///
/// Weights are renormalized to sum 1; both selections are centered on their
/// weighted centroids and the rotation comes from the SVD of the weighted
/// cross-covariance, with the sign of the smallest singular direction fixed
/// so that `det R = +1`. The result maps `p` onto `q`.
pub fn soft_procrustes(e: &MatchMatrix, p: &PointCloud, q: &PointCloud, k: usize) -> Result<RigidTransform> {
    if k < 3 {
        return Err(Error::Parameter(format!("procrustes needs k >= 3, got {k}")));
    }
    if e.n_src() != p.len() || e.n_tgt() != q.len() {
        return Err(Error::Dimension(format!(
            "matrix {}x{} vs clouds {} and {}",
            e.n_src(),
            e.n_tgt(),
            p.len(),
            q.len()
        )));
    }
    let matches = top_k_matches(e, k, false);
    let total: f64 = matches.iter().map(|m| m.score.max(0.0)).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate("no positive correspondence weight".into()));
    }
    let weighted: Vec<(f64, &Point, &Point)> = matches
        .iter()
        .map(|m| (m.score.max(0.0) / total, &p.points[m.i], &q.points[m.j]))
        .collect();
    weighted_kabsch(&weighted)
}

/// Rigid alignment for explicit `(weight, source, target)` triples; weights
/// must sum to 1.
pub fn weighted_kabsch(pairs: &[(f64, &Point, &Point)]) -> Result<RigidTransform> {
    let pc: Point = pairs.iter().map(|(w, a, _)| *a * *w).sum();
    let qc: Point = pairs.iter().map(|(w, _, b)| *b * *w).sum();
    let mut h = Matrix3::zeros();
    for (w, a, b) in pairs {
        h += (*a - pc) * (*b - qc).transpose() * *w;
    }
    let svd = SVD::new(h, true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 1e-300) || sv[1] <= 1e-10 * sv[0] {
        return Err(Error::Degenerate(format!(
            "cross-covariance rank < 2 (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[0], sv[1], sv[2]
        )));
    }
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    // flip the direction with the smallest singular value
    let smallest = (0..3)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .expect("three singular values");
    let mut diag = Vector3::new(1.0, 1.0, 1.0);
    diag[smallest] = d;
    let r = v * Matrix3::from_diagonal(&diag) * u.transpose();
    let t = qc - r * pc;
    Ok(RigidTransform::new(r, t))
}

/// Geodesic rotation error (radians) and translation error (meters).
///
/// The angle is `arccos((tr(R_predᵀ R_gt) − 1)/2)`, evaluated as
/// `atan2(sin θ, cos θ)` from the skew and trace parts of the relative
/// rotation so that tiny angles stay accurate.
pub fn transform_error(pred: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let rel = pred.rotation.transpose() * gt.rotation;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (axis.norm() / 2.0).min(1.0);
    let rot = sin.atan2(cos);
    (rot, (pred.translation - gt.translation).norm())
}

/// Indices of the `k` anchors nearest to `u`, ties broken by index.
pub fn knn_indices(u: &Point, anchors: &[Point], k: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = anchors.iter().enumerate().map(|(i, a)| (i, (u - a).norm())).collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k.min(anchors.len()));
    d
}

/// Inverse-distance interpolation of sparse flows over the `k` nearest anchors.
pub fn interpolate_flow(u: &Point, anchors: &[Point], flows: &[Vector3<f64>], k: usize) -> Result<Vector3<f64>> {
    if anchors.is_empty() || anchors.len() != flows.len() {
        return Err(Error::Dimension(format!(
            "{} anchors vs {} flows",
            anchors.len(),
            flows.len()
        )));
    }
    let nn = knn_indices(u, anchors, k.max(1));
    if nn[0].1 < 1e-12 {
        return Ok(flows[nn[0].0]);
    }
    let mut num = Vector3::zeros();
    let mut den = 0.0;
    for (i, d) in nn {
        let w = 1.0 / d;
        num += flows[i] * w;
        den += w;
    }
    Ok(num / den)
}

/// Rotation about a unit axis by `angle` radians.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let a = axis.normalize();
    let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}
