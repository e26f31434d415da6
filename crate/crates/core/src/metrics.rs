//! Correspondence and registration metrics.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{interpolate_flow, Point, PointCloud, RigidTransform};

/// Ground-truth motion of source points.
#[derive(Clone, Debug, PartialEq)]
pub enum GtWarp {
    Rigid(RigidTransform),
    /// Per-source-point displacement.
    Flow(Vec<Vector3<f64>>),
}

impl GtWarp {
    pub fn apply(&self, i: usize, p: &Point) -> Point {
        match self {
            GtWarp::Rigid(rt) => rt.apply(p),
            GtWarp::Flow(f) => p + f[i],
        }
    }
}

/// Fraction of predicted pairs `(i, j)` with `‖W(p_i) − q_j‖ < sigma`; 0 when empty.
pub fn inlier_ratio(pred: &[(usize, usize)], src: &PointCloud, tgt: &PointCloud, warp: &GtWarp, sigma: f64) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred
        .iter()
        .filter(|&&(i, j)| (warp.apply(i, &src.points[i]) - tgt.points[j]).norm() < sigma)
        .count();
    hits as f64 / pred.len() as f64
}

/// Fraction of pairs whose inlier ratio exceeds `threshold`.
pub fn feature_matching_recall(irs: &[f64], threshold: f64) -> f64 {
    if irs.is_empty() {
        return 0.0;
    }
    irs.iter().filter(|&&ir| ir > threshold).count() as f64 / irs.len() as f64
}

/// Root-mean-square distance between `pred` and `gt` over the source points
/// taking part in ground-truth correspondences.
pub fn correspondence_rmse(pred: &RigidTransform, gt: &RigidTransform, src: &PointCloud, gt_corr: &[(usize, usize)]) -> Result<f64> {
    if gt_corr.is_empty() {
        return Err(Error::Parameter("registration recall needs ground-truth correspondences".into()));
    }
    let sq: f64 = gt_corr
        .iter()
        .map(|&(i, _)| (pred.apply(&src.points[i]) - gt.apply(&src.points[i])).norm_squared())
        .sum();
    Ok((sq / gt_corr.len() as f64).sqrt())
}

pub fn registration_recall(
    pred: &RigidTransform,
    gt: &RigidTransform,
    src: &PointCloud,
    gt_corr: &[(usize, usize)],
    rmse_threshold: f64,
) -> Result<bool> {
    Ok(correspondence_rmse(pred, gt, src, gt_corr)? < rmse_threshold)
}

/// Interpolation neighbors used when turning sparse matches into flow.
pub const NFMR_K: usize = 3;

/// Fraction of ground-truth matches recovered by interpolating the flow of
/// the predicted matches: `u + Γ(u)` must land within `sigma` of `v`.
pub fn nfmr(k_gt: &[(usize, usize)], k_pred: &[(usize, usize)], src: &PointCloud, tgt: &PointCloud, sigma: f64) -> Result<f64> {
    if k_gt.is_empty() {
        return Err(Error::Parameter("nfmr needs ground-truth matches".into()));
    }
    if k_pred.is_empty() {
        return Ok(0.0);
    }
    let anchors: Vec<Point> = k_pred.iter().map(|&(i, _)| src.points[i]).collect();
    let flows: Vec<Vector3<f64>> = k_pred.iter().map(|&(i, j)| tgt.points[j] - src.points[i]).collect();
    let mut hits = 0usize;
    for &(i, j) in k_gt {
        let u = src.points[i];
        let g = interpolate_flow(&u, &anchors, &flows, NFMR_K)?;
        if (u + g - tgt.points[j]).norm() < sigma {
            hits += 1;
        }
    }
    Ok(hits as f64 / k_gt.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowThresholds {
    pub acc_s_abs: f64,
    pub acc_s_rel: f64,
    pub acc_r_abs: f64,
    pub acc_r_rel: f64,
    pub outlier_abs: f64,
    pub outlier_rel: f64,
}

impl Default for FlowThresholds {
    fn default() -> Self {
        Self {
            acc_s_abs: 0.025,
            acc_s_rel: 0.025,
            acc_r_abs: 0.05,
            acc_r_rel: 0.05,
            outlier_abs: 0.3,
            outlier_rel: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub epe: f64,
    pub acc_s: f64,
    pub acc_r: f64,
    pub outlier: f64,
}

pub fn flow_metrics(pred: &[Vector3<f64>], gt: &[Vector3<f64>], th: &FlowThresholds) -> Result<FlowMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!("{} predicted flows vs {} ground truth", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Parameter("flow metrics need at least one point".into()));
    }
    let n = pred.len() as f64;
    let (mut epe, mut s, mut r, mut o) = (0.0, 0.0, 0.0, 0.0);
    for (a, b) in pred.iter().zip(gt) {
        let err = (a - b).norm();
        let mag = b.norm();
        let rel = if mag > 0.0 {
            err / mag
        } else if err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        epe += err;
        if err < th.acc_s_abs || rel < th.acc_s_rel {
            s += 1.0;
        }
        if err < th.acc_r_abs || rel < th.acc_r_rel {
            r += 1.0;
        }
        if err > th.outlier_abs || rel > th.outlier_rel {
            o += 1.0;
        }
    }
    Ok(FlowMetrics {
        epe: epe / n,
        acc_s: s / n,
        acc_r: r / n,
        outlier: o / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub sigma: f64,
    pub fmr_ir: f64,
    pub rr_rmse: f64,
    pub flow: FlowThresholds,
}

impl Thresholds {
    pub fn rigid() -> Self {
        Self {
            sigma: 0.1,
            fmr_ir: 0.05,
            rr_rmse: 0.2,
            flow: FlowThresholds::default(),
        }
    }

    pub fn deformable() -> Self {
        Self {
            sigma: 0.04,
            ..Self::rigid()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub name: String,
    pub ir: f64,
    pub fmr_hit: bool,
    pub rr_hit: Option<bool>,
    pub nfmr: Option<f64>,
    pub epe: Option<f64>,
    pub acc_s: Option<f64>,
    pub acc_r: Option<f64>,
    pub outlier: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pairs: usize,
    pub ir: f64,
    pub fmr: f64,
    pub rr: Option<f64>,
    pub nfmr: Option<f64>,
    pub epe: Option<f64>,
    pub acc_s: Option<f64>,
    pub acc_r: Option<f64>,
    pub outlier: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_pair: Vec<PairMetrics>,
    pub aggregate: Aggregate,
    pub thresholds: Thresholds,
}

fn mean_of(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl EvalReport {
    pub fn new(per_pair: Vec<PairMetrics>, thresholds: Thresholds) -> Self {
        let n = per_pair.len();
        let aggregate = if n == 0 {
            Aggregate::default()
        } else {
            Aggregate {
                pairs: n,
                ir: per_pair.iter().map(|p| p.ir).sum::<f64>() / n as f64,
                fmr: per_pair.iter().filter(|p| p.fmr_hit).count() as f64 / n as f64,
                rr: mean_of(per_pair.iter().map(|p| p.rr_hit.map(|b| if b { 1.0 } else { 0.0 }))),
                nfmr: mean_of(per_pair.iter().map(|p| p.nfmr)),
                epe: mean_of(per_pair.iter().map(|p| p.epe)),
                acc_s: mean_of(per_pair.iter().map(|p| p.acc_s)),
                acc_r: mean_of(per_pair.iter().map(|p| p.acc_r)),
                outlier: mean_of(per_pair.iter().map(|p| p.outlier)),
            }
        };
        Self {
            per_pair,
            aggregate,
            thresholds,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per pair followed by an `aggregate` row; empty cells for
    /// metrics that do not apply.
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| format!("{x}")).unwrap_or_default()
        }
        let mut s = String::from("pair,ir,fmr,rr,nfmr,epe,acc_s,acc_r,outlier\n");
        for p in &self.per_pair {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                p.name,
                p.ir,
                u8::from(p.fmr_hit),
                p.rr_hit.map(|b| u8::from(b).to_string()).unwrap_or_default(),
                opt(p.nfmr),
                opt(p.epe),
                opt(p.acc_s),
                opt(p.acc_r),
                opt(p.outlier)
            ));
        }
        let a = &self.aggregate;
        s.push_str(&format!(
            "aggregate,{},{},{},{},{},{},{},{}\n",
            a.ir,
            a.fmr,
            opt(a.rr),
            opt(a.nfmr),
            opt(a.epe),
            opt(a.acc_s),
            opt(a.acc_r),
            opt(a.outlier)
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;

    fn line(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect())
    }

    #[test]
    fn ir_cases() {
        let p = line(4);
        let id = GtWarp::Rigid(RigidTransform::identity());
        let all: Vec<(usize, usize)> = (0..4).map(|i| (i, i)).collect();
        assert_eq!(inlier_ratio(&all, &p, &p, &id, 0.04), 1.0);
        assert_eq!(inlier_ratio(&[], &p, &p, &id, 0.04), 0.0);
        let q = PointCloud::new(vec![
            Vector3::new(0.0, 0.03, 0.0),
            Vector3::new(1.0, 0.0, 0.05),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(3.1, 0.0, 0.0),
        ]);
        assert_eq!(inlier_ratio(&all, &p, &q, &id, 0.04), 0.5);
    }

    #[test]
    fn fmr_counts() {
        assert_eq!(feature_matching_recall(&[0.5, 0.9], 0.05), 1.0);
        assert_eq!(feature_matching_recall(&[0.0, 0.05], 0.05), 0.0);
        assert_eq!(feature_matching_recall(&[0.1, 0.2, 0.3, 0.01], 0.05), 0.75);
    }

    #[test]
    fn rr_decisions() {
        let p = line(5);
        let corr: Vec<(usize, usize)> = (0..5).map(|i| (i, i)).collect();
        let gt = RigidTransform::new(axis_angle(&Vector3::z(), 0.3), Vector3::new(0.1, 0.2, 0.3));
        assert!(registration_recall(&gt, &gt, &p, &corr, 0.2).unwrap());
        let off = RigidTransform::new(gt.rotation, gt.translation + Vector3::new(1.0, 0.0, 0.0));
        assert!(!registration_recall(&off, &gt, &p, &corr, 0.2).unwrap());
        assert!(registration_recall(&gt, &gt, &p, &[], 0.2).is_err());
    }

    #[test]
    fn nfmr_basics() {
        let p = line(6);
        let q = p.translated(&Vector3::new(0.0, 1.0, 0.0));
        let gt: Vec<(usize, usize)> = (0..6).map(|i| (i, i)).collect();
        assert_eq!(nfmr(&gt, &gt, &p, &q, 0.04).unwrap(), 1.0);
        assert_eq!(nfmr(&gt, &[], &p, &q, 0.04).unwrap(), 0.0);
        assert_eq!(nfmr(&gt, &gt[..3], &p, &q, 0.04).unwrap(), 1.0);
    }

    #[test]
    fn flow_cases() {
        let th = FlowThresholds::default();
        let gt = vec![Vector3::new(1.0, 0.0, 0.0); 4];
        let m = flow_metrics(&gt, &gt, &th).unwrap();
        assert_eq!((m.epe, m.acc_s, m.acc_r, m.outlier), (0.0, 1.0, 1.0, 0.0));
        let bad: Vec<_> = gt.iter().map(|g| g + Vector3::new(0.0, 1.0, 0.0)).collect();
        let m = flow_metrics(&bad, &gt, &th).unwrap();
        assert_eq!(m.outlier, 1.0);
        assert!((m.epe - 1.0).abs() < 1e-15);
        assert!(flow_metrics(&bad[..2], &gt, &th).is_err());
    }

    #[test]
    fn aggregates_are_means() {
        let mk = |ir: f64, rr: bool| PairMetrics {
            name: format!("p{ir}"),
            ir,
            fmr_hit: ir > 0.05,
            rr_hit: Some(rr),
            nfmr: None,
            epe: None,
            acc_s: None,
            acc_r: None,
            outlier: None,
        };
        let r = EvalReport::new(vec![mk(0.2, true), mk(0.01, false), mk(0.6, true)], Thresholds::rigid());
        assert!((r.aggregate.ir - 0.27).abs() < 1e-12);
        assert!((r.aggregate.fmr - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.aggregate.rr.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.aggregate.nfmr, None);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 5);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
