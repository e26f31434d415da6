use nalgebra::Vector3;

use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::geometry::{interpolate_flow, Point, RigidTransform};
use crate::metrics::{correspondence_rmse, flow_metrics, inlier_ratio, nfmr, PairMetrics, Thresholds, NFMR_K};

/// Dense source flow interpolated from predicted correspondences.
pub fn predicted_flow(pair: &ScenePair, corr: &[(usize, usize)]) -> Result<Vec<Vector3<f64>>> {
    if corr.is_empty() {
        return Ok(vec![Vector3::zeros(); pair.src.len()]);
    }
    let anchors: Vec<Point> = corr.iter().map(|&(i, _)| pair.src.points[i]).collect();
    let flows: Vec<Vector3<f64>> = corr.iter().map(|&(i, j)| pair.tgt.points[j] - pair.src.points[i]).collect();
    pair.src.points.iter().map(|u| interpolate_flow(u, &anchors, &flows, NFMR_K)).collect()
}

/// All metrics that apply to `pair`: IR and FMR always, RR for rigid scenes
/// with a transform, NFMR and flow accuracy for deformable scenes.
pub fn evaluate_prediction(
    pair: &ScenePair,
    corr: &[(usize, usize)],
    transform: Option<&RigidTransform>,
    th: &Thresholds,
) -> Result<PairMetrics> {
    if let Some(&(i, j)) = corr.iter().find(|&&(i, j)| i >= pair.src.len() || j >= pair.tgt.len()) {
        return Err(Error::Dimension(format!("{}: correspondence ({i}, {j}) out of range", pair.name)));
    }
    let warp = pair.gt_warp();
    let ir = inlier_ratio(corr, &pair.src, &pair.tgt, &warp, th.sigma);
    let mut m = PairMetrics {
        name: pair.name.clone(),
        ir,
        fmr_hit: ir > th.fmr_ir,
        rr_hit: None,
        nfmr: None,
        epe: None,
        acc_s: None,
        acc_r: None,
        outlier: None,
    };
    if let (Some(gt), Some(pred)) = (&pair.gt_transform, transform) {
        if !pair.gt_pairs.is_empty() {
            m.rr_hit = Some(correspondence_rmse(pred, gt, &pair.src, &pair.gt_pairs)? < th.rr_rmse);
        }
    }
    if let Some(gt_flow) = &pair.gt_flow {
        if !pair.gt_pairs.is_empty() {
            m.nfmr = Some(nfmr(&pair.gt_pairs, corr, &pair.src, &pair.tgt, th.sigma)?);
        }
        if !gt_flow.is_empty() {
            let f = flow_metrics(&predicted_flow(pair, corr)?, gt_flow, &th.flow)?;
            m.epe = Some(f.epe);
            m.acc_s = Some(f.acc_s);
            m.acc_r = Some(f.acc_r);
            m.outlier = Some(f.outlier);
        }
    }
    Ok(m)
}
